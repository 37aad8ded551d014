// SPDX-License-Identifier: Apache-2.0
#include "loraforge/adapters.hpp"

#include "loraforge/errors.hpp"
#include "loraforge/rng.hpp"

#include <algorithm>
#include <cmath>

namespace loraforge {

std::string to_string(MapInit m) { return m == MapInit::zero ? "zero" : "identity"; }

MapInit map_init_from_string(const std::string& s) {
    if (s == "zero") return MapInit::zero;
    if (s == "identity") return MapInit::identity;
    throw ConfigError("unknown map init '" + s + "' (expected zero or identity)");
}

std::string to_string(Method m) {
    switch (m) {
        case Method::lora: return "lora";
        case Method::hub: return "hub";
        case Method::concat: return "concat";
        case Method::map: return "map";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    for (auto m : {Method::lora, Method::hub, Method::concat, Method::map})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown method '" + s + "' (expected lora, hub, concat or map)");
}

std::string to_string(HubMode m) { return m == HubMode::per_site ? "per_site" : "global"; }

HubMode hub_mode_from_string(const std::string& s) {
    if (s == "per_site") return HubMode::per_site;
    if (s == "global") return HubMode::global;
    throw ConfigError("unknown hub mode '" + s + "' (expected per_site or global)");
}

// ---- parameter enumeration -------------------------------------------------

template <typename S>
ParamRefs<S> AdapterSet<S>::parameters() {
    ParamRefs<S> out;
    for (auto& p : pairs) {
        out.push_back(&p.A);
        out.push_back(&p.B);
    }
    return out;
}

template <typename S>
ConstParamRefs<S> AdapterSet<S>::parameters() const {
    auto r = const_cast<AdapterSet*>(this)->parameters();
    return {r.begin(), r.end()};
}

template <typename S>
std::vector<std::string> AdapterSet<S>::site_ids() const {
    std::vector<std::string> ids;
    for (const auto& p : pairs) ids.push_back(p.site);
    return ids;
}

template <typename S>
ParamRefs<S> HubAdapter<S>::parameters() {
    ParamRefs<S> out{&coeffs};
    for (auto& c : constituents)
        for (auto* p : c.parameters()) out.push_back(p);
    return out;
}

template <typename S>
ConstParamRefs<S> HubAdapter<S>::parameters() const {
    auto r = const_cast<HubAdapter*>(this)->parameters();
    return {r.begin(), r.end()};
}

template <typename S>
std::vector<std::string> HubAdapter<S>::site_ids() const {
    return constituents.empty() ? std::vector<std::string>{} : constituents.front().site_ids();
}

template <typename S>
ParamRefs<S> ConcatAdapter<S>::parameters() {
    ParamRefs<S> out;
    for (auto& s : sites) {
        out.push_back(&s.A_cat);
        out.push_back(&s.B_cat);
    }
    return out;
}

template <typename S>
ConstParamRefs<S> ConcatAdapter<S>::parameters() const {
    auto r = const_cast<ConcatAdapter*>(this)->parameters();
    return {r.begin(), r.end()};
}

template <typename S>
std::vector<std::string> ConcatAdapter<S>::site_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : sites) ids.push_back(s.site);
    return ids;
}

template <typename S>
ParamRefs<S> MapAdapter<S>::parameters() {
    ParamRefs<S> out;
    for (auto& s : sites) {
        out.push_back(&s.A_cat);
        out.push_back(&s.B_cat);
        out.push_back(&s.A_map);
        out.push_back(&s.B_map);
    }
    return out;
}

template <typename S>
ConstParamRefs<S> MapAdapter<S>::parameters() const {
    auto r = const_cast<MapAdapter*>(this)->parameters();
    return {r.begin(), r.end()};
}

template <typename S>
std::vector<std::string> MapAdapter<S>::site_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : sites) ids.push_back(s.site);
    return ids;
}

// ---- construction ----------------------------------------------------------

template <typename S>
AdapterSet<S> init_lora(const std::vector<InjectionSite>& sites, int rank, double alpha, std::uint64_t seed,
                        std::string task_name) {
    if (rank < 1) throw ConfigError("init_lora: rank must be >= 1");
    if (sites.empty()) throw ConfigError("init_lora: model has no injection sites");
    for (const auto& s : sites)
        if (rank > std::min(s.in_dim, s.out_dim))
            throw ConfigError("init_lora: rank " + std::to_string(rank) + " exceeds dimension of site " + s.id);
    RngStream rng(seed);
    AdapterSet<S> set;
    set.task_name = std::move(task_name);
    set.rank = rank;
    set.alpha = alpha;
    for (const auto& s : sites) {
        LoraPair<S> p;
        p.site = s.id;
        p.rank = rank;
        p.alpha = alpha;
        p.A = Parameter<S>(s.id + ".A", gaussian_matrix<S>(s.in_dim, rank, rng, 0.0, 0.02), true);
        p.B = Parameter<S>(s.id + ".B", Matrix<S>::Zero(rank, s.out_dim), true);
        set.pairs.push_back(std::move(p));
    }
    return set;
}

namespace {

template <typename S>
void check_compatible(const std::vector<AdapterSet<S>>& sets, const char* op) {
    if (sets.empty()) throw CompositionError(std::string(op) + ": no adapter sets given");
    const auto& ref = sets.front();
    const auto ids = ref.site_ids();
    for (const auto& s : sets) {
        if (s.rank != ref.rank)
            throw CompositionError(std::string(op) + ": mixed ranks (" + std::to_string(ref.rank) + " in '" +
                                   ref.task_name + "', " + std::to_string(s.rank) + " in '" + s.task_name + "')");
        if (s.alpha != ref.alpha)
            throw CompositionError(std::string(op) + ": mixed alpha between '" + ref.task_name + "' and '" +
                                   s.task_name + "'");
        if (s.site_ids() != ids)
            throw CompositionError(std::string(op) + ": site list of '" + s.task_name + "' differs from '" +
                                   ref.task_name + "'");
    }
}

// Column-concatenate A blocks and row-concatenate B blocks of one site.
template <typename S>
std::pair<Matrix<S>, Matrix<S>> concat_blocks(const std::vector<AdapterSet<S>>& sets, std::size_t site) {
    const auto& first = sets.front().pairs[site];
    const Eigen::Index r = first.rank;
    const auto n = static_cast<Eigen::Index>(sets.size());
    Matrix<S> a(first.A.value.rows(), n * r);
    Matrix<S> b(n * r, first.B.value.cols());
    for (Eigen::Index t = 0; t < n; ++t) {
        const auto& p = sets[static_cast<std::size_t>(t)].pairs[site];
        a.middleCols(t * r, r) = p.A.value;
        b.middleRows(t * r, r) = p.B.value;
    }
    return {std::move(a), std::move(b)};
}

std::vector<std::string> task_names_of(const auto& sets) {
    std::vector<std::string> names;
    for (const auto& s : sets) names.push_back(s.task_name);
    return names;
}

}  // namespace

template <typename S>
HubAdapter<S> compose_hub(const std::vector<AdapterSet<S>>& sets, double init_coeff, HubMode mode) {
    check_compatible(sets, "compose_hub");
    HubAdapter<S> hub;
    hub.mode = mode;
    hub.rank = sets.front().rank;
    hub.alpha = sets.front().alpha;
    for (std::size_t t = 0; t < sets.size(); ++t) {
        AdapterSet<S> c = sets[t];
        for (auto* p : c.parameters()) {
            p->trainable = false;
            p->name = "constituent" + std::to_string(t) + "." + p->name;
        }
        hub.constituents.push_back(std::move(c));
    }
    const auto rows = mode == HubMode::per_site ? static_cast<Eigen::Index>(hub.site_count()) : 1;
    hub.coeffs = Parameter<S>("coeffs", Matrix<S>::Constant(rows, static_cast<Eigen::Index>(sets.size()),
                                                           static_cast<S>(init_coeff)),
                              true);
    return hub;
}

template <typename S>
ConcatAdapter<S> compose_concat(const std::vector<AdapterSet<S>>& sets) {
    check_compatible(sets, "compose_concat");
    ConcatAdapter<S> cat;
    cat.tasks = task_names_of(sets);
    cat.rank = sets.front().rank;
    cat.alpha = sets.front().alpha;
    for (std::size_t i = 0; i < sets.front().pairs.size(); ++i) {
        auto [a, b] = concat_blocks(sets, i);
        const auto& id = sets.front().pairs[i].site;
        cat.sites.push_back({id, Parameter<S>(id + ".A_cat", std::move(a), true),
                             Parameter<S>(id + ".B_cat", std::move(b), true)});
    }
    return cat;
}

template <typename S>
MapAdapter<S> compose_map(const std::vector<AdapterSet<S>>& sets, int m, MapInit init, std::uint64_t seed) {
    check_compatible(sets, "compose_map");
    if (m < 1) throw ConfigError("compose_map: m must be >= 1");
    const int nr = static_cast<int>(sets.size()) * sets.front().rank;
    if (init == MapInit::identity && m < nr)
        throw ConfigError("compose_map: identity init needs m >= n*r = " + std::to_string(nr) + ", got " +
                          std::to_string(m));
    RngStream rng(seed);
    MapAdapter<S> map;
    map.tasks = task_names_of(sets);
    map.rank = sets.front().rank;
    map.alpha = sets.front().alpha;
    map.m = m;
    map.init = init;
    for (std::size_t i = 0; i < sets.front().pairs.size(); ++i) {
        auto [a, b] = concat_blocks(sets, i);
        const auto& id = sets.front().pairs[i].site;
        Matrix<S> a_map, b_map;
        if (init == MapInit::zero) {
            a_map = gaussian_matrix<S>(nr, m, rng, 0.0, 0.02);
            b_map = Matrix<S>::Zero(m, nr);
        } else {
            a_map = Matrix<S>::Identity(nr, m);
            b_map = a_map.transpose();
        }
        map.sites.push_back({id, Parameter<S>(id + ".A_cat", std::move(a), false),
                             Parameter<S>(id + ".B_cat", std::move(b), false),
                             Parameter<S>(id + ".A_map", std::move(a_map), true),
                             Parameter<S>(id + ".B_map", std::move(b_map), true)});
    }
    return map;
}

int map_dim(double ratio, std::int64_t total_params, int n, int r, std::int64_t num_map_matrices) {
    if (!(ratio > 0) || total_params <= 0 || n <= 0 || r <= 0 || num_map_matrices <= 0)
        throw ConfigError("map_dim: all inputs must be positive");
    const double raw = ratio * static_cast<double>(total_params) /
                       (static_cast<double>(n) * r * static_cast<double>(num_map_matrices));
    if (raw < 0.5)
        throw ConfigError("map_dim: ratio " + std::to_string(ratio) + " gives raw m " + std::to_string(raw) +
                          " < 0.5; too small for any map");
    const auto rounded = static_cast<int>(std::llround(raw / 8.0)) * 8;
    return std::max(8, rounded);
}

// ---- counting --------------------------------------------------------------

std::int64_t count_trainable(const CompositionLayout& layout) {
    std::int64_t total = 0;
    const std::int64_t n = layout.n, r = layout.rank, m = layout.m;
    const auto sites = static_cast<std::int64_t>(layout.sites.size());
    switch (layout.method) {
        case Method::lora:
            for (const auto& s : layout.sites) total += r * (s.in_dim + s.out_dim);
            break;
        case Method::hub:
            total = layout.hub_mode == HubMode::per_site ? n * sites : n;
            break;
        case Method::concat:
            for (const auto& s : layout.sites) total += n * r * (s.in_dim + s.out_dim);
            break;
        case Method::map:
            total = 2 * n * r * m * sites;
            break;
    }
    return total;
}

template <typename S>
ParamRefs<S> parameters(ComposedAdapter<S>& adapter) {
    return std::visit([](auto& a) { return a.parameters(); }, adapter);
}

template <typename S>
ConstParamRefs<S> parameters(const ComposedAdapter<S>& adapter) {
    return std::visit([](const auto& a) { return a.parameters(); }, adapter);
}

template <typename S>
ParamRefs<S> trainable_parameters(ComposedAdapter<S>& adapter) {
    ParamRefs<S> out;
    for (auto* p : parameters(adapter))
        if (p->trainable) out.push_back(p);
    return out;
}

template <typename S>
std::int64_t count_trainable(const ComposedAdapter<S>& adapter) {
    return count_elements(parameters(adapter), true);
}

template <typename S>
std::int64_t count_trainable(const Model<S>& model) {
    return count_elements(model.parameters(), true);
}

template <typename S>
std::vector<std::string> site_ids(const ComposedAdapter<S>& adapter) {
    return std::visit([](const auto& a) { return a.site_ids(); }, adapter);
}

template <typename S>
std::size_t site_index(const ComposedAdapter<S>& adapter, const std::string& site_id) {
    const auto ids = site_ids(adapter);
    const auto it = std::find(ids.begin(), ids.end(), site_id);
    if (it == ids.end()) throw LookupError("adapter has no site '" + site_id + "'");
    return static_cast<std::size_t>(it - ids.begin());
}

// ---- deltas ----------------------------------------------------------------

namespace {

template <typename S, typename A>
Var<S> delta_of(Tape<S>& t, A& set, std::size_t site, const Var<S>& h)
    requires std::is_same_v<std::remove_const_t<A>, AdapterSet<S>>
{
    auto& p = set.pairs.at(site);
    return scale(matmul(matmul(h, t.param(p.A)), t.param(p.B)), p.scale());
}

template <typename S, typename A>
Var<S> delta_of(Tape<S>& t, A& hub, std::size_t site, const Var<S>& h)
    requires std::is_same_v<std::remove_const_t<A>, HubAdapter<S>>
{
    std::vector<Var<S>> as, bs;
    as.reserve(hub.constituents.size());
    bs.reserve(hub.constituents.size());
    for (auto& c : hub.constituents) {
        auto& p = c.pairs.at(site);
        as.push_back(t.param(p.A));
        bs.push_back(t.param(p.B));
    }
    Var<S> w = t.param(hub.coeffs);
    const Eigen::Index row = hub.mode == HubMode::per_site ? static_cast<Eigen::Index>(site) : 0;
    Var<S> a_hat = weighted_sum(w, row, std::span<const Var<S>>(as));
    Var<S> b_hat = weighted_sum(w, row, std::span<const Var<S>>(bs));
    return scale(matmul(matmul(h, a_hat), b_hat), static_cast<S>(hub.alpha / hub.rank));
}

template <typename S, typename A>
Var<S> delta_of(Tape<S>& t, A& cat, std::size_t site, const Var<S>& h)
    requires std::is_same_v<std::remove_const_t<A>, ConcatAdapter<S>>
{
    auto& s = cat.sites.at(site);
    return scale(matmul(matmul(h, t.param(s.A_cat)), t.param(s.B_cat)), cat.scale());
}

template <typename S, typename A>
Var<S> delta_of(Tape<S>& t, A& map, std::size_t site, const Var<S>& h)
    requires std::is_same_v<std::remove_const_t<A>, MapAdapter<S>>
{
    auto& s = map.sites.at(site);
    Var<S> down = matmul(h, t.param(s.A_cat));
    Var<S> mapped = matmul(matmul(down, t.param(s.A_map)), t.param(s.B_map));
    return scale(matmul(mapped, t.param(s.B_cat)), map.scale());
}

template <typename S, typename Adapter>
SiteHook<S> attach_impl(Adapter& adapter, const Model<S>& model) {
    std::vector<std::string> model_ids;
    for (const auto& s : model.sites) model_ids.push_back(s.id);
    const auto ids = site_ids<S>(adapter);
    if (ids != model_ids)
        throw CompositionError("attach: adapter covers " + std::to_string(ids.size()) +
                               " sites that do not match the model's " + std::to_string(model_ids.size()) +
                               " injection sites");
    Adapter* ptr = &adapter;
    return [ptr](Tape<S>& t, std::size_t site, const Var<S>& h) { return site_delta(t, *ptr, site, h); };
}

}  // namespace

template <typename S>
Var<S> site_delta(Tape<S>& tape, const ComposedAdapter<S>& adapter, std::size_t site, const Var<S>& h) {
    return std::visit([&](const auto& a) { return delta_of<S>(tape, a, site, h); }, adapter);
}

template <typename S>
Var<S> site_delta(Tape<S>& tape, ComposedAdapter<S>& adapter, std::size_t site, const Var<S>& h) {
    return std::visit([&](auto& a) { return delta_of<S>(tape, a, site, h); }, adapter);
}

template <typename S>
SiteHook<S> attach(const ComposedAdapter<S>& adapter, const Model<S>& model) {
    return attach_impl<S>(adapter, model);
}

template <typename S>
SiteHook<S> attach(ComposedAdapter<S>& adapter, const Model<S>& model) {
    return attach_impl<S>(adapter, model);
}

// ---- casting ---------------------------------------------------------------

namespace {

template <typename To, typename From>
AdapterSet<To> cast_set(const AdapterSet<From>& s) {
    AdapterSet<To> out;
    out.task_name = s.task_name;
    out.rank = s.rank;
    out.alpha = s.alpha;
    for (const auto& p : s.pairs)
        out.pairs.push_back({p.site, cast_parameter<To>(p.A), cast_parameter<To>(p.B), p.rank, p.alpha});
    return out;
}

}  // namespace

template <typename To, typename From>
ComposedAdapter<To> cast_adapter(const ComposedAdapter<From>& adapter) {
    return std::visit(
        [](const auto& a) -> ComposedAdapter<To> {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, AdapterSet<From>>) {
                return cast_set<To>(a);
            } else if constexpr (std::is_same_v<T, HubAdapter<From>>) {
                HubAdapter<To> h;
                for (const auto& c : a.constituents) h.constituents.push_back(cast_set<To>(c));
                h.coeffs = cast_parameter<To>(a.coeffs);
                h.mode = a.mode;
                h.rank = a.rank;
                h.alpha = a.alpha;
                return h;
            } else if constexpr (std::is_same_v<T, ConcatAdapter<From>>) {
                ConcatAdapter<To> c;
                c.tasks = a.tasks;
                c.rank = a.rank;
                c.alpha = a.alpha;
                for (const auto& s : a.sites)
                    c.sites.push_back({s.site, cast_parameter<To>(s.A_cat), cast_parameter<To>(s.B_cat)});
                return c;
            } else {
                MapAdapter<To> mp;
                mp.tasks = a.tasks;
                mp.rank = a.rank;
                mp.alpha = a.alpha;
                mp.m = a.m;
                mp.init = a.init;
                for (const auto& s : a.sites)
                    mp.sites.push_back({s.site, cast_parameter<To>(s.A_cat), cast_parameter<To>(s.B_cat),
                                        cast_parameter<To>(s.A_map), cast_parameter<To>(s.B_map)});
                return mp;
            }
        },
        adapter);
}

#define LORAFORGE_INSTANTIATE_ADAPTERS(S)                                                                     \
    template struct AdapterSet<S>;                                                                            \
    template struct HubAdapter<S>;                                                                            \
    template struct ConcatAdapter<S>;                                                                         \
    template struct MapAdapter<S>;                                                                            \
    template AdapterSet<S> init_lora<S>(const std::vector<InjectionSite>&, int, double, std::uint64_t,        \
                                        std::string);                                                         \
    template HubAdapter<S> compose_hub(const std::vector<AdapterSet<S>>&, double, HubMode);                   \
    template ConcatAdapter<S> compose_concat(const std::vector<AdapterSet<S>>&);                              \
    template MapAdapter<S> compose_map(const std::vector<AdapterSet<S>>&, int, MapInit, std::uint64_t);       \
    template std::int64_t count_trainable(const ComposedAdapter<S>&);                                         \
    template std::int64_t count_trainable(const Model<S>&);                                                   \
    template ParamRefs<S> parameters(ComposedAdapter<S>&);                                                    \
    template ConstParamRefs<S> parameters(const ComposedAdapter<S>&);                                         \
    template ParamRefs<S> trainable_parameters(ComposedAdapter<S>&);                                          \
    template std::vector<std::string> site_ids(const ComposedAdapter<S>&);                                    \
    template std::size_t site_index(const ComposedAdapter<S>&, const std::string&);                           \
    template Var<S> site_delta(Tape<S>&, const ComposedAdapter<S>&, std::size_t, const Var<S>&);              \
    template Var<S> site_delta(Tape<S>&, ComposedAdapter<S>&, std::size_t, const Var<S>&);                    \
    template SiteHook<S> attach(const ComposedAdapter<S>&, const Model<S>&);                                  \
    template SiteHook<S> attach(ComposedAdapter<S>&, const Model<S>&);

LORAFORGE_INSTANTIATE_ADAPTERS(float)
LORAFORGE_INSTANTIATE_ADAPTERS(double)

template ComposedAdapter<double> cast_adapter<double, float>(const ComposedAdapter<float>&);
template ComposedAdapter<float> cast_adapter<float, double>(const ComposedAdapter<double>&);

#undef LORAFORGE_INSTANTIATE_ADAPTERS

}  // namespace loraforge
