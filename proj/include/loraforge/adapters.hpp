// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/model.hpp"

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace loraforge {

// One adapter at one injection site. A is the [in_dim x r] down-projection,
// B the [r x out_dim] up-projection; delta(h) = (alpha / r) * (h A) B.
template <typename S>
struct LoraPair {
    std::string site;
    Parameter<S> A;
    Parameter<S> B;
    int rank = 0;
    double alpha = 0.0;

    S scale() const { return static_cast<S>(alpha / rank); }
};

// One pair per model injection site, in model site order.
template <typename S>
struct AdapterSet {
    std::string task_name;
    int rank = 0;
    double alpha = 0.0;
    std::vector<LoraPair<S>> pairs;

    ParamRefs<S> parameters();
    ConstParamRefs<S> parameters() const;
    std::vector<std::string> site_ids() const;
};

enum class HubMode { per_site, global };

std::string to_string(HubMode m);
HubMode hub_mode_from_string(const std::string& s);

// Weighted sum of frozen constituents: A_hat = sum_t w_t A_t, B_hat = sum_t
// w_t B_t, delta(h) = scale * (h A_hat) B_hat. The product keeps the cross
// terms w_s w_t A_s B_t. coeffs is [sites x n] in per_site mode, [1 x n] in
// global mode.
template <typename S>
struct HubAdapter {
    std::vector<AdapterSet<S>> constituents;
    Parameter<S> coeffs;
    HubMode mode = HubMode::per_site;
    int rank = 0;
    double alpha = 0.0;

    std::size_t n() const { return constituents.size(); }
    std::size_t site_count() const { return constituents.empty() ? 0 : constituents.front().pairs.size(); }
    ParamRefs<S> parameters();
    ConstParamRefs<S> parameters() const;
    std::vector<std::string> site_ids() const;
};

template <typename S>
struct ConcatSite {
    std::string site;
    Parameter<S> A_cat;  // [in_dim x n r]
    Parameter<S> B_cat;  // [n r x out_dim]
};

// Block concatenation of the constituents, both blocks trainable.
template <typename S>
struct ConcatAdapter {
    std::vector<std::string> tasks;
    int rank = 0;
    double alpha = 0.0;
    std::vector<ConcatSite<S>> sites;

    S scale() const { return static_cast<S>(alpha / rank); }
    ParamRefs<S> parameters();
    ConstParamRefs<S> parameters() const;
    std::vector<std::string> site_ids() const;
};

enum class MapInit { zero, identity };

std::string to_string(MapInit m);
MapInit map_init_from_string(const std::string& s);

template <typename S>
struct MapSite {
    std::string site;
    Parameter<S> A_cat;  // frozen [in_dim x n r]
    Parameter<S> B_cat;  // frozen [n r x out_dim]
    Parameter<S> A_map;  // trainable [n r x m]
    Parameter<S> B_map;  // trainable [m x n r]
};

// Frozen concatenation with trainable connection maps in between:
// delta(h) = scale * h A_cat A_map B_map B_cat.
template <typename S>
struct MapAdapter {
    std::vector<std::string> tasks;
    int rank = 0;
    double alpha = 0.0;
    int m = 0;
    MapInit init = MapInit::zero;
    std::vector<MapSite<S>> sites;

    S scale() const { return static_cast<S>(alpha / rank); }
    ParamRefs<S> parameters();
    ConstParamRefs<S> parameters() const;
    std::vector<std::string> site_ids() const;
};

template <typename S>
using ComposedAdapter = std::variant<AdapterSet<S>, HubAdapter<S>, ConcatAdapter<S>, MapAdapter<S>>;

// A ~ Gaussian(0, 0.02), B = 0 drawn from RngStream(seed) in site order.
// Throws ConfigError when rank < 1 or rank exceeds a site dimension.
template <typename S>
AdapterSet<S> init_lora(const std::vector<InjectionSite>& sites, int rank, double alpha, std::uint64_t seed,
                        std::string task_name = "lora");

// Throws CompositionError unless every set has the same site list, rank and
// alpha. Constituents are copied and frozen.
template <typename S>
HubAdapter<S> compose_hub(const std::vector<AdapterSet<S>>& sets, double init_coeff,
                          HubMode mode = HubMode::per_site);

template <typename S>
ConcatAdapter<S> compose_concat(const std::vector<AdapterSet<S>>& sets);

// zero: A_map ~ Gaussian(0, 0.02) from RngStream(seed), B_map = 0.
// identity: A_map = [I | 0], B_map = A_map^T; requires m >= n r.
template <typename S>
MapAdapter<S> compose_map(const std::vector<AdapterSet<S>>& sets, int m, MapInit init, std::uint64_t seed = 0);

// Mapping dimension for a target ratio of trainable to total parameters:
// raw = ratio * total / (n r * num_map_matrices), rounded to the nearest
// multiple of 8 with a floor of 8. Throws ConfigError when raw < 0.5.
int map_dim(double ratio, std::int64_t total_params, int n, int r, std::int64_t num_map_matrices);

// Trainable-parameter count from shapes alone, so paper-scale layouts can be
// counted without allocating them.
enum class Method { lora, hub, concat, map };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct CompositionLayout {
    Method method = Method::lora;
    std::vector<InjectionSite> sites;
    int n = 1;
    int rank = 1;
    int m = 0;
    HubMode hub_mode = HubMode::per_site;
};

std::int64_t count_trainable(const CompositionLayout& layout);

template <typename S>
std::int64_t count_trainable(const ComposedAdapter<S>& adapter);
template <typename S>
std::int64_t count_trainable(const Model<S>& model);

template <typename S>
ParamRefs<S> parameters(ComposedAdapter<S>& adapter);
template <typename S>
ConstParamRefs<S> parameters(const ComposedAdapter<S>& adapter);
template <typename S>
ParamRefs<S> trainable_parameters(ComposedAdapter<S>& adapter);

template <typename S>
std::vector<std::string> site_ids(const ComposedAdapter<S>& adapter);

// Index of a site id within the adapter, LookupError when absent.
template <typename S>
std::size_t site_index(const ComposedAdapter<S>& adapter, const std::string& site_id);

// Composition-specific delta for the site at index `site`. Trainable
// parameters are bound for gradients only when the adapter is non-const.
template <typename S>
Var<S> site_delta(Tape<S>& tape, const ComposedAdapter<S>& adapter, std::size_t site, const Var<S>& h);
template <typename S>
Var<S> site_delta(Tape<S>& tape, ComposedAdapter<S>& adapter, std::size_t site, const Var<S>& h);

// Hook for forward(). Throws CompositionError when the adapter's site list is
// not exactly the model's.
template <typename S>
SiteHook<S> attach(const ComposedAdapter<S>& adapter, const Model<S>& model);
template <typename S>
SiteHook<S> attach(ComposedAdapter<S>& adapter, const Model<S>& model);

template <typename To, typename From>
ComposedAdapter<To> cast_adapter(const ComposedAdapter<From>& adapter);

}  // namespace loraforge
