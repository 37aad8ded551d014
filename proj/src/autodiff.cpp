// SPDX-License-Identifier: Apache-2.0
#include "loraforge/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace loraforge {

namespace {

template <typename S>
std::string shape_str(const Matrix<S>& m) {
    std::ostringstream os;
    os << "[" << m.rows() << "x" << m.cols() << "]";
    return os.str();
}

template <typename S>
void same_tape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.tape() != b.tape() || a.tape() == nullptr)
        throw ContractError(std::string(op) + ": operands recorded on different tapes");
}

template <typename S>
[[noreturn]] void dim_error(const char* op, const Matrix<S>& a, const Matrix<S>& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    same_tape(a, b, "matmul");
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.cols() != bv.rows()) dim_error("matmul", av, bv);
    Matrix<S> out(av.rows(), bv.cols());
    out.noalias() = av * bv;
    const bool rg = a.requires_grad() || b.requires_grad();
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->push(std::move(out), rg, [ia, ib](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
        if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
    });
}

template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
    same_tape(a, b, "matmul_nt");
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.cols() != bv.cols()) dim_error("matmul_nt", av, bv);
    Matrix<S> out(av.rows(), bv.rows());
    out.noalias() = av * bv.transpose();
    const bool rg = a.requires_grad() || b.requires_grad();
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->push(std::move(out), rg, [ia, ib](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
        if (t.requires_grad(ib)) t.grad(ib).noalias() += g.transpose() * t.value(ia);
    });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    same_tape(a, b, "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) dim_error("add", av, bv);
    const bool rg = a.requires_grad() || b.requires_grad();
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->push(av + bv, rg, [ia, ib](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g;
        if (t.requires_grad(ib)) t.grad(ib) += g;
    });
}

template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
    same_tape(a, row, "add_row");
    const auto& av = a.value();
    const auto& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != av.cols()) dim_error("add_row", av, rv);
    Matrix<S> out = av.rowwise() + rv.row(0);
    const bool rg = a.requires_grad() || row.requires_grad();
    const std::size_t ia = a.id(), ir = row.id();
    return a.tape()->push(std::move(out), rg, [ia, ir](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g;
        if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    same_tape(a, b, "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) dim_error("mul", av, bv);
    const bool rg = a.requires_grad() || b.requires_grad();
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->push(av.cwiseProduct(bv), rg, [ia, ib](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
        if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
    });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
    const std::size_t ia = a.id();
    return a.tape()->push(a.value() * factor, a.requires_grad(), [ia, factor](Tape<S>& t, std::size_t self) {
        t.grad(ia) += t.grad(self) * factor;
    });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
    const std::size_t ia = a.id();
    return a.tape()->push(a.value().cwiseMax(S(0)), a.requires_grad(), [ia](Tape<S>& t, std::size_t self) {
        const auto& x = t.value(ia);
        t.grad(ia).array() += t.grad(self).array() * (x.array() > S(0)).template cast<S>();
    });
}

template <typename S>
Var<S> gelu(const Var<S>& a) {
    constexpr S c = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
    constexpr S k = static_cast<S>(0.044715);
    const auto& x = a.value();
    Matrix<S> inner = (c * (x.array() + k * x.array().cube())).matrix();
    Matrix<S> th = inner.array().tanh().matrix();
    Matrix<S> out = (S(0.5) * x.array() * (S(1) + th.array())).matrix();
    const std::size_t ia = a.id();
    return a.tape()->push(std::move(out), a.requires_grad(), [ia, c, k, th = std::move(th)](Tape<S>& t, std::size_t self) {
        const auto& x = t.value(ia);
        const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sech2 = S(1) - th.array().square();
        const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> d =
            S(0.5) * (S(1) + th.array()) + S(0.5) * x.array() * sech2 * c * (S(1) + S(3) * k * x.array().square());
        t.grad(ia).array() += t.grad(self).array() * d;
    });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& a, bool causal) {
    const auto& x = a.value();
    const Eigen::Index n = x.rows(), m = x.cols();
    Matrix<S> y = Matrix<S>::Zero(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index width = causal ? std::min<Eigen::Index>(i + 1, m) : m;
        const S mx = x.row(i).head(width).maxCoeff();
        S total = 0;
        for (Eigen::Index j = 0; j < width; ++j) {
            const S e = std::exp(x(i, j) - mx);
            y(i, j) = e;
            total += e;
        }
        y.row(i).head(width) /= total;
    }
    const std::size_t ia = a.id();
    return a.tape()->push(std::move(y), a.requires_grad(), [ia](Tape<S>& t, std::size_t self) {
        const auto& yv = t.value(self);
        const auto& g = t.grad(self);
        const Matrix<S> dot = (g.cwiseProduct(yv)).rowwise().sum();
        t.grad(ia).array() += yv.array() * (g.colwise() - dot.col(0)).array();
    });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps) {
    same_tape(x, gain, "layer_norm");
    same_tape(x, bias, "layer_norm");
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    const Eigen::Index n = xv.rows(), d = xv.cols();
    if (gv.rows() != 1 || gv.cols() != d) dim_error("layer_norm", xv, gv);
    if (bv.rows() != 1 || bv.cols() != d) dim_error("layer_norm", xv, bv);
    Matrix<S> xhat(n, d);
    Matrix<S> inv_std(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mean = xv.row(i).mean();
        const S var = (xv.row(i).array() - mean).square().mean();
        inv_std(i, 0) = S(1) / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i, 0);
    }
    Matrix<S> out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.tape()->push(
        std::move(out), rg,
        [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, std::size_t self) {
            const auto& g = t.grad(self);
            if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
            if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
            if (t.requires_grad(ix)) {
                const auto& gv = t.value(ig);
                const Matrix<S> gh = g.array().rowwise() * gv.row(0).array();
                const S d = static_cast<S>(gh.cols());
                auto& gx = t.grad(ix);
                for (Eigen::Index i = 0; i < gh.rows(); ++i) {
                    const S m1 = gh.row(i).sum() / d;
                    const S m2 = gh.row(i).dot(xhat.row(i)) / d;
                    gx.row(i).array() += inv_std(i, 0) * (gh.row(i).array() - m1 - xhat.row(i).array() * m2);
                }
            }
        });
}

template <typename S>
Var<S> embedding(const Var<S>& table, std::span<const int> ids) {
    const auto& tv = table.value();
    const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
    Matrix<S> out(n, tv.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const int id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= tv.rows())
            throw InputError("embedding: id " + std::to_string(id) + " outside table of " +
                             std::to_string(tv.rows()) + " rows");
        out.row(i) = tv.row(id);
    }
    const std::size_t it = table.id();
    std::vector<int> idv(ids.begin(), ids.end());
    return table.tape()->push(std::move(out), table.requires_grad(),
                              [it, idv = std::move(idv)](Tape<S>& t, std::size_t self) {
                                  const auto& g = t.grad(self);
                                  auto& gt = t.grad(it);
                                  for (std::size_t i = 0; i < idv.size(); ++i)
                                      gt.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
                              });
}

template <typename S>
Var<S> cross_entropy(const Var<S>& logits, std::span<const int> targets, const std::vector<bool>& mask) {
    const auto& x = logits.value();
    const Eigen::Index n = x.rows(), v = x.cols();
    if (static_cast<Eigen::Index>(targets.size()) != n || static_cast<Eigen::Index>(mask.size()) != n)
        throw DimensionError("cross_entropy: " + std::to_string(n) + " logit rows vs " +
                             std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                             " mask entries");
    Matrix<S> probs = Matrix<S>::Zero(n, v);
    S total = 0;
    Eigen::Index counted = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const int tgt = targets[static_cast<std::size_t>(i)];
        if (tgt < 0 || tgt >= v) throw InputError("cross_entropy: target " + std::to_string(tgt) + " out of range");
        const S mx = x.row(i).maxCoeff();
        const S lse = mx + std::log((x.row(i).array() - mx).exp().sum());
        total += lse - x(i, tgt);
        probs.row(i) = (x.row(i).array() - lse).exp();
        probs(i, tgt) -= S(1);
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: no unmasked target positions");
    const S inv = S(1) / static_cast<S>(counted);
    Matrix<S> out(1, 1);
    out(0, 0) = total * inv;
    const std::size_t il = logits.id();
    return logits.tape()->push(std::move(out), logits.requires_grad(),
                               [il, inv, probs = std::move(probs)](Tape<S>& t, std::size_t self) {
                                   t.grad(il) += probs * (t.grad(self)(0, 0) * inv);
                               });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
    Matrix<S> out(1, 1);
    out(0, 0) = a.value().sum();
    const std::size_t ia = a.id();
    return a.tape()->push(std::move(out), a.requires_grad(), [ia](Tape<S>& t, std::size_t self) {
        t.grad(ia).array() += t.grad(self)(0, 0);
    });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index start, Eigen::Index count) {
    const auto& av = a.value();
    if (start < 0 || count < 0 || start + count > av.cols())
        throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") outside " + shape_str(av));
    const std::size_t ia = a.id();
    return a.tape()->push(av.middleCols(start, count), a.requires_grad(),
                          [ia, start, count](Tape<S>& t, std::size_t self) {
                              t.grad(ia).middleCols(start, count) += t.grad(self);
                          });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    Tape<S>* tape = parts.front().tape();
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    bool rg = false;
    for (const auto& p : parts) {
        same_tape(parts.front(), p, "concat_cols");
        if (p.rows() != rows) dim_error("concat_cols", parts.front().value(), p.value());
        cols += p.cols();
        rg = rg || p.requires_grad();
    }
    Matrix<S> out(rows, cols);
    std::vector<std::size_t> ids;
    std::vector<Eigen::Index> widths;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
        ids.push_back(p.id());
        widths.push_back(p.cols());
    }
    return tape->push(std::move(out), rg, [ids = std::move(ids), widths = std::move(widths)](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (t.requires_grad(ids[i])) t.grad(ids[i]) += g.middleCols(at, widths[i]);
            at += widths[i];
        }
    });
}

template <typename S>
Var<S> weighted_sum(const Var<S>& coeffs, Eigen::Index row, std::span<const Var<S>> terms) {
    const auto& cv = coeffs.value();
    if (terms.empty()) throw ContractError("weighted_sum: no terms");
    if (row < 0 || row >= cv.rows() || cv.cols() != static_cast<Eigen::Index>(terms.size()))
        throw DimensionError("weighted_sum: coefficient matrix " + shape_str(cv) + " does not match " +
                             std::to_string(terms.size()) + " terms at row " + std::to_string(row));
    const auto& first = terms.front().value();
    Matrix<S> out = Matrix<S>::Zero(first.rows(), first.cols());
    bool rg = coeffs.requires_grad();
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        same_tape(coeffs, terms[k], "weighted_sum");
        const auto& tv = terms[k].value();
        if (tv.rows() != first.rows() || tv.cols() != first.cols()) dim_error("weighted_sum", first, tv);
        out += cv(row, static_cast<Eigen::Index>(k)) * tv;
        rg = rg || terms[k].requires_grad();
        ids.push_back(terms[k].id());
    }
    const std::size_t ic = coeffs.id();
    return coeffs.tape()->push(std::move(out), rg, [ic, row, ids = std::move(ids)](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const bool cg = t.requires_grad(ic);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const auto col = static_cast<Eigen::Index>(k);
            if (cg) t.grad(ic)(row, col) += g.cwiseProduct(t.value(ids[k])).sum();
            if (t.requires_grad(ids[k])) t.grad(ids[k]) += t.value(ic)(row, col) * g;
        }
    });
}

#define LORAFORGE_INSTANTIATE_OPS(S)                                                                      \
    template Var<S> matmul(const Var<S>&, const Var<S>&);                                                 \
    template Var<S> matmul_nt(const Var<S>&, const Var<S>&);                                              \
    template Var<S> add(const Var<S>&, const Var<S>&);                                                    \
    template Var<S> add_row(const Var<S>&, const Var<S>&);                                                \
    template Var<S> mul(const Var<S>&, const Var<S>&);                                                    \
    template Var<S> scale(const Var<S>&, S);                                                              \
    template Var<S> relu(const Var<S>&);                                                                  \
    template Var<S> gelu(const Var<S>&);                                                                  \
    template Var<S> softmax_rows(const Var<S>&, bool);                                                    \
    template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                           \
    template Var<S> embedding(const Var<S>&, std::span<const int>);                                       \
    template Var<S> cross_entropy(const Var<S>&, std::span<const int>, const std::vector<bool>&);         \
    template Var<S> sum(const Var<S>&);                                                                   \
    template Var<S> slice_cols(const Var<S>&, Eigen::Index, Eigen::Index);                                \
    template Var<S> concat_cols(std::span<const Var<S>>);                                                 \
    template Var<S> weighted_sum(const Var<S>&, Eigen::Index, std::span<const Var<S>>);

LORAFORGE_INSTANTIATE_OPS(float)
LORAFORGE_INSTANTIATE_OPS(double)

#undef LORAFORGE_INSTANTIATE_OPS

}  // namespace loraforge
