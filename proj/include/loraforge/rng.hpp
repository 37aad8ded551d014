// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/tensor.hpp"

#include <array>
#include <cstdint>

namespace loraforge {

std::uint64_t splitmix64(std::uint64_t& state);

// xoshiro256++ seeded by four successive splitmix64 outputs of the seed.
//
// The stream is part of the corpus contract, so every draw is defined
// exactly:
//   uniform()      = (next() >> 11) * 2^-53, in [0, 1)
//   below(n)       = floor(uniform() * n)
//   normal()       = Box-Muller over two consecutive uniforms u1, u2:
//                    rad = sqrt(-2 ln(1 - u1)), returns rad*cos(2 pi u2) and
//                    caches rad*sin(2 pi u2) for the following call.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    std::uint64_t next();
    double uniform();
    std::uint64_t below(std::uint64_t n);
    double normal();
    double gaussian(double mean, double std) { return mean + std * normal(); }

    const std::array<std::uint64_t, 4>& state() const { return state_; }

private:
    std::array<std::uint64_t, 4> state_{};
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// Fill in row-major order.
template <typename Scalar>
void fill_gaussian(Matrix<Scalar>& m, RngStream& rng, double mean, double std) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<Scalar>(rng.gaussian(mean, std));
}

template <typename Scalar>
Matrix<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, RngStream& rng, double mean, double std) {
    Matrix<Scalar> m(rows, cols);
    fill_gaussian(m, rng, mean, std);
    return m;
}

}  // namespace loraforge
