// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace loraforge {

// Row-major dense matrix. All tensors in the library are rank 2; vectors are
// stored as a single row. f32 is the training dtype, f64 is used by gradient
// oracles.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <typename Scalar>
struct DtypeName;
template <>
struct DtypeName<float> {
    static constexpr const char* value = "f32";
};
template <>
struct DtypeName<double> {
    static constexpr const char* value = "f64";
};

// A named tensor with a gradient buffer of the same shape.
// When trainable is false no optimizer ever writes to value.
template <typename Scalar>
struct Parameter {
    std::string name;
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
    bool trainable = false;

    Parameter() = default;
    Parameter(std::string n, Matrix<Scalar> v, bool train)
        : name(std::move(n)), value(std::move(v)), grad(Matrix<Scalar>::Zero(value.rows(), value.cols())),
          trainable(train) {}

    Eigen::Index size() const { return value.size(); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
using ParamRefs = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
using ConstParamRefs = std::vector<const Parameter<Scalar>*>;

// Convert a parameter to another scalar type, keeping name and flag.
template <typename To, typename From>
Parameter<To> cast_parameter(const Parameter<From>& p) {
    return Parameter<To>(p.name, p.value.template cast<To>(), p.trainable);
}

template <typename Scalar>
std::int64_t count_elements(const ConstParamRefs<Scalar>& params, bool trainable_only) {
    std::int64_t total = 0;
    for (const auto* p : params) {
        if (!trainable_only || p->trainable) total += p->size();
    }
    return total;
}

}  // namespace loraforge
