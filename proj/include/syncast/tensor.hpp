#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "syncast/error.hpp"

namespace syncast {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

/// Dense row-major double tensor used for parameters and activations.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(count(shape), fill) {}

    static std::size_t count(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.empty() ? 0 : data.size() / shape[0]; }

    MatMap mat() { return MatMap(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())); }
    ConstMatMap mat() const {
        return ConstMatMap(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
    }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool operator==(const Tensor& o) const = default;
};

std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace syncast
