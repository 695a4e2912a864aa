#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "spi/common.hpp"

namespace spi {

/// Dense row-major double tensor. The whole project computes in double;
/// checkpoints quantize to f32 at the serialization boundary.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        SPI_CHECK(static_cast<std::int64_t>(data_.size()) == numel_of(shape_),
                  "tensor data/shape mismatch");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) {
            SPI_CHECK(d >= 0, "negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor randn(std::vector<std::int64_t> shape, std::uint64_t seed, double stddev = 1.0,
                        double mean = 0.0) {
        Tensor t(std::move(shape));
        Rng rng(seed);
        for (auto& v : t.data_) v = mean + stddev * rng.normal();
        return t;
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double item() const {
        SPI_CHECK(numel() == 1, "item() on non-scalar tensor");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Rounds every element to its nearest float32 value. Applied before
    /// serialization points so saved and in-memory states agree exactly.
    void quantize_f32() {
        for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
    }

    std::uint64_t content_hash() const {
        return fnv1a(data_.data(), data_.size() * sizeof(double));
    }

  private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

} // namespace spi
