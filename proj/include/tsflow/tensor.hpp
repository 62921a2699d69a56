#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tsflow {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Throws ShapeError naming both shapes.
[[noreturn]] void throw_shape_mismatch(const char* op, const Shape& a, const Shape& b);

/// Dense row-major array. Values own their storage; copies are deep.
template <typename Real>
class Tensor {
public:
    using value_type = Real;

    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = Real(0));
    Tensor(Shape shape, std::vector<Real> data);

    /// Construction from data crossing an external boundary: rejects NaN/Inf.
    static Tensor from_external(Shape shape, std::vector<Real> data);
    static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<Real> data() { return data_; }
    std::span<const Real> data() const { return data_; }
    std::vector<Real>& storage() { return data_; }
    const std::vector<Real>& storage() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    const Real& operator[](std::size_t i) const { return data_[i]; }

    Real& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    const Real& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

    Real item() const;

    Tensor reshaped(Shape shape) const;
    void fill(Real v);
    bool all_finite() const;

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const;

    Shape shape_;
    std::vector<Real> data_;
};

/// Max |a - b| over all entries; shapes must match.
template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Real l2_norm(const Tensor<Real>& a);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace tsflow
