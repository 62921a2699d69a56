#include "tsflow/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace tsflow {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void throw_shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : shape_(std::move(shape)), data_(tsflow::numel(shape_), fill) {
    for (auto d : shape_)
        if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_)
        if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
    if (tsflow::numel(shape_) != data_.size())
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
}

template <typename Real>
Tensor<Real> Tensor<Real>::from_external(Shape shape, std::vector<Real> data) {
    Tensor t(std::move(shape), std::move(data));
    for (std::size_t i = 0; i < t.data_.size(); ++i)
        if (!std::isfinite(t.data_[i]))
            throw std::invalid_argument("non-finite value at flat index " + std::to_string(i));
    return t;
}

template <typename Real>
Real Tensor<Real>::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshaped(Shape shape) const {
    if (tsflow::numel(shape) != data_.size()) throw_shape_mismatch("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
}

template <typename Real>
void Tensor<Real>::fill(Real v) {
    std::fill(data_.begin(), data_.end(), v);
}

template <typename Real>
bool Tensor<Real>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

template <typename Real>
std::size_t Tensor<Real>::offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank does not match tensor rank");
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        if (i >= shape_[k]) throw std::out_of_range("tensor index out of range");
        off = off * shape_[k] + i;
        ++k;
    }
    return off;
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) throw_shape_mismatch("max_abs_diff", a.shape(), b.shape());
    Real m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename Real>
Real l2_norm(const Tensor<Real>& a) {
    Real s = 0;
    for (auto v : a.data()) s += v * v;
    return std::sqrt(s);
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template float l2_norm(const Tensor<float>&);
template double l2_norm(const Tensor<double>&);

}  // namespace tsflow
