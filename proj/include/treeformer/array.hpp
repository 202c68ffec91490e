#pragma once

#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace treeformer {

using Shape = std::vector<std::size_t>;

inline std::string format_shape(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

/// Dense row-major array of real numbers. The scalar type is a template
/// parameter: double for gradient checks, float for training.
template <typename Real>
class Array {
public:
    Array() = default;

    explicit Array(Shape shape, Real fill = Real(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Array(Shape shape, std::vector<Real> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("Array: " + std::to_string(data_.size()) +
                                        " values do not fill shape " + format_shape(shape_));
        }
    }

    static Array scalar(Real v) { return Array(Shape{}, std::vector<Real>{v}); }

    static Array vector(std::vector<Real> values) {
        Shape s{values.size()};
        return Array(std::move(s), std::move(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    std::vector<Real>& values() { return data_; }
    const std::vector<Real>& values() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    Real operator[](std::size_t i) const { return data_[i]; }

    // 2-d accessors; most of the engine works on matrices.
    Real& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    Real at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : 0); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : 0; }

    bool same_shape(const Array& o) const { return shape_ == o.shape_; }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (Real v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    Shape shape_;
    std::vector<Real> data_;
};

inline void require_shape_match(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + format_shape(a) +
                                    " vs " + format_shape(b));
    }
}

}  // namespace treeformer
