#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

namespace presnet {

#ifdef PRESNET_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major array of reals. The payload is shared and treated as
// immutable once a Tensor has been handed out; copies are O(1).
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<real> data, bool requires_grad = false);
    Tensor(Shape shape, std::shared_ptr<const real[]> data, std::size_t size);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, real value);
    static Tensor scalar(real value);
    static Tensor row(std::vector<real> v); // shape [1, n]

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t size() const { return size_; }
    std::size_t nbytes() const { return size_ * sizeof(real); }

    // Batched-op view: last axis is the ambient dimension, everything in
    // front of it is flattened into rows.
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const { return shape_.empty() ? 1 : size_ / cols(); }

    const real* data() const { return data_.get(); }
    real at(std::size_t i) const { return data_[i]; }
    const real* row_ptr(std::size_t r) const { return data_.get() + r * cols(); }

    bool requires_grad() const { return requires_grad_; }
    Tensor with_requires_grad(bool rg) const;

    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const; // shares data, new shape (numel must match)

private:
    Shape shape_;
    std::shared_ptr<const real[]> data_;
    std::size_t size_ = 0;
    bool requires_grad_ = false;
};

struct uninit_t {};
inline constexpr uninit_t kUninit{};

// Writable staging buffer; freeze() converts it into an immutable Tensor
// without copying. The default constructor zero-fills; pass kUninit for
// kernels that overwrite every element.
class TensorBuf {
public:
    explicit TensorBuf(Shape shape);
    TensorBuf(Shape shape, uninit_t);
    real* data() { return buf_.get(); }
    real& operator[](std::size_t i) { return buf_[i]; }
    real* row_ptr(std::size_t r) { return buf_.get() + r * cols_; }
    std::size_t size() const { return size_; }
    std::size_t cols() const { return cols_; }
    std::size_t rows() const { return cols_ ? size_ / cols_ : 0; }
    Tensor freeze(bool requires_grad = false);

private:
    Shape shape_;
    std::size_t cols_ = 1;
    std::size_t size_ = 0;
    std::shared_ptr<real[]> buf_;
};

// Elementwise helpers used across modules (not tape-recorded).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real s);
real max_abs(const Tensor& a);
real max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace presnet
