#pragma once

// Dense tensors and the multilinear primitives used by every decomposition.
//
// Layout: row-major (C order), last index fastest. Modes are 0-based in the
// API; mode 0 corresponds to what the usual 1-based notation calls mode 1.
//
// Unfolding convention: the mode-n unfolding has n_mode rows; the column
// index enumerates the remaining modes in increasing order with the FIRST
// remaining mode fastest. For an order-3 tensor the mode-0 column of element
// (i, j, k) is j + k*J, which makes
//     unfold([[A, B, C]], 0) == A * khatri_rao(C, B)^T.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stabletd/error.hpp"

namespace stabletd {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Shape = std::vector<Index>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

inline Index shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

template <typename Scalar>
class BasicTensor {
public:
    using value_type = Scalar;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(static_cast<std::size_t>(shape_size(shape_)), Scalar{0});
    }

    BasicTensor(Shape shape, std::vector<Scalar> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (static_cast<Index>(data_.size()) != shape_size(shape_)) {
            throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
        }
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

    Index order() const noexcept { return static_cast<Index>(shape_.size()); }
    Index extent(Index mode) const { return shape_.at(static_cast<std::size_t>(mode)); }
    const Shape& shape() const noexcept { return shape_; }
    Index size() const noexcept { return static_cast<Index>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<Scalar> data() noexcept { return data_; }
    std::span<const Scalar> data() const noexcept { return data_; }

    Scalar& operator[](Index flat) { return data_[static_cast<std::size_t>(flat)]; }
    const Scalar& operator[](Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

    Scalar& operator()(Index i, Index j, Index k) { return data_[offset3(i, j, k)]; }
    const Scalar& operator()(Index i, Index j, Index k) const { return data_[offset3(i, j, k)]; }

    Scalar& operator()(Index i, Index j, Index k, Index l) { return data_[offset4(i, j, k, l)]; }
    const Scalar& operator()(Index i, Index j, Index k, Index l) const {
        return data_[offset4(i, j, k, l)];
    }

    // Frobenius norm, accumulated in double.
    double norm() const {
        double s = 0.0;
        for (const Scalar& v : data_) s += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(s);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](Scalar v) { return std::isfinite(static_cast<double>(v)); });
    }

    template <typename Other>
    BasicTensor<Other> cast() const {
        std::vector<Other> out(data_.begin(), data_.end());
        return BasicTensor<Other>(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        if (shape_.empty()) throw InvalidArgument("tensor shape must have at least one extent");
        for (Index e : shape_) {
            if (e < 1) throw InvalidArgument("tensor extents must be >= 1, got " + shape_string(shape_));
        }
    }

    std::size_t offset3(Index i, Index j, Index k) const {
        return static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k);
    }
    std::size_t offset4(Index i, Index j, Index k, Index l) const {
        return static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l);
    }

    Shape shape_;
    std::vector<Scalar> data_;
};

using DenseTensor = BasicTensor<double>;

namespace detail {

// For every remaining mode (increasing, first fastest) the step it contributes
// to the unfolded column index.
inline std::vector<Index> unfold_column_steps(const Shape& shape, Index mode) {
    std::vector<Index> steps(shape.size(), 0);
    Index step = 1;
    for (std::size_t m = 0; m < shape.size(); ++m) {
        if (static_cast<Index>(m) == mode) continue;
        steps[m] = step;
        step *= shape[m];
    }
    return steps;
}

inline void check_mode(const Shape& shape, Index mode) {
    if (mode < 0 || mode >= static_cast<Index>(shape.size())) {
        throw InvalidArgument("mode " + std::to_string(mode) + " out of range for order-" +
                              std::to_string(shape.size()) + " tensor");
    }
}

// Visits every multi-index of `shape` in row-major order, tracking the
// unfolded (row, col) position for `mode`.
template <typename Fn>
void for_each_unfolded(const Shape& shape, Index mode, Fn&& fn) {
    const auto steps = unfold_column_steps(shape, mode);
    std::vector<Index> idx(shape.size(), 0);
    const Index total = shape_size(shape);
    Index col = 0;
    for (Index flat = 0; flat < total; ++flat) {
        fn(flat, idx[static_cast<std::size_t>(mode)], col);
        // increment the multi-index (last fastest) and update col incrementally
        for (std::size_t m = shape.size(); m-- > 0;) {
            if (++idx[m] < shape[m]) {
                col += steps[m];
                break;
            }
            col -= steps[m] * (shape[m] - 1);
            idx[m] = 0;
        }
    }
}

}  // namespace detail

inline Matrix unfold(const DenseTensor& t, Index mode) {
    detail::check_mode(t.shape(), mode);
    const Index rows = t.extent(mode);
    Matrix out(rows, t.size() / rows);
    detail::for_each_unfolded(t.shape(), mode,
                              [&](Index flat, Index row, Index col) { out(row, col) = t[flat]; });
    return out;
}

inline DenseTensor fold(const Matrix& m, Index mode, const Shape& shape) {
    detail::check_mode(shape, mode);
    const Index rows = shape[static_cast<std::size_t>(mode)];
    if (m.rows() != rows || m.cols() * rows != shape_size(shape)) {
        throw InvalidArgument("cannot fold " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()) + " matrix along mode " +
                              std::to_string(mode) + " into shape " + shape_string(shape));
    }
    DenseTensor out(shape);
    detail::for_each_unfolded(shape, mode,
                              [&](Index flat, Index row, Index col) { out[flat] = m(row, col); });
    return out;
}

// Column r of the result is kron(C[:, r], B[:, r]); row index is j + k*rows(B).
inline Matrix khatri_rao(const Matrix& C, const Matrix& B) {
    if (C.cols() != B.cols()) {
        throw InvalidArgument("khatri_rao: column counts differ (" + std::to_string(C.cols()) +
                              " vs " + std::to_string(B.cols()) + ")");
    }
    Matrix out(C.rows() * B.rows(), C.cols());
    for (Index k = 0; k < C.rows(); ++k) {
        out.middleRows(k * B.rows(), B.rows()) = B.array().rowwise() * C.row(k).array();
    }
    return out;
}

// t[i,j,k] = sum_r A(i,r) B(j,r) C(k,r)
inline DenseTensor reconstruct_cp(const Matrix& A, const Matrix& B, const Matrix& C) {
    if (A.cols() != B.cols() || A.cols() != C.cols()) {
        throw InvalidArgument("reconstruct_cp: factor column counts differ");
    }
    DenseTensor out({A.rows(), B.rows(), C.rows()});
    const Index R = A.cols();
    Eigen::RowVectorXd ab(R);
    Index flat = 0;
    for (Index i = 0; i < A.rows(); ++i) {
        for (Index j = 0; j < B.rows(); ++j) {
            ab = A.row(i).cwiseProduct(B.row(j));
            for (Index k = 0; k < C.rows(); ++k) out[flat++] = C.row(k).dot(ab);
        }
    }
    return out;
}

// Contracts `mode` of t with the columns of M: result extent at `mode` is rows(M).
inline DenseTensor mode_product(const DenseTensor& t, const Matrix& M, Index mode) {
    detail::check_mode(t.shape(), mode);
    if (M.cols() != t.extent(mode)) {
        throw InvalidArgument("mode_product: matrix has " + std::to_string(M.cols()) +
                              " columns, tensor extent at mode " + std::to_string(mode) + " is " +
                              std::to_string(t.extent(mode)));
    }
    Shape shape = t.shape();
    shape[static_cast<std::size_t>(mode)] = M.rows();
    return fold(M * unfold(t, mode), mode, shape);
}

inline DenseTensor subtract(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape() != b.shape()) {
        throw InvalidArgument("subtract: shapes differ " + shape_string(a.shape()) + " vs " +
                              shape_string(b.shape()));
    }
    DenseTensor out(a.shape());
    for (Index n = 0; n < a.size(); ++n) out[n] = a[n] - b[n];
    return out;
}

inline double distance(const DenseTensor& a, const DenseTensor& b) { return subtract(a, b).norm(); }

// D x D x S x T kernel -> D^2 x S x T, spatial pair (i, j) -> i + j*D.
inline DenseTensor reshape_kernel(const DenseTensor& k4) {
    if (k4.order() != 4) {
        throw InvalidArgument("reshape_kernel expects an order-4 kernel, got shape " +
                              shape_string(k4.shape()));
    }
    const Index D = k4.extent(0);
    if (k4.extent(1) != D) throw InvalidArgument("reshape_kernel expects a square D x D kernel");
    const Index S = k4.extent(2), T = k4.extent(3);
    DenseTensor out({D * D, S, T});
    for (Index i = 0; i < D; ++i)
        for (Index j = 0; j < D; ++j)
            for (Index s = 0; s < S; ++s)
                for (Index t = 0; t < T; ++t) out(i + j * D, s, t) = k4(i, j, s, t);
    return out;
}

inline DenseTensor unreshape_kernel(const DenseTensor& k3, Index D) {
    if (k3.order() != 3 || k3.extent(0) != D * D) {
        throw InvalidArgument("unreshape_kernel: expected D^2 x S x T with D=" + std::to_string(D) +
                              ", got " + shape_string(k3.shape()));
    }
    const Index S = k3.extent(1), T = k3.extent(2);
    DenseTensor out({D, D, S, T});
    for (Index i = 0; i < D; ++i)
        for (Index j = 0; j < D; ++j)
            for (Index s = 0; s < S; ++s)
                for (Index t = 0; t < T; ++t) out(i, j, s, t) = k3(i + j * D, s, t);
    return out;
}

inline void require_order3(const DenseTensor& t, const char* who) {
    if (t.order() != 3) {
        throw InvalidArgument(std::string(who) + " expects an order-3 tensor, got shape " +
                              shape_string(t.shape()));
    }
}

}  // namespace stabletd
