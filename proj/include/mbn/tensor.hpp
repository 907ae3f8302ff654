#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mbn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

// Dense row-major array of doubles. All statistics and gradients in this
// project flow through this type; operations return fresh tensors and never
// alias their inputs.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape_) +
                                        " does not match buffer of length " +
                                        std::to_string(data_.size()));
    }

    static Tensor full(Shape shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::initializer_list<std::size_t> idx) { return data_[flat_index(idx)]; }
    double at(std::initializer_list<std::size_t> idx) const { return data_[flat_index(idx)]; }

    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size())
            throw std::invalid_argument("Tensor::at: index rank mismatch");
        std::size_t flat = 0, axis = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[axis])
                throw std::invalid_argument("Tensor::at: index out of range on axis " +
                                            std::to_string(axis));
            flat = flat * shape_[axis] + i;
            ++axis;
        }
        return flat;
    }

    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != data_.size())
            throw std::invalid_argument("Tensor::reshaped: " + shape_str(new_shape) +
                                        " incompatible with numel " + std::to_string(data_.size()));
        return Tensor(std::move(new_shape), data_);
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

namespace detail {

// Right-aligned broadcast of two shapes, numpy semantics.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) +
                                        " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Maps a coordinate in the broadcast output to a flat index of an operand.
inline std::size_t operand_index(const Shape& out_shape, const std::vector<std::size_t>& coord,
                                 const Shape& op_shape) {
    const std::size_t offset = out_shape.size() - op_shape.size();
    std::size_t flat = 0;
    for (std::size_t i = 0; i < op_shape.size(); ++i) {
        const std::size_t c = op_shape[i] == 1 ? 0 : coord[i + offset];
        flat = flat * op_shape[i] + c;
    }
    return flat;
}

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F&& f) {
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(out_shape);
    std::vector<std::size_t> coord(out_shape.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(a[operand_index(out_shape, coord, a.shape())],
                   b[operand_index(out_shape, coord, b.shape())]);
        for (std::size_t axis = out_shape.size(); axis-- > 0;) {
            if (++coord[axis] < out_shape[axis]) break;
            coord[axis] = 0;
        }
    }
    return out;
}

}  // namespace detail

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    return detail::broadcast_binary(a, b, [](double x, double y) { return x + y; });
}
inline Tensor operator-(const Tensor& a, const Tensor& b) {
    return detail::broadcast_binary(a, b, [](double x, double y) { return x - y; });
}
inline Tensor operator*(const Tensor& a, const Tensor& b) {
    return detail::broadcast_binary(a, b, [](double x, double y) { return x * y; });
}
inline Tensor operator/(const Tensor& a, const Tensor& b) {
    return detail::broadcast_binary(a, b, [](double x, double y) { return x / y; });
}

inline Tensor operator*(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}
inline Tensor operator*(double s, const Tensor& a) { return a * s; }

inline Tensor operator+(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
    return out;
}

template <typename F>
Tensor map(const Tensor& x, F&& f) {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
    return out;
}

// out = x * scale + shift, scale/shift broadcast over x.
inline Tensor affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    return x * scale + shift;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expects rank-2 operands");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a[i * k + l];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[l * n + j];
        }
    return out;
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2d: expects rank-2 operand");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

namespace detail {

inline std::vector<std::size_t> checked_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
    if (axes.empty()) throw std::invalid_argument("reduce: axis set must be non-empty");
    std::vector<std::size_t> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (std::size_t a : sorted)
        if (a >= x.rank())
            throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                        " invalid for shape " + shape_str(x.shape()));
    return sorted;
}

struct ReducePlan {
    Shape out_shape;       // non-reduced extents, original order
    std::size_t count;     // elements per reduced slice
    std::vector<bool> reduced;
};

inline ReducePlan reduce_plan(const Tensor& x, const std::vector<std::size_t>& axes) {
    ReducePlan plan;
    plan.reduced.assign(x.rank(), false);
    for (std::size_t a : checked_axes(x, axes)) plan.reduced[a] = true;
    plan.count = 1;
    for (std::size_t i = 0; i < x.rank(); ++i) {
        if (plan.reduced[i])
            plan.count *= x.shape()[i];
        else
            plan.out_shape.push_back(x.shape()[i]);
    }
    if (plan.out_shape.empty()) plan.out_shape.push_back(1);
    return plan;
}

// Flat index into the reduced-output tensor for a coordinate of x.
inline std::size_t out_index(const Tensor& x, const ReducePlan& plan,
                             const std::vector<std::size_t>& coord) {
    std::size_t flat = 0, k = 0;
    for (std::size_t i = 0; i < x.rank(); ++i) {
        if (plan.reduced[i]) continue;
        flat = flat * plan.out_shape[k] + coord[i];
        ++k;
    }
    return flat;
}

template <typename Body>
void for_each_coord(const Tensor& x, Body&& body) {
    std::vector<std::size_t> coord(x.rank(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        body(i, coord);
        for (std::size_t axis = x.rank(); axis-- > 0;) {
            if (++coord[axis] < x.shape()[axis]) break;
            coord[axis] = 0;
        }
    }
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes) {
    const auto plan = detail::reduce_plan(x, axes);
    Tensor out(plan.out_shape);
    detail::for_each_coord(x, [&](std::size_t i, const std::vector<std::size_t>& coord) {
        out[detail::out_index(x, plan, coord)] += x[i];
    });
    return out;
}

// Per-slice mean and population variance (divisor = count, no Bessel
// correction) over the given axes. Two passes keep the variance exact for
// the pooled-equivalence identities downstream.
inline std::pair<Tensor, Tensor> reduce_moments(const Tensor& x,
                                                const std::vector<std::size_t>& axes) {
    const auto plan = detail::reduce_plan(x, axes);
    if (plan.count == 0)
        throw std::domain_error("reduce_moments: empty reduction slice for shape " +
                                shape_str(x.shape()));
    Tensor mean(plan.out_shape);
    detail::for_each_coord(x, [&](std::size_t i, const std::vector<std::size_t>& coord) {
        mean[detail::out_index(x, plan, coord)] += x[i];
    });
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] /= static_cast<double>(plan.count);

    Tensor var(plan.out_shape);
    detail::for_each_coord(x, [&](std::size_t i, const std::vector<std::size_t>& coord) {
        const double d = x[i] - mean[detail::out_index(x, plan, coord)];
        var[detail::out_index(x, plan, coord)] += d * d;
    });
    for (std::size_t i = 0; i < var.size(); ++i) var[i] /= static_cast<double>(plan.count);
    return {std::move(mean), std::move(var)};
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

inline bool all_finite(const Tensor& a) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!std::isfinite(a[i])) return false;
    return true;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.vec() == b.vec();
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw std::invalid_argument("max_rel_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-300});
        m = std::max(m, std::abs(a[i] - b[i]) / scale);
    }
    return m;
}

}  // namespace mbn
