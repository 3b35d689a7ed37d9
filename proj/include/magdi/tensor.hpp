#pragma once

// Dense row-major tensors of doubles with a define-by-run reverse-mode tape.
//
// Operations work on rank-1 and rank-2 tensors; a rank-1 tensor of length n
// is treated as a 1 x n row. Reductions return shape {1}.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "magdi/rng.hpp"

namespace magdi::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void throw_shape(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

class Tensor {
   public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        data_.assign(count(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) {
            throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        return Tensor({rows, cols}, std::vector<double>(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
    std::size_t cols() const {
        if (shape_.size() == 2) {
            return shape_[1];
        }
        return shape_.empty() ? 0 : shape_[0];
    }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1) {
            throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape_) + " is not a scalar");
        }
        return data_[0];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Tensor&) const = default;

   private:
    static std::size_t count(const Shape& s) {
        std::size_t n = 1;
        for (auto d : s) {
            n *= d;
        }
        return s.empty() ? 0 : n;
    }

    Shape shape_;
    std::vector<double> data_;
};

/// A trainable tensor together with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

/// Ordered, name-addressable collection of parameters with stable addresses.
class ParameterStore {
   public:
    Parameter& add(std::string name, Shape shape) {
        if (find(name) != nullptr) {
            throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
        }
        Tensor value(shape);
        Tensor grad(std::move(shape));
        params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad)});
        return params_.back();
    }

    Parameter* find(std::string_view name) {
        for (auto& p : params_) {
            if (p.name == name) {
                return &p;
            }
        }
        return nullptr;
    }
    const Parameter* find(std::string_view name) const {
        return const_cast<ParameterStore*>(this)->find(name);
    }

    Parameter& get(std::string_view name) {
        if (auto* p = find(name)) {
            return *p;
        }
        throw std::out_of_range("ParameterStore: no parameter '" + std::string(name) + "'");
    }
    const Parameter& get(std::string_view name) const { return const_cast<ParameterStore*>(this)->get(name); }

    void zero_grad() {
        for (auto& p : params_) {
            p.grad.fill(0.0);
        }
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            n += p.value.size();
        }
        return n;
    }

    std::vector<Parameter*> pointers() {
        std::vector<Parameter*> out;
        for (auto& p : params_) {
            out.push_back(&p);
        }
        return out;
    }

    std::size_t size() const { return params_.size(); }
    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

   private:
    std::deque<Parameter> params_;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
/// References returned by value() are invalidated by further recording.
class Var {
   public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

   private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Single-threaded record of primitive operations. backward() replays the
/// adjoints in reverse order, accumulates into Parameter::grad and frees the
/// recording.
class Tape {
   public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return entries_.size(); }

    Var constant(Tensor value) {
        entries_.push_back(Entry{std::move(value), nullptr, {}, nullptr, {}, false});
        return Var(this, entries_.size() - 1);
    }

    /// Non-owning constant; `value` must outlive the tape.
    Var view(const Tensor& value) {
        entries_.push_back(Entry{{}, &value, {}, nullptr, {}, false});
        return Var(this, entries_.size() - 1);
    }

    Var param(Parameter& p) {
        entries_.push_back(Entry{{}, &p.value, {}, &p, {}, record_});
        return Var(this, entries_.size() - 1);
    }

    Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var record(Tensor value, std::span<const Var> inputs, Backward fn) {
        bool needs = false;
        if (record_) {
            for (const Var& v : inputs) {
                check_owner(v);
                needs = needs || entries_[v.id()].needs_grad;
            }
        }
        entries_.push_back(Entry{std::move(value), nullptr, {}, nullptr, needs ? std::move(fn) : Backward{}, needs});
        return Var(this, entries_.size() - 1);
    }

    const Tensor& value(std::size_t id) const {
        const Entry& e = entries_[id];
        return e.ref ? *e.ref : e.owned;
    }

    bool needs_grad(std::size_t id) const { return entries_[id].needs_grad; }
    bool needs_grad(const Var& v) const { return entries_[v.id()].needs_grad; }

    /// Gradient buffer of an entry, allocated on first use.
    Tensor& grad(std::size_t id) {
        Entry& e = entries_[id];
        if (e.grad.size() != value(id).size()) {
            e.grad = Tensor(value(id).shape());
        }
        return e.grad;
    }

    void backward(const Var& loss) {
        check_owner(loss);
        if (loss.value().size() != 1) {
            throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
        }
        if (!record_) {
            throw std::logic_error("backward: tape was created without recording");
        }
        if (entries_[loss.id()].needs_grad) {
            grad(loss.id())[0] = 1.0;
            for (std::size_t i = loss.id() + 1; i-- > 0;) {
                Entry& e = entries_[i];
                if (!e.needs_grad || e.grad.empty()) {
                    continue;
                }
                if (e.param != nullptr) {
                    auto dst = e.param->grad.data();
                    auto src = e.grad.data();
                    for (std::size_t k = 0; k < src.size(); ++k) {
                        dst[k] += src[k];
                    }
                } else if (e.backward) {
                    e.backward(*this, i);
                }
            }
        }
        clear();
    }

    void clear() { entries_.clear(); }

    /// Parameters bound with param() since the last clear, in binding order.
    std::vector<const Parameter*> bound_parameters() const {
        std::vector<const Parameter*> out;
        for (const auto& e : entries_) {
            if (e.param != nullptr) {
                out.push_back(e.param);
            }
        }
        return out;
    }

   private:
    struct Entry {
        Tensor owned;
        const Tensor* ref;
        Tensor grad;
        Parameter* param;
        Backward backward;
        bool needs_grad;
    };

    void check_owner(const Var& v) const {
        if (v.tape_ != this || v.id_ >= entries_.size()) {
            throw std::logic_error("Tape: variable does not belong to this tape");
        }
    }

    std::vector<Entry> entries_;
    bool record_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

// C[k x n] (+)= A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

inline Shape mat(std::size_t r, std::size_t c) { return Shape{r, c}; }

inline void require_matrix(std::string_view op, const Tensor& t) {
    if (t.rank() < 1 || t.rank() > 2 || t.empty()) {
        throw ShapeError(std::string(op) + ": expected a non-empty rank-1 or rank-2 tensor, got " +
                         shape_str(t.shape()));
    }
}

enum class Broadcast { Same, Row, Scalar };

inline Broadcast broadcast_kind(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        return Broadcast::Same;
    }
    if (b.size() == 1) {
        return Broadcast::Scalar;
    }
    if (b.rows() == 1 && b.cols() == a.cols() && a.rank() == 2) {
        return Broadcast::Row;
    }
    throw_shape(op, a.shape(), b.shape());
}

inline std::size_t bindex(Broadcast kind, std::size_t i, std::size_t cols) {
    switch (kind) {
        case Broadcast::Same:
            return i;
        case Broadcast::Row:
            return i % cols;
        case Broadcast::Scalar:
            return 0;
    }
    return 0;
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = f(x[i]);
    }
    return a.tape().record(std::move(out), {a}, [a, df](Tape& t, std::size_t self) {
        const Tensor& x = t.value(a.id());
        const Tensor& y = t.value(self);
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < x.size(); ++i) {
            gx[i] += gy[i] * df(x[i], y[i]);
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// A[m x k] * B[k x n]
inline Var matmul(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    detail::require_matrix("matmul", x);
    detail::require_matrix("matmul", y);
    const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
    if (y.rows() != k) {
        throw_shape("matmul", x.shape(), y.shape());
    }
    Tensor out(detail::mat(m, n));
    detail::gemm_nn(x.ptr(), y.ptr(), out.ptr(), m, k, n);
    return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        if (t.needs_grad(a)) {
            detail::gemm_nt(gy.ptr(), t.value(b.id()).ptr(), t.grad(a.id()).ptr(), m, n, k);
        }
        if (t.needs_grad(b)) {
            detail::gemm_tn(t.value(a.id()).ptr(), gy.ptr(), t.grad(b.id()).ptr(), m, k, n);
        }
    });
}

/// A[m x k] * B[n x k]^T
inline Var matmul_nt(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    detail::require_matrix("matmul_nt", x);
    detail::require_matrix("matmul_nt", y);
    const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
    if (y.cols() != k) {
        throw_shape("matmul_nt", x.shape(), y.shape());
    }
    Tensor out(detail::mat(m, n));
    detail::gemm_nt(x.ptr(), y.ptr(), out.ptr(), m, k, n);
    return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        if (t.needs_grad(a)) {
            detail::gemm_nn(gy.ptr(), t.value(b.id()).ptr(), t.grad(a.id()).ptr(), m, n, k);
        }
        if (t.needs_grad(b)) {
            detail::gemm_tn(gy.ptr(), t.value(a.id()).ptr(), t.grad(b.id()).ptr(), m, n, k);
        }
    });
}

inline Var transpose(Var a) {
    const Tensor& x = a.value();
    detail::require_matrix("transpose", x);
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(detail::mat(c, r));
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = x[i * c + j];
        }
    }
    return a.tape().record(std::move(out), {a}, [a, r, c](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += gy[j * r + i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b; b may match a, be a 1 x cols row (broadcast over rows) or a scalar.
inline Var add(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const auto kind = detail::broadcast_kind("add", x, y);
    const std::size_t cols = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] + y[detail::bindex(kind, i, cols)];
    }
    return a.tape().record(std::move(out), {a, b}, [a, b, kind, cols](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad(a.id());
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i];
            }
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b.id());
            for (std::size_t i = 0; i < gy.size(); ++i) {
                gb[detail::bindex(kind, i, cols)] += gy[i];
            }
        }
    });
}

/// a - b with the same broadcasting rules as add().
inline Var sub(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const auto kind = detail::broadcast_kind("sub", x, y);
    const std::size_t cols = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] - y[detail::bindex(kind, i, cols)];
    }
    return a.tape().record(std::move(out), {a, b}, [a, b, kind, cols](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad(a.id());
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i];
            }
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b.id());
            for (std::size_t i = 0; i < gy.size(); ++i) {
                gb[detail::bindex(kind, i, cols)] -= gy[i];
            }
        }
    });
}

/// Elementwise product with the same broadcasting rules as add().
inline Var mul(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const auto kind = detail::broadcast_kind("mul", x, y);
    const std::size_t cols = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * y[detail::bindex(kind, i, cols)];
    }
    return a.tape().record(std::move(out), {a, b}, [a, b, kind, cols](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        const Tensor& x = t.value(a.id());
        const Tensor& y = t.value(b.id());
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad(a.id());
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i] * y[detail::bindex(kind, i, cols)];
            }
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad(b.id());
            for (std::size_t i = 0; i < gy.size(); ++i) {
                gb[detail::bindex(kind, i, cols)] += gy[i] * x[i];
            }
        }
    });
}

inline Var scale(Var a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var tanh(Var a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

/// Softmax along the last axis (each row independently).
inline Var softmax(Var a) {
    const Tensor& x = a.value();
    detail::require_matrix("softmax", x);
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x.ptr() + i * c;
        double* yr = out.ptr() + i * c;
        const double mx = *std::max_element(xr, xr + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            yr[j] /= z;
        }
    }
    return a.tape().record(std::move(out), {a}, [a, r, c](Tape& t, std::size_t self) {
        const Tensor& y = t.value(self);
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                dot += gy[i * c + j] * y[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot);
            }
        }
    });
}

/// log(softmax(x)) along the last axis, computed stably.
inline Var log_softmax(Var a) {
    const Tensor& x = a.value();
    detail::require_matrix("log_softmax", x);
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x.ptr() + i * c;
        const double mx = *std::max_element(xr, xr + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            z += std::exp(xr[j] - mx);
        }
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = xr[j] - lse;
        }
    }
    return a.tape().record(std::move(out), {a}, [a, r, c](Tape& t, std::size_t self) {
        const Tensor& y = t.value(self);
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < r; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                total += gy[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += gy[i * c + j] - std::exp(y[i * c + j]) * total;
            }
        }
    });
}

/// Sets entries above the diagonal of a square matrix to -inf.
inline Var causal_mask(Var a) {
    const Tensor& x = a.value();
    detail::require_matrix("causal_mask", x);
    const std::size_t n = x.rows();
    if (x.cols() != n) {
        throw ShapeError("causal_mask: expected a square matrix, got " + shape_str(x.shape()));
    }
    Tensor out = x;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            out[i * n + j] = -std::numeric_limits<double>::infinity();
        }
    }
    return a.tape().record(std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                gx[i * n + j] += gy[i * n + j];
            }
        }
    });
}

/// Row-wise layer normalization with learned gain and bias (each 1 x cols).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Tensor& xv = x.value();
    detail::require_matrix("layer_norm", xv);
    const std::size_t r = xv.rows(), c = xv.cols();
    if (gain.value().size() != c || bias.value().size() != c) {
        throw_shape("layer_norm", xv.shape(), gain.value().shape());
    }
    Tensor out(xv.shape());
    // Per-row normalized values and inverse std, saved for the adjoint.
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_std = std::make_shared<std::vector<double>>(r);
    const Tensor& g = gain.value();
    const Tensor& b = bias.value();
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = xv.ptr() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            mean += xr[j];
        }
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            var += (xr[j] - mean) * (xr[j] - mean);
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xr[j] - mean) * is;
            (*xhat)[i * c + j] = h;
            out[i * c + j] = h * g[j] + b[j];
        }
    }
    return x.tape().record(std::move(out), {x, gain, bias}, [x, gain, bias, r, c, xhat, inv_std](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        const Tensor& g = t.value(gain.id());
        if (t.needs_grad(gain) || t.needs_grad(bias)) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    if (t.needs_grad(gain)) {
                        t.grad(gain.id())[j] += gy[i * c + j] * (*xhat)[i * c + j];
                    }
                    if (t.needs_grad(bias)) {
                        t.grad(bias.id())[j] += gy[i * c + j];
                    }
                }
            }
        }
        if (t.needs_grad(x)) {
            Tensor& gx = t.grad(x.id());
            const double inv_c = 1.0 / static_cast<double>(c);
            for (std::size_t i = 0; i < r; ++i) {
                double sum_d = 0.0, sum_dh = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = gy[i * c + j] * g[j];
                    sum_d += d;
                    sum_dh += d * (*xhat)[i * c + j];
                }
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = gy[i * c + j] * g[j];
                    gx[i * c + j] += (*inv_std)[i] * (d - inv_c * sum_d - (*xhat)[i * c + j] * inv_c * sum_dh);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Indexing, pooling, reshaping

/// Rows of `table` selected by `ids` (embedding lookup). Repeated ids are allowed.
inline Var gather_rows(Var table, std::span<const int> ids) {
    const Tensor& tv = table.value();
    detail::require_matrix("gather_rows", tv);
    const std::size_t c = tv.cols();
    Tensor out(detail::mat(ids.size(), c));
    std::vector<int> saved(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
            throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range for table " +
                             shape_str(tv.shape()));
        }
        std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * c, c, out.ptr() + i * c);
    }
    return table.tape().record(std::move(out), {table}, [table, c, saved = std::move(saved)](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gt = t.grad(table.id());
        for (std::size_t i = 0; i < saved.size(); ++i) {
            double* dst = gt.ptr() + static_cast<std::size_t>(saved[i]) * c;
            const double* src = gy.ptr() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
                dst[j] += src[j];
            }
        }
    });
}

inline Var embedding(Var table, std::span<const int> ids) { return gather_rows(table, ids); }

/// Mean of the rows of `a` whose mask entry is nonzero; returns 1 x cols.
inline Var masked_mean_pool(Var a, std::span<const double> mask) {
    const Tensor& x = a.value();
    detail::require_matrix("masked_mean_pool", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (mask.size() != r) {
        throw_shape("masked_mean_pool", x.shape(), Shape{mask.size()});
    }
    std::vector<double> w(r, 0.0);
    double count = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (mask[i] != 0.0) {
            w[i] = 1.0;
            count += 1.0;
        }
    }
    if (count == 0.0) {
        throw std::invalid_argument("masked_mean_pool: mask selects no rows");
    }
    for (auto& v : w) {
        v /= count;
    }
    Tensor out(detail::mat(1, c));
    for (std::size_t i = 0; i < r; ++i) {
        if (w[i] == 0.0) {
            continue;
        }
        for (std::size_t j = 0; j < c; ++j) {
            out[j] += w[i] * x[i * c + j];
        }
    }
    return a.tape().record(std::move(out), {a}, [a, c, w = std::move(w)](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += w[i] * gy[j];
            }
        }
    });
}

/// Concatenate along rows (axis 0) or columns (axis 1).
inline Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) {
        throw std::invalid_argument("concat: no inputs");
    }
    if (axis != 0 && axis != 1) {
        throw std::invalid_argument("concat: axis must be 0 or 1");
    }
    const Tensor& first = parts[0].value();
    std::size_t rows = 0, cols = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        detail::require_matrix("concat", v);
        if (axis == 0) {
            if (v.cols() != first.cols()) {
                throw_shape("concat", first.shape(), v.shape());
            }
            rows += v.rows();
            cols = v.cols();
        } else {
            if (v.rows() != first.rows()) {
                throw_shape("concat", first.shape(), v.shape());
            }
            cols += v.cols();
            rows = v.rows();
        }
    }
    Tensor out(detail::mat(rows, cols));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        offsets.push_back(off);
        for (std::size_t i = 0; i < v.rows(); ++i) {
            for (std::size_t j = 0; j < v.cols(); ++j) {
                if (axis == 0) {
                    out[(off + i) * cols + j] = v[i * v.cols() + j];
                } else {
                    out[i * cols + off + j] = v[i * v.cols() + j];
                }
            }
        }
        off += axis == 0 ? v.rows() : v.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts[0].tape().record(
        std::move(out), inputs, [inputs, offsets, axis, cols](Tape& t, std::size_t self) {
            const Tensor& gy = t.grad(self);
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                if (!t.needs_grad(inputs[k])) {
                    continue;
                }
                Tensor& g = t.grad(inputs[k].id());
                const std::size_t r = g.rows(), c = g.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        g[i * c + j] += axis == 0 ? gy[(offsets[k] + i) * cols + j] : gy[i * cols + offsets[k] + j];
                    }
                }
            }
        });
}

inline Var concat(std::initializer_list<Var> parts, int axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Half-open range [begin, end) along rows (axis 0) or columns (axis 1).
inline Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    detail::require_matrix("slice", x);
    const std::size_t r = x.rows(), c = x.cols();
    const std::size_t extent = axis == 0 ? r : c;
    if ((axis != 0 && axis != 1) || begin >= end || end > extent) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    }
    const std::size_t orows = axis == 0 ? end - begin : r;
    const std::size_t ocols = axis == 1 ? end - begin : c;
    Tensor out(detail::mat(orows, ocols));
    const std::size_t r0 = axis == 0 ? begin : 0;
    const std::size_t c0 = axis == 1 ? begin : 0;
    for (std::size_t i = 0; i < orows; ++i) {
        std::copy_n(x.ptr() + (r0 + i) * c + c0, ocols, out.ptr() + i * ocols);
    }
    return a.tape().record(std::move(out), {a}, [a, r0, c0, orows, ocols, c](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < orows; ++i) {
            for (std::size_t j = 0; j < ocols; ++j) {
                gx[(r0 + i) * c + c0 + j] += gy[i * ocols + j];
            }
        }
    });
}

/// Picks a[i, cols[i]] for every row i; returns rows x 1.
inline Var pick(Var a, std::span<const int> cols) {
    const Tensor& x = a.value();
    detail::require_matrix("pick", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (cols.size() != r) {
        throw_shape("pick", x.shape(), Shape{cols.size()});
    }
    std::vector<int> saved(cols.begin(), cols.end());
    Tensor out(detail::mat(r, 1));
    for (std::size_t i = 0; i < r; ++i) {
        if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= c) {
            throw ShapeError("pick: column " + std::to_string(cols[i]) + " out of range for " + shape_str(x.shape()));
        }
        out[i] = x[i * c + static_cast<std::size_t>(cols[i])];
    }
    return a.tape().record(std::move(out), {a}, [a, c, saved = std::move(saved)](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(a.id());
        for (std::size_t i = 0; i < saved.size(); ++i) {
            gx[i * c + static_cast<std::size_t>(saved[i])] += gy[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
    const Tensor& x = a.value();
    double s = 0.0;
    for (double v : x.data()) {
        s += v;
    }
    return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (double& v : t.grad(a.id()).data()) {
            v += g;
        }
    });
}

inline Var mean(Var a) {
    const std::size_t n = a.value().size();
    if (n == 0) {
        throw ShapeError("mean: empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
    double epsilon = 1e-5;
    /// Coordinates probed per parameter; parameters at or below this size are probed exhaustively.
    std::size_t max_coords_per_param = 16;
    std::uint64_t seed = 0;
};

/// Compares backward() against central finite differences.
///
/// Returns the maximum over probed coordinates of
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double grad_check(const std::function<Var(Tape&)>& loss_fn, std::span<Parameter* const> params,
                         const GradCheckOptions& opts = {}) {
    if (!(opts.epsilon > 0.0)) {
        throw std::invalid_argument("grad_check: epsilon must be positive");
    }
    auto evaluate = [&]() {
        Tape tape(false);
        const double v = loss_fn(tape).value().item();
        if (!std::isfinite(v)) {
            throw std::domain_error("grad_check: non-finite loss value");
        }
        return v;
    };

    for (Parameter* p : params) {
        p->grad.fill(0.0);
    }
    {
        Tape tape;
        Var loss = loss_fn(tape);
        if (!std::isfinite(loss.value().item())) {
            throw std::domain_error("grad_check: non-finite loss value");
        }
        tape.backward(loss);
    }

    Rng rng(opts.seed);
    double worst = 0.0;
    for (Parameter* p : params) {
        const std::size_t n = p->value.size();
        std::vector<std::size_t> coords;
        if (n <= opts.max_coords_per_param) {
            for (std::size_t i = 0; i < n; ++i) {
                coords.push_back(i);
            }
        } else {
            for (std::size_t i = 0; i < opts.max_coords_per_param; ++i) {
                coords.push_back(rng.below(n));
            }
        }
        for (std::size_t i : coords) {
            const double orig = p->value[i];
            p->value[i] = orig + opts.epsilon;
            const double up = evaluate();
            p->value[i] = orig - opts.epsilon;
            const double down = evaluate();
            p->value[i] = orig;
            const double numeric = (up - down) / (2.0 * opts.epsilon);
            const double analytic = p->grad[i];
            if (!std::isfinite(analytic)) {
                throw std::domain_error("grad_check: non-finite analytic gradient in '" + p->name + "'");
            }
            const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace magdi::ad
