#pragma once

// Dense row-major tensors with reverse-mode gradients on an explicit tape.
//
// Design notes that the rest of the library relies on:
//  - Every kernel computes each output row from a fixed, row-local
//    accumulation order. A row's value never depends on how many other rows
//    are in the batch, which makes single-token and batched forwards
//    bit-identical. Tree-attention path equivalence and greedy losslessness
//    are exact because of this.
//  - Recording is explicit: ops push backward closures only while a
//    Graph::Scope is alive on this thread. Decode paths never open a scope
//    and pay nothing.
//  - Templated on the scalar type: float for training/inference, double for
//    gradient checks and oracle tests.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spdl/common.hpp"

namespace spdl {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) {
            throw ShapeError("negative dimension");
        }
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) {
            out += "x";
        }
    }
    return out + "]";
}

// Finite-value validation after each kernel. Off by default; tests and the
// invariant runner switch it on.
inline bool& checked_mode() {
    static bool enabled = false;
    return enabled;
}

template <typename T>
class Tensor {
    struct Payload {
        std::vector<T> data;
        std::vector<T> grad;  // lazily sized to data.size()
        bool requires_grad = false;
    };

public:
    Tensor() : p_(std::make_shared<Payload>()) {}

    explicit Tensor(Shape shape) : p_(std::make_shared<Payload>()), shape_(std::move(shape)) {
        p_->data.assign(shape_numel(shape_), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : p_(std::make_shared<Payload>()), shape_(std::move(shape)) {
        if ((int64_t)data.size() != shape_numel(shape_)) {
            throw ShapeError("data length does not match shape " + shape_str(shape_));
        }
        p_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data(), t.data() + t.numel(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({}, {value}); }

    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) {
            t.data()[i] = (T)rand_uniform(rng, (double)lo, (double)hi);
        }
        return t;
    }

    static Tensor normal(Shape shape, T mean, T stddev, Rng& rng) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) {
            t.data()[i] = (T)rand_normal(rng, (double)mean, (double)stddev);
        }
        return t;
    }

    // Identity with optional uniform noise, the "eyes and uniform(b)" shape
    // of the speculator init. rows may exceed cols (stacked blocks handle
    // themselves).
    static Tensor eye(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) {
            t.data()[(int64_t)i * n + i] = T(1);
        }
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return (int)shape_.size(); }
    int dim(int i) const { return shape_.at(i); }
    int64_t numel() const { return (int64_t)p_->data.size(); }
    // Rows/cols of the trailing matrix view: rows = numel / last_dim.
    int cols() const { return shape_.empty() ? 1 : shape_.back(); }
    int64_t rows() const { return shape_.empty() ? 1 : numel() / cols(); }

    T* data() { return p_->data.data(); }
    const T* data() const { return p_->data.data(); }
    T at(std::initializer_list<int> idx) const { return p_->data[offset(idx)]; }
    T& at(std::initializer_list<int> idx) { return p_->data[offset(idx)]; }

    T item() const {
        if (numel() != 1) {
            throw ArgumentError("item() requires a scalar tensor");
        }
        return p_->data[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool rg = true) {
        p_->requires_grad = rg;
        return *this;
    }

    // Gradient buffer, allocated zeroed on first touch.
    T* grad() {
        if (p_->grad.size() != p_->data.size()) {
            p_->grad.assign(p_->data.size(), T(0));
        }
        return p_->grad.data();
    }
    const std::vector<T>& grad_vec() { return (grad(), p_->grad); }
    void zero_grad() { p_->grad.assign(p_->data.size(), T(0)); }

    // Same payload, new shape. Gradients flow through for free because the
    // buffers are shared.
    Tensor reshape(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError("reshape changes element count");
        }
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    // Deep copy (data only, fresh grad).
    Tensor clone() const {
        Tensor t(shape_);
        t.p_->data = p_->data;
        t.p_->requires_grad = p_->requires_grad;
        return t;
    }

    bool same_payload(const Tensor& other) const { return p_ == other.p_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        for (int64_t i = 0; i < numel(); ++i) {
            t.data()[i] = (U)p_->data[i];
        }
        return t;
    }

private:
    int64_t offset(std::initializer_list<int> idx) const {
        if ((int)idx.size() != rank()) {
            throw ShapeError("index rank mismatch");
        }
        int64_t off = 0;
        int d = 0;
        for (int i : idx) {
            off = off * shape_[d] + i;
            ++d;
        }
        return off;
    }

    std::shared_ptr<Payload> p_;
    Shape shape_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
class Graph;

template <typename T>
inline thread_local Graph<T>* tl_active_graph = nullptr;

// Ordered record of executed ops. backward() replays the closures in exact
// reverse execution order; a tensor used N times receives N gradient
// contributions, summed in its grad buffer.
template <typename T>
class Graph {
public:
    struct Node {
        const char* op;
        Tensor<T> output;
        std::function<void()> backward;
    };

    // RAII activation. Ops record onto the innermost active graph of this
    // thread; nesting restores the previous one.
    class Scope {
    public:
        explicit Scope(Graph* g) : prev_(tl_active_graph<T>) { tl_active_graph<T> = g; }
        ~Scope() { tl_active_graph<T> = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Graph* prev_;
    };

    Scope record() { return Scope(this); }

    // Suppresses recording for the lifetime of the returned scope, whatever
    // graph is active. Decode paths hold one of these.
    static Scope pause() { return Scope(nullptr); }

    static Graph* active() { return tl_active_graph<T>; }

    void push(const char* op, Tensor<T> output, std::function<void()> fn) {
        nodes_.push_back({op, std::move(output), std::move(fn)});
    }

    size_t size() const { return nodes_.size(); }

    bool contains_op(std::string_view name) const {
        for (const auto& n : nodes_) {
            if (name == n.op) {
                return true;
            }
        }
        return false;
    }

    std::vector<std::string> op_names() const {
        std::vector<std::string> out;
        out.reserve(nodes_.size());
        for (const auto& n : nodes_) {
            out.emplace_back(n.op);
        }
        return out;
    }

    // Seeds d(loss)/d(loss) = 1 and walks the tape backwards. Intermediate
    // (op-output) grads are reset first; leaf grads accumulate across calls.
    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) {
            throw ArgumentError("backward requires a scalar loss");
        }
        for (auto& n : nodes_) {
            n.output.zero_grad();
        }
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->backward();
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!checked_mode()) {
        return;
    }
    const T* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite((double)d[i])) {
            throw NumericError(std::string("non-finite value in output of ") + op);
        }
    }
}

template <typename T>
bool want_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Graph<T>::active()) {
        return false;
    }
    for (const Tensor<T>* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

// c[i,:] += a[i,:] * b  with the k loop outermost per row: each output row is
// a fixed-order accumulation independent of every other row.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c[i,:] += a[i,:] * b^T  (b given as n x k, accessed row-wise).
template <typename T>
void matmul_acc_bt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

// c += a^T * b  (a is m x k, result k x n). Row p of c accumulates over i.
template <typename T>
void matmul_acc_at(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({(int)m, (int)n});
    detail::matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out, "matmul");
    if (detail::want_grad<T>({&a, &b})) {
        out.set_requires_grad();
        Tensor<T> ac = a, bc = b, oc = out;
        Graph<T>::active()->push("matmul", out, [ac, bc, oc, m, k, n]() mutable {
            if (ac.requires_grad()) {
                detail::matmul_acc_bt(oc.grad(), bc.data(), ac.grad(), m, n, k);
            }
            if (bc.requires_grad()) {
                detail::matmul_acc_at(ac.data(), oc.grad(), bc.grad(), m, k, n);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose requires rank 2");
    }
    const int m = a.dim(0), n = a.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out.data()[(int64_t)j * m + i] = a.data()[(int64_t)i * n + j];
        }
    }
    if (detail::want_grad<T>({&a})) {
        out.set_requires_grad();
        Tensor<T> ac = a, oc = out;
        Graph<T>::active()->push("transpose", out, [ac, oc, m, n]() mutable {
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    ac.grad()[(int64_t)i * n + j] += oc.grad()[(int64_t)j * m + i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch");
    }
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out.data()[i] = a.data()[i] + b.data()[i];
    }
    detail::check_finite(out, "add");
    if (detail::want_grad<T>({&a, &b})) {
        out.set_requires_grad();
        Tensor<T> ac = a, bc = b, oc = out;
        Graph<T>::active()->push("add", out, [ac, bc, oc]() mutable {
            const int64_t n = oc.numel();
            if (ac.requires_grad()) {
                for (int64_t i = 0; i < n; ++i) {
                    ac.grad()[i] += oc.grad()[i];
                }
            }
            if (bc.requires_grad()) {
                for (int64_t i = 0; i < n; ++i) {
                    bc.grad()[i] += oc.grad()[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("sub shape mismatch");
    }
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out.data()[i] = a.data()[i] - b.data()[i];
    }
    if (detail::want_grad<T>({&a, &b})) {
        out.set_requires_grad();
        Tensor<T> ac = a, bc = b, oc = out;
        Graph<T>::active()->push("sub", out, [ac, bc, oc]() mutable {
            const int64_t n = oc.numel();
            if (ac.requires_grad()) {
                for (int64_t i = 0; i < n; ++i) {
                    ac.grad()[i] += oc.grad()[i];
                }
            }
            if (bc.requires_grad()) {
                for (int64_t i = 0; i < n; ++i) {
                    bc.grad()[i] -= oc.grad()[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul shape mismatch");
    }
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out.data()[i] = a.data()[i] * b.data()[i];
    }
    detail::check_finite(out, "mul");
    if (detail::want_grad<T>({&a, &b})) {
        out.set_requires_grad();
        Tensor<T> ac = a, bc = b, oc = out;
        Graph<T>::active()->push("mul", out, [ac, bc, oc]() mutable {
            const int64_t n = oc.numel();
            if (ac.requires_grad()) {
                for (int64_t i = 0; i < n; ++i) {
                    ac.grad()[i] += oc.grad()[i] * bc.data()[i];
                }
            }
            if (bc.requires_grad()) {
                for (int64_t i = 0; i < n; ++i) {
                    bc.grad()[i] += oc.grad()[i] * ac.data()[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out.data()[i] = a.data()[i] * c;
    }
    if (detail::want_grad<T>({&a})) {
        out.set_requires_grad();
        Tensor<T> ac = a, oc = out;
        Graph<T>::active()->push("scale", out, [ac, oc, c]() mutable {
            for (int64_t i = 0; i < oc.numel(); ++i) {
                ac.grad()[i] += oc.grad()[i] * c;
            }
        });
    }
    return out;
}

// x [R x d] + bias [d] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (bias.rank() != 1 || x.cols() != bias.dim(0)) {
        throw ShapeError("add_bias dimension mismatch");
    }
    const int64_t r = x.rows(), d = x.cols();
    Tensor<T> out(x.shape());
    for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            out.data()[i * d + j] = x.data()[i * d + j] + bias.data()[j];
        }
    }
    if (detail::want_grad<T>({&x, &bias})) {
        out.set_requires_grad();
        Tensor<T> xc = x, bc = bias, oc = out;
        Graph<T>::active()->push("add_bias", out, [xc, bc, oc, r, d]() mutable {
            if (xc.requires_grad()) {
                for (int64_t i = 0; i < r * d; ++i) {
                    xc.grad()[i] += oc.grad()[i];
                }
            }
            if (bc.requires_grad()) {
                for (int64_t i = 0; i < r; ++i) {
                    for (int64_t j = 0; j < d; ++j) {
                        bc.grad()[j] += oc.grad()[i * d + j];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (int64_t i = 0; i < a.numel(); ++i) {
        acc += a.data()[i];
    }
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::want_grad<T>({&a})) {
        out.set_requires_grad();
        Tensor<T> ac = a, oc = out;
        Graph<T>::active()->push("sum", out, [ac, oc]() mutable {
            const T g = oc.grad()[0];
            for (int64_t i = 0; i < ac.numel(); ++i) {
                ac.grad()[i] += g;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / (T)a.numel());
}

// Per-row x / sqrt(mean(x^2) + eps) * w over the last dimension.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& w, T eps) {
    if (w.rank() != 1 || x.cols() != w.dim(0)) {
        throw ShapeError("rms_norm: weight must match last dim");
    }
    if (!(eps > T(0))) {
        throw ArgumentError("rms_norm: eps must be > 0");
    }
    const int64_t r = x.rows(), d = x.cols();
    Tensor<T> out(x.shape());
    std::vector<T> inv_rms((size_t)r);
    for (int64_t i = 0; i < r; ++i) {
        const T* xr = x.data() + i * d;
        T ss = T(0);
        for (int64_t j = 0; j < d; ++j) {
            ss += xr[j] * xr[j];
        }
        const T inv = T(1) / std::sqrt(ss / (T)d + eps);
        inv_rms[(size_t)i] = inv;
        T* orow = out.data() + i * d;
        for (int64_t j = 0; j < d; ++j) {
            orow[j] = xr[j] * inv * w.data()[j];
        }
    }
    detail::check_finite(out, "rms_norm");
    if (detail::want_grad<T>({&x, &w})) {
        out.set_requires_grad();
        Tensor<T> xc = x, wc = w, oc = out;
        Graph<T>::active()->push("rms_norm", out, [xc, wc, oc, inv_rms = std::move(inv_rms), r, d]() mutable {
            for (int64_t i = 0; i < r; ++i) {
                const T* xr = xc.data() + i * d;
                const T* go = oc.grad() + i * d;
                const T inv = inv_rms[(size_t)i];
                if (wc.requires_grad()) {
                    for (int64_t j = 0; j < d; ++j) {
                        wc.grad()[j] += go[j] * xr[j] * inv;
                    }
                }
                if (xc.requires_grad()) {
                    // y_j = x_j * inv * w_j, inv = (mean(x^2)+eps)^(-1/2)
                    // dy_j/dx_l = inv*w_j*[j==l] - x_j*w_j*inv^3*x_l/d
                    T dot = T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        dot += go[j] * wc.data()[j] * xr[j];
                    }
                    const T k = dot * inv * inv * inv / (T)d;
                    for (int64_t l = 0; l < d; ++l) {
                        xc.grad()[i * d + l] += go[l] * wc.data()[l] * inv - k * xr[l];
                    }
                }
            }
        });
    }
    return out;
}

// Row-wise stable softmax of x / temperature.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature) {
    if (!(temperature > T(0))) {
        throw ArgumentError("softmax: temperature must be > 0");
    }
    const int64_t r = x.rows(), d = x.cols();
    Tensor<T> out(x.shape());
    for (int64_t i = 0; i < r; ++i) {
        const T* xr = x.data() + i * d;
        T* orow = out.data() + i * d;
        T mx = xr[0];
        for (int64_t j = 1; j < d; ++j) {
            mx = std::max(mx, xr[j]);
        }
        // double accumulation keeps each row's sum within one rounding unit
        // of 1 regardless of width
        double denom = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            orow[j] = std::exp((xr[j] - mx) / temperature);
            denom += (double)orow[j];
        }
        for (int64_t j = 0; j < d; ++j) {
            orow[j] = (T)((double)orow[j] / denom);
        }
    }
    detail::check_finite(out, "softmax");
    if (detail::want_grad<T>({&x})) {
        out.set_requires_grad();
        Tensor<T> xc = x, oc = out;
        Graph<T>::active()->push("softmax", out, [xc, oc, r, d, temperature]() mutable {
            for (int64_t i = 0; i < r; ++i) {
                const T* p = oc.data() + i * d;
                const T* go = oc.grad() + i * d;
                T dot = T(0);
                for (int64_t j = 0; j < d; ++j) {
                    dot += go[j] * p[j];
                }
                for (int64_t j = 0; j < d; ++j) {
                    xc.grad()[i * d + j] += p[j] * (go[j] - dot) / temperature;
                }
            }
        });
    }
    return out;
}

// Softmax over scores [R x C] where row i may only see columns with
// visible(i, j) true. Invisible columns get exactly zero probability and are
// skipped in every accumulation, preserving bit-equality with a dense run
// over only the visible columns.
template <typename T, typename Visible>
Tensor<T> masked_softmax(const Tensor<T>& x, Visible&& visible) {
    const int64_t r = x.rows(), d = x.cols();
    Tensor<T> out(x.shape());
    for (int64_t i = 0; i < r; ++i) {
        const T* xr = x.data() + i * d;
        T* orow = out.data() + i * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < d; ++j) {
            if (visible(i, j)) {
                mx = std::max(mx, xr[j]);
            }
        }
        if (!std::isfinite((double)mx)) {
            throw ArgumentError("masked_softmax: row with no visible column");
        }
        // same accumulation scheme as the dense softmax, so a fully visible
        // row stays bit-identical to it
        double denom = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            if (visible(i, j)) {
                orow[j] = std::exp(xr[j] - mx);
                denom += (double)orow[j];
            } else {
                orow[j] = T(0);
            }
        }
        for (int64_t j = 0; j < d; ++j) {
            if (visible(i, j)) {
                orow[j] = (T)((double)orow[j] / denom);
            }
        }
    }
    detail::check_finite(out, "masked_softmax");
    if (detail::want_grad<T>({&x})) {
        out.set_requires_grad();
        Tensor<T> xc = x, oc = out;
        Graph<T>::active()->push("masked_softmax", out, [xc, oc, r, d]() mutable {
            // zero-prob columns contribute nothing; same formula as softmax
            for (int64_t i = 0; i < r; ++i) {
                const T* p = oc.data() + i * d;
                const T* go = oc.grad() + i * d;
                T dot = T(0);
                for (int64_t j = 0; j < d; ++j) {
                    dot += go[j] * p[j];
                }
                for (int64_t j = 0; j < d; ++j) {
                    xc.grad()[i * d + j] += p[j] * (go[j] - dot);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        out.data()[i] = v / (T(1) + std::exp(-v));
    }
    if (detail::want_grad<T>({&x})) {
        out.set_requires_grad();
        Tensor<T> xc = x, oc = out;
        Graph<T>::active()->push("silu", out, [xc, oc]() mutable {
            for (int64_t i = 0; i < xc.numel(); ++i) {
                const T v = xc.data()[i];
                const T s = T(1) / (T(1) + std::exp(-v));
                xc.grad()[i] += oc.grad()[i] * (s + v * s * (T(1) - s));
            }
        });
    }
    return out;
}

// Per-row cosine similarity between matching rows of q and k [h x dh] -> [h].
// The norm product carries a small additive guard so zero rows produce 0.
template <typename T>
inline constexpr T kCosineEps = T(1e-8);

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& q, const Tensor<T>& k) {
    if (q.shape() != k.shape() || q.rank() != 2) {
        throw ShapeError("cosine_similarity requires matching rank-2 shapes");
    }
    const int64_t h = q.dim(0), d = q.dim(1);
    Tensor<T> out({(int)h});
    std::vector<T> qn((size_t)h), kn((size_t)h);
    for (int64_t i = 0; i < h; ++i) {
        const T* qr = q.data() + i * d;
        const T* kr = k.data() + i * d;
        T dot = T(0), qq = T(0), kk = T(0);
        for (int64_t j = 0; j < d; ++j) {
            dot += qr[j] * kr[j];
            qq += qr[j] * qr[j];
            kk += kr[j] * kr[j];
        }
        qn[(size_t)i] = std::sqrt(qq);
        kn[(size_t)i] = std::sqrt(kk);
        out.data()[i] = dot / (qn[(size_t)i] * kn[(size_t)i] + kCosineEps<T>);
    }
    detail::check_finite(out, "cosine_similarity");
    if (detail::want_grad<T>({&q, &k})) {
        out.set_requires_grad();
        Tensor<T> qc = q, kc = k, oc = out;
        Graph<T>::active()->push("cosine_similarity", out,
                                 [qc, kc, oc, qn = std::move(qn), kn = std::move(kn), h, d]() mutable {
            for (int64_t i = 0; i < h; ++i) {
                const T g = oc.grad()[i];
                if (g == T(0)) {
                    continue;
                }
                const T* qr = qc.data() + i * d;
                const T* kr = kc.data() + i * d;
                const T s = oc.data()[i];
                const T denom = qn[(size_t)i] * kn[(size_t)i] + kCosineEps<T>;
                // d s / d q = k/denom - s * (kn/qn) * q / denom
                if (qc.requires_grad()) {
                    const T a = g / denom;
                    const T b = (qn[(size_t)i] > T(0)) ? g * s * kn[(size_t)i] / (qn[(size_t)i] * denom) : T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        qc.grad()[i * d + j] += a * kr[j] - b * qr[j];
                    }
                }
                if (kc.requires_grad()) {
                    const T a = g / denom;
                    const T b = (kn[(size_t)i] > T(0)) ? g * s * qn[(size_t)i] / (kn[(size_t)i] * denom) : T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        kc.grad()[i * d + j] += a * qr[j] - b * kr[j];
                    }
                }
            }
        });
    }
    return out;
}

// Scale row i of v [R x c] by s[i].
template <typename T>
Tensor<T> mul_rows(const Tensor<T>& v, const Tensor<T>& s) {
    if (s.rank() != 1 || v.rows() != s.dim(0)) {
        throw ShapeError("mul_rows: scale length must equal row count");
    }
    const int64_t r = v.rows(), c = v.cols();
    Tensor<T> out(v.shape());
    for (int64_t i = 0; i < r; ++i) {
        const T sv = s.data()[i];
        for (int64_t j = 0; j < c; ++j) {
            out.data()[i * c + j] = v.data()[i * c + j] * sv;
        }
    }
    if (detail::want_grad<T>({&v, &s})) {
        out.set_requires_grad();
        Tensor<T> vc = v, sc = s, oc = out;
        Graph<T>::active()->push("mul_rows", out, [vc, sc, oc, r, c]() mutable {
            for (int64_t i = 0; i < r; ++i) {
                if (vc.requires_grad()) {
                    const T sv = sc.data()[i];
                    for (int64_t j = 0; j < c; ++j) {
                        vc.grad()[i * c + j] += oc.grad()[i * c + j] * sv;
                    }
                }
                if (sc.requires_grad()) {
                    T acc = T(0);
                    for (int64_t j = 0; j < c; ++j) {
                        acc += oc.grad()[i * c + j] * vc.data()[i * c + j];
                    }
                    sc.grad()[i] += acc;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("concat_cols: row mismatch");
    }
    const int64_t r = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor<T> out({(int)r, (int)(ca + cb)});
    for (int64_t i = 0; i < r; ++i) {
        std::memcpy(out.data() + i * (ca + cb), a.data() + i * ca, sizeof(T) * (size_t)ca);
        std::memcpy(out.data() + i * (ca + cb) + ca, b.data() + i * cb, sizeof(T) * (size_t)cb);
    }
    if (detail::want_grad<T>({&a, &b})) {
        out.set_requires_grad();
        Tensor<T> ac = a, bc = b, oc = out;
        Graph<T>::active()->push("concat_cols", out, [ac, bc, oc, r, ca, cb]() mutable {
            for (int64_t i = 0; i < r; ++i) {
                if (ac.requires_grad()) {
                    for (int64_t j = 0; j < ca; ++j) {
                        ac.grad()[i * ca + j] += oc.grad()[i * (ca + cb) + j];
                    }
                }
                if (bc.requires_grad()) {
                    for (int64_t j = 0; j < cb; ++j) {
                        bc.grad()[i * cb + j] += oc.grad()[i * (ca + cb) + ca + j];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int from, int to) {
    if (from < 0 || to > x.cols() || from >= to) {
        throw ShapeError("slice_cols: bad range");
    }
    const int64_t r = x.rows(), c = x.cols(), w = to - from;
    Tensor<T> out({(int)r, (int)w});
    for (int64_t i = 0; i < r; ++i) {
        std::memcpy(out.data() + i * w, x.data() + i * c + from, sizeof(T) * (size_t)w);
    }
    if (detail::want_grad<T>({&x})) {
        out.set_requires_grad();
        Tensor<T> xc = x, oc = out;
        Graph<T>::active()->push("slice_cols", out, [xc, oc, r, c, w, from]() mutable {
            for (int64_t i = 0; i < r; ++i) {
                for (int64_t j = 0; j < w; ++j) {
                    xc.grad()[i * c + from + j] += oc.grad()[i * w + j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, const std::vector<int>& idx) {
    const int64_t c = x.cols();
    Tensor<T> out({(int)idx.size(), (int)c});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.rows()) {
            throw ArgumentError("select_rows: index out of range");
        }
        std::memcpy(out.data() + (int64_t)i * c, x.data() + (int64_t)idx[i] * c, sizeof(T) * (size_t)c);
    }
    if (detail::want_grad<T>({&x})) {
        out.set_requires_grad();
        Tensor<T> xc = x, oc = out;
        Graph<T>::active()->push("select_rows", out, [xc, oc, idx, c]() mutable {
            for (size_t i = 0; i < idx.size(); ++i) {
                for (int64_t j = 0; j < c; ++j) {
                    xc.grad()[(int64_t)idx[i] * c + j] += oc.grad()[(int64_t)i * c + j];
                }
            }
        });
    }
    return out;
}

// Gather rows of an embedding table [V x d] by token id.
template <typename T>
Tensor<T> embed_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embed_rows: table must be rank 2");
    }
    const int64_t v = table.dim(0), d = table.dim(1);
    Tensor<T> out({(int)ids.size(), (int)d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw DataError("embed_rows: token id out of vocabulary");
        }
        std::memcpy(out.data() + (int64_t)i * d, table.data() + (int64_t)ids[i] * d, sizeof(T) * (size_t)d);
    }
    if (detail::want_grad<T>({&table})) {
        out.set_requires_grad();
        Tensor<T> tc = table, oc = out;
        Graph<T>::active()->push("embed_rows", out, [tc, oc, ids, d]() mutable {
            for (size_t i = 0; i < ids.size(); ++i) {
                for (int64_t j = 0; j < d; ++j) {
                    tc.grad()[(int64_t)ids[i] * d + j] += oc.grad()[(int64_t)i * d + j];
                }
            }
        });
    }
    return out;
}

// Rotary position embedding, half-split convention, applied per head to
// x [R x d] at the given absolute position of each row. The inverse rotation
// in backward is exact (rotations are orthogonal).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<int>& positions, int n_heads, T theta) {
    const int64_t r = x.rows(), d = x.cols();
    if ((int64_t)positions.size() != r) {
        throw ShapeError("rope: one position per row required");
    }
    if (d % n_heads != 0 || (d / n_heads) % 2 != 0) {
        throw ShapeError("rope: head dim must be even");
    }
    const int64_t dh = d / n_heads, half = dh / 2;
    Tensor<T> out(x.shape());
    auto apply = [n_heads, dh, half, theta](const T* src, T* dst, int pos, T sign) {
        for (int64_t h = 0; h < n_heads; ++h) {
            const T* s = src + h * dh;
            T* o = dst + h * dh;
            for (int64_t j = 0; j < half; ++j) {
                const T freq = std::pow(theta, (T)(-2.0 * (double)j / (double)dh));
                const T ang = sign * (T)pos * freq;
                const T c = std::cos(ang), sn = std::sin(ang);
                const T a = s[j], b = s[j + half];
                o[j] = a * c - b * sn;
                o[j + half] = b * c + a * sn;
            }
        }
    };
    for (int64_t i = 0; i < r; ++i) {
        apply(x.data() + i * d, out.data() + i * d, positions[(size_t)i], T(1));
    }
    if (detail::want_grad<T>({&x})) {
        out.set_requires_grad();
        Tensor<T> xc = x, oc = out;
        Graph<T>::active()->push("rope", out, [xc, oc, positions, apply, r, d]() mutable {
            std::vector<T> tmp((size_t)d);
            for (int64_t i = 0; i < r; ++i) {
                apply(oc.grad() + i * d, tmp.data(), positions[(size_t)i], T(-1));
                for (int64_t j = 0; j < d; ++j) {
                    xc.grad()[i * d + j] += tmp[(size_t)j];
                }
            }
        });
    }
    return out;
}

// Mean-over-elements Huber distance. Quadratic within |delta| < beta
// (0.5 * delta^2 / beta, continuous at the threshold), linear outside.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a, const Tensor<T>& b, T beta = T(1)) {
    if (a.shape() != b.shape()) {
        throw ShapeError("smooth_l1 shape mismatch");
    }
    if (!(beta > T(0))) {
        throw ArgumentError("smooth_l1: beta must be > 0");
    }
    const int64_t n = a.numel();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T delta = a.data()[i] - b.data()[i];
        const T ad = std::abs(delta);
        acc += (ad < beta) ? T(0.5) * delta * delta / beta : ad - T(0.5) * beta;
    }
    Tensor<T> out = Tensor<T>::scalar(acc / (T)n);
    if (detail::want_grad<T>({&a, &b})) {
        out.set_requires_grad();
        Tensor<T> ac = a, bc = b, oc = out;
        Graph<T>::active()->push("smooth_l1", out, [ac, bc, oc, beta, n]() mutable {
            const T g = oc.grad()[0] / (T)n;
            for (int64_t i = 0; i < n; ++i) {
                const T delta = ac.data()[i] - bc.data()[i];
                const T d = (std::abs(delta) < beta) ? delta / beta : (delta > T(0) ? T(1) : T(-1));
                if (ac.requires_grad()) {
                    ac.grad()[i] += g * d;
                }
                if (bc.requires_grad()) {
                    bc.grad()[i] -= g * d;
                }
            }
        });
    }
    return out;
}

// Mean over rows of -sum_v p(v) * log softmax(q)(v). Teacher rows must be
// valid distributions; gradients flow to the logits only.
template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& p_teacher, const Tensor<T>& q_logits) {
    if (p_teacher.shape() != q_logits.shape()) {
        throw ShapeError("soft_cross_entropy shape mismatch");
    }
    const int64_t r = p_teacher.rows(), v = p_teacher.cols();
    for (int64_t i = 0; i < r; ++i) {
        // summed in double so wide rows are judged on their values, not on
        // accumulation error
        double s = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            s += (double)p_teacher.data()[i * v + j];
        }
        if (std::abs(s - 1.0) > 1e-6) {
            throw DataError("soft_cross_entropy: teacher row does not sum to 1");
        }
    }
    T acc = T(0);
    std::vector<T> softq((size_t)(r * v));
    for (int64_t i = 0; i < r; ++i) {
        const T* q = q_logits.data() + i * v;
        T mx = q[0];
        for (int64_t j = 1; j < v; ++j) {
            mx = std::max(mx, q[j]);
        }
        T denom = T(0);
        for (int64_t j = 0; j < v; ++j) {
            denom += std::exp(q[j] - mx);
        }
        const T lse = mx + std::log(denom);
        for (int64_t j = 0; j < v; ++j) {
            softq[(size_t)(i * v + j)] = std::exp(q[j] - lse);
            acc -= p_teacher.data()[i * v + j] * (q[j] - lse);
        }
    }
    Tensor<T> out = Tensor<T>::scalar(acc / (T)r);
    detail::check_finite(out, "soft_cross_entropy");
    if (detail::want_grad<T>({&q_logits})) {
        out.set_requires_grad();
        Tensor<T> pc = p_teacher, qc = q_logits, oc = out;
        Graph<T>::active()->push("soft_cross_entropy", out, [pc, qc, oc, softq = std::move(softq), r, v]() mutable {
            const T g = oc.grad()[0] / (T)r;
            for (int64_t i = 0; i < r; ++i) {
                for (int64_t j = 0; j < v; ++j) {
                    qc.grad()[i * v + j] += g * (softq[(size_t)(i * v + j)] - pc.data()[i * v + j]);
                }
            }
        });
    }
    return out;
}

// Mean over rows of -log softmax(logits)[target]; the language-model loss.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    const int64_t r = logits.rows(), v = logits.cols();
    if ((int64_t)targets.size() != r) {
        throw ShapeError("cross_entropy: one target per row required");
    }
    T acc = T(0);
    std::vector<T> softq((size_t)(r * v));
    for (int64_t i = 0; i < r; ++i) {
        if (targets[(size_t)i] < 0 || targets[(size_t)i] >= v) {
            throw DataError("cross_entropy: target out of range");
        }
        const T* q = logits.data() + i * v;
        T mx = q[0];
        for (int64_t j = 1; j < v; ++j) {
            mx = std::max(mx, q[j]);
        }
        T denom = T(0);
        for (int64_t j = 0; j < v; ++j) {
            denom += std::exp(q[j] - mx);
        }
        const T lse = mx + std::log(denom);
        for (int64_t j = 0; j < v; ++j) {
            softq[(size_t)(i * v + j)] = std::exp(q[j] - lse);
        }
        acc -= q[targets[(size_t)i]] - lse;
    }
    Tensor<T> out = Tensor<T>::scalar(acc / (T)r);
    detail::check_finite(out, "cross_entropy");
    if (detail::want_grad<T>({&logits})) {
        out.set_requires_grad();
        Tensor<T> qc = logits, oc = out;
        Graph<T>::active()->push("cross_entropy", out, [qc, oc, softq = std::move(softq), targets, r, v]() mutable {
            const T g = oc.grad()[0] / (T)r;
            for (int64_t i = 0; i < r; ++i) {
                for (int64_t j = 0; j < v; ++j) {
                    const T onehot = (j == targets[(size_t)i]) ? T(1) : T(0);
                    qc.grad()[i * v + j] += g * (softq[(size_t)(i * v + j)] - onehot);
                }
            }
        });
    }
    return out;
}

// Argmax with ties broken by lowest index; shared by target, speculator and
// verifier so tie behaviour is uniform.
template <typename T>
int argmax_row(const T* row, int64_t n) {
    int best = 0;
    for (int64_t j = 1; j < n; ++j) {
        if (row[j] > row[best]) {
            best = (int)j;
        }
    }
    return best;
}

}  // namespace spdl
