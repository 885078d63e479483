#pragma once

// Dense f64 tensors with a reverse-mode gradient tape.
//
// The tape is define-by-run: constructing a Tape makes it the active tape for
// the current thread, every op whose inputs require gradients records a
// backward closure, and Tape::backward runs them in reverse topological
// order. Tensors are cheap value types; copies share the underlying buffer.
// Buffers produced by ops are treated as immutable; leaf (parameter) buffers
// may be mutated between tapes, e.g. by an optimizer step.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deskvis {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

[[noreturn]] inline void dim_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

class Tape;

namespace detail {
// Identity of a tensor on a tape. Shared between copies so that a parameter
// and its copies resolve to the same gradient slot.
struct GradHandle {
    std::uint64_t epoch = 0;
    std::size_t node = 0;
};
}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        size_ = shape_size(shape_);
        data_ = std::shared_ptr<double[]>(new double[size_]);
        std::fill_n(data_.get(), size_, fill);
    }

    // Allocation without initialization, for outputs that overwrite fully.
    static Tensor uninit(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.size_ = shape_size(t.shape_);
        t.data_ = std::shared_ptr<double[]>(new double[t.size_]);
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t = uninit(Shape{});
        t[0] = v;
        return t;
    }

    static Tensor from(Shape shape, const std::vector<double>& values) {
        if (shape_size(shape) != values.size())
            throw std::invalid_argument("Tensor::from: data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        Tensor t = uninit(std::move(shape));
        std::copy(values.begin(), values.end(), t.data());
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor{std::move(shape)}; }
    static Tensor full(Shape shape, double v) { return Tensor{std::move(shape), v}; }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t = uninit(std::move(shape));
        std::normal_distribution<double> d(0.0, stddev);
        for (std::size_t i = 0; i < t.size_; ++i) t[i] = d(rng);
        return t;
    }

    static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
        Tensor t = uninit(std::move(shape));
        std::uniform_real_distribution<double> d(lo, hi);
        for (std::size_t i = 0; i < t.size_; ++i) t[i] = d(rng);
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return size_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_.get(); }
    const double* data() const { return data_.get(); }

    double& operator[](std::size_t i) { return data_.get()[i]; }
    double operator[](std::size_t i) const { return data_.get()[i]; }

    double& at(std::size_t i, std::size_t j) { return data_.get()[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_.get()[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_.get()[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_.get()[(i * shape_[1] + j) * shape_[2] + k];
    }

    double value() const {
        if (size() != 1) throw std::logic_error("Tensor::value: tensor is not a scalar");
        return data_.get()[0];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool on = true) {
        requires_grad_ = on;
        // Allocate the tape identity now so copies taken later share it.
        if (on && !handle_) handle_ = std::make_shared<detail::GradHandle>();
        return *this;
    }

    // Same buffer, no gradient tracking, fresh identity.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.size_ = size_;
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t = uninit(shape_);
        std::copy_n(data_.get(), size_, t.data());
        return t;
    }

    bool all_finite() const {
        for (std::size_t i = 0; i < size_; ++i)
            if (!std::isfinite(data_.get()[i])) return false;
        return true;
    }

  private:
    friend class Tape;

    std::shared_ptr<detail::GradHandle>& handle_ref() const {
        if (!handle_) handle_ = std::make_shared<detail::GradHandle>();
        return handle_;
    }
    long data_use_count() const { return data_.use_count(); }

    Shape shape_;
    std::shared_ptr<double[]> data_;
    std::size_t size_ = 0;
    mutable std::shared_ptr<detail::GradHandle> handle_;
    bool requires_grad_ = false;
};

using BackwardFn = std::function<void(Tape&, const Tensor&)>;

class Tape {
  public:
    Tape() : epoch_(next_epoch()), prev_(tls_active_) { tls_active_ = this; }
    ~Tape() { tls_active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Null while no tape is active or while gradients are being propagated,
    // so ops called from backward closures run eagerly.
    static Tape* active() {
        Tape* t = tls_active_;
        return (t && t->recording_) ? t : nullptr;
    }

    // Node id of `t` on this tape, registering it as a leaf on first sight.
    // Tensors that do not require gradients are never tracked.
    int track(const Tensor& t) {
        if (!t.requires_grad()) return -1;
        auto& h = t.handle_ref();
        if (h->epoch != epoch_) {
            h->epoch = epoch_;
            h->node = nodes_.size();
            nodes_.push_back(Node{nullptr, t.shape()});
        }
        return static_cast<int>(h->node);
    }

    void record(Tensor& out, BackwardFn fn) {
        auto h = std::make_shared<detail::GradHandle>();
        h->epoch = epoch_;
        h->node = nodes_.size();
        out.handle_ref() = std::move(h);
        out.set_requires_grad(true);
        nodes_.push_back(Node{std::move(fn), out.shape()});
    }

    void accumulate(int node, Tensor g) {
        if (node < 0) return;
        auto& slot = grads_[static_cast<std::size_t>(node)];
        if (!slot.defined()) {
            if (g.shape() != nodes_[node].shape) dim_error("Tape::accumulate", g.shape(), nodes_[node].shape);
            slot = std::move(g);
            return;
        }
        // Gradient buffers can be shared with saved tensors; copy before +=.
        if (slot.data_use_count() > 1) slot = slot.clone();
        const double* src = g.data();
        double* dst = slot.data();
        for (std::size_t i = 0; i < slot.size(); ++i) dst[i] += src[i];
    }

    // Uniquely-owned gradient buffer of `node` for in-place accumulation;
    // avoids a temporary per contribution on the hot backward paths.
    Tensor* grad_buffer(int node) {
        if (node < 0) return nullptr;
        auto& slot = grads_[static_cast<std::size_t>(node)];
        if (!slot.defined())
            slot = Tensor::zeros(nodes_[node].shape);
        else if (slot.data_use_count() > 1)
            slot = slot.clone();
        return &slot;
    }

    // Like grad_buffer, but a newly created buffer stays uninitialized and
    // `fresh` is set; the caller must then overwrite every element instead of
    // accumulating. Only for closures that write the full buffer.
    Tensor* grad_buffer_raw(int node, bool* fresh) {
        *fresh = false;
        if (node < 0) return nullptr;
        auto& slot = grads_[static_cast<std::size_t>(node)];
        if (!slot.defined()) {
            slot = Tensor::uninit(nodes_[node].shape);
            *fresh = true;
        } else if (slot.data_use_count() > 1) {
            slot = slot.clone();
        }
        return &slot;
    }

    void backward(const Tensor& loss) {
        if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar tensor");
        if (!loss.requires_grad() || !loss.handle_ || loss.handle_->epoch != epoch_)
            throw std::invalid_argument("backward: loss is not recorded on the active tape");
        const std::size_t start = loss.handle_->node;

        grads_.assign(nodes_.size(), Tensor{});
        Tensor seed{loss.shape()};
        seed[0] = 1.0;
        grads_[start] = std::move(seed);

        recording_ = false;
        for (std::size_t i = start + 1; i-- > 0;) {
            if (!grads_[i].defined() || !nodes_[i].backward) continue;
            nodes_[i].backward(*this, grads_[i]);
        }
        recording_ = true;
    }

    // Gradient of `t` after backward; zeros if `t` never received one.
    Tensor grad(const Tensor& t) const {
        if (t.handle_ && t.handle_->epoch == epoch_ && t.handle_->node < grads_.size()) {
            const Tensor& g = grads_[t.handle_->node];
            if (g.defined()) return g;
        }
        return Tensor::zeros(t.shape());
    }

    std::size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        BackwardFn backward;  // null for leaves
        Shape shape;
    };

    static std::uint64_t next_epoch() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::uint64_t epoch_;
    bool recording_ = true;
    Tape* prev_;
    inline static thread_local Tape* tls_active_ = nullptr;
};

// ---------------------------------------------------------------------------
// gemm plumbing (Eigen behind the op surface)

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C[m,n] = (or +=) A op(B) with optional transposes; A is m x k (or k x m if ta).
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, bool acc = false) {
    ECMap A(a, ta ? k : m, ta ? m : k);
    ECMap B(b, tb ? n : k, tb ? k : n);
    EMap C(c, m, n);
    if (!ta && !tb)
        acc ? void(C.noalias() += A * B) : void(C.noalias() = A * B);
    else if (!ta && tb)
        acc ? void(C.noalias() += A * B.transpose()) : void(C.noalias() = A * B.transpose());
    else if (ta && !tb)
        acc ? void(C.noalias() += A.transpose() * B) : void(C.noalias() = A.transpose() * B);
    else
        acc ? void(C.noalias() += A.transpose() * B.transpose())
            : void(C.noalias() = A.transpose() * B.transpose());
}

inline bool any_tracked(std::initializer_list<const Tensor*> ts) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape()) dim_error(name, a.shape(), b.shape());
    Tensor out = Tensor::uninit(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(pa[i], pb[i]);
    if (any_tracked({&a, &b})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a), ib = tp.track(b);
        Tensor sa = a, sb = b;
        tp.record(out, [ia, ib, sa, sb, bwd](Tape& t, const Tensor& g) {
            bool fresh;
            if (Tensor* ga = t.grad_buffer_raw(ia, &fresh)) {
                double* p = ga->data();
                if (fresh)
                    for (std::size_t i = 0; i < ga->size(); ++i) p[i] = g[i] * bwd(sa[i], sb[i], true);
                else
                    for (std::size_t i = 0; i < ga->size(); ++i) p[i] += g[i] * bwd(sa[i], sb[i], true);
            }
            if (Tensor* gb = t.grad_buffer_raw(ib, &fresh)) {
                double* p = gb->data();
                if (fresh)
                    for (std::size_t i = 0; i < gb->size(); ++i) p[i] = g[i] * bwd(sa[i], sb[i], false);
                else
                    for (std::size_t i = 0; i < gb->size(); ++i) p[i] += g[i] * bwd(sa[i], sb[i], false);
            }
        });
    }
    return out;
}

template <typename Fwd, typename Dfdx>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfdx dfdx) {
    Tensor out = Tensor::uninit(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
    if (any_tracked({&a})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a);
        Tensor sa = a;
        tp.record(out, [ia, sa, dfdx](Tape& t, const Tensor& g) {
            bool fresh;
            Tensor* ga = t.grad_buffer_raw(ia, &fresh);
            double* p = ga->data();
            if (fresh)
                for (std::size_t i = 0; i < ga->size(); ++i) p[i] = g[i] * dfdx(sa[i]);
            else
                for (std::size_t i = 0; i < ga->size(); ++i) p[i] += g[i] * dfdx(sa[i]);
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op("add", a, b, [](double x, double y) { return x + y; },
                             [](double, double, bool) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op("sub", a, b, [](double x, double y) { return x - y; },
                             [](double, double, bool wrt_a) { return wrt_a ? 1.0 : -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op("mul", a, b, [](double x, double y) { return x * y; },
                             [](double x, double y, bool wrt_a) { return wrt_a ? y : x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op("div", a, b, [](double x, double y) { return x / y; },
                             [](double x, double y, bool wrt_a) { return wrt_a ? 1.0 / y : -x / (y * y); });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
    // ties take the a-branch
    return detail::binary_op("minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
                             [](double x, double y, bool wrt_a) {
                                 return wrt_a ? (x <= y ? 1.0 : 0.0) : (x <= y ? 0.0 : 1.0);
                             });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::binary_op("maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
                             [](double x, double y, bool wrt_a) {
                                 return wrt_a ? (x >= y ? 1.0 : 0.0) : (x >= y ? 0.0 : 1.0);
                             });
}

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return -x; }, [](double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                            [](double x) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::fabs(x); },
                            [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Tensor sigmoid(const Tensor& a) {
    auto sig = [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
    return detail::unary_op(a, sig, [sig](double x) {
        const double s = sig(x);
        return s * (1.0 - s);
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary_op(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    return detail::unary_op(a, [c](double x) { return x * c; }, [c](double) { return c; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul_scalar(a, 1.0 / c); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    Tensor out{Shape{}};
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    out[0] = s;
    if (detail::any_tracked({&a})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a);
        tp.record(out, [ia](Tape& t, const Tensor& g) {
            bool fresh;
            Tensor* ga = t.grad_buffer_raw(ia, &fresh);
            double* p = ga->data();
            if (fresh)
                for (std::size_t i = 0; i < ga->size(); ++i) p[i] = g[0];
            else
                for (std::size_t i = 0; i < ga->size(); ++i) p[i] += g[0];
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return sum(a) * (1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) dim_error("reshape", a.shape(), shape);
    Tensor out = Tensor::uninit(std::move(shape));
    std::copy_n(a.data(), a.size(), out.data());
    if (detail::any_tracked({&a})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a);
        const Shape sh = a.shape();
        tp.record(out, [ia, sh](Tape& t, const Tensor& g) {
            bool fresh;
            Tensor* ga = t.grad_buffer_raw(ia, &fresh);
            double* p = ga->data();
            if (fresh)
                std::copy_n(g.data(), ga->size(), p);
            else
                for (std::size_t i = 0; i < ga->size(); ++i) p[i] += g[i];
            (void)sh;
        });
    }
    return out;
}

// out[i] = src[idx[i]]; idx entry -1 reads as 0.0 (used for zero padding).
inline Tensor gather(const Tensor& src, std::shared_ptr<const std::vector<std::int64_t>> idx, Shape out_shape) {
    if (shape_size(out_shape) != idx->size())
        throw std::invalid_argument("gather: index count does not match output shape");
    Tensor out = Tensor::uninit(std::move(out_shape));
    const double* ps = src.data();
    double* po = out.data();
    const auto& ix = *idx;
    for (std::size_t i = 0; i < ix.size(); ++i) po[i] = ix[i] < 0 ? 0.0 : ps[ix[i]];
    if (detail::any_tracked({&src})) {
        Tape& tp = *Tape::active();
        const int is = tp.track(src);
        const Shape src_shape = src.shape();
        tp.record(out, [is, idx, src_shape](Tape& t, const Tensor& g) {
            Tensor* gs = t.grad_buffer(is);
            double* pg = gs->data();
            const auto& ix2 = *idx;
            for (std::size_t i = 0; i < ix2.size(); ++i)
                if (ix2[i] >= 0) pg[ix2[i]] += g[i];
            (void)src_shape;
        });
    }
    return out;
}

inline Tensor gather(const Tensor& src, std::vector<std::int64_t> idx, Shape out_shape) {
    return gather(src, std::make_shared<const std::vector<std::int64_t>>(std::move(idx)), std::move(out_shape));
}

// Rows [off, off+n) of a 2-D tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t off, std::size_t n) {
    if (a.rank() != 2 || off + n > a.dim(0)) throw std::invalid_argument("slice_rows: bad range");
    const std::size_t c = a.dim(1);
    std::vector<std::int64_t> idx(n * c);
    for (std::size_t i = 0; i < n * c; ++i) idx[i] = static_cast<std::int64_t>(off * c + i);
    return gather(a, std::move(idx), Shape{n, c});
}

inline Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
    if (a.rank() != 2) throw std::invalid_argument("take_rows: rank-2 tensor required");
    const std::size_t c = a.dim(1);
    std::vector<std::int64_t> idx;
    idx.reserve(rows.size() * c);
    for (std::size_t r : rows)
        for (std::size_t j = 0; j < c; ++j) idx.push_back(static_cast<std::int64_t>(r * c + j));
    return gather(a, std::move(idx), Shape{rows.size(), c});
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
    const std::size_t n = a.dim(0), m = a.dim(1);
    std::vector<std::int64_t> idx(n * m);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n; ++i) idx[j * n + i] = static_cast<std::int64_t>(i * m + j);
    return gather(a, std::move(idx), Shape{m, n});
}

// Concatenate 2-D tensors along axis 0 (rows) or 1 (cols).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    for (const Tensor& p : parts)
        if (p.rank() != 2) throw std::invalid_argument("concat: rank-2 tensors required");

    std::size_t rows = parts[0].dim(0), cols = parts[0].dim(1);
    if (axis == 0) {
        rows = 0;
        for (const Tensor& p : parts) {
            if (p.dim(1) != cols) dim_error("concat", p.shape(), parts[0].shape());
            rows += p.dim(0);
        }
    } else {
        cols = 0;
        for (const Tensor& p : parts) {
            if (p.dim(0) != rows) dim_error("concat", p.shape(), parts[0].shape());
            cols += p.dim(1);
        }
    }

    Tensor out = Tensor::uninit(Shape{rows, cols});
    std::vector<std::size_t> offsets(parts.size());
    if (axis == 0) {
        std::size_t r0 = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            offsets[k] = r0;
            std::memcpy(out.data() + r0 * cols, parts[k].data(), parts[k].size() * sizeof(double));
            r0 += parts[k].dim(0);
        }
    } else {
        std::size_t c0 = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            offsets[k] = c0;
            for (std::size_t i = 0; i < rows; ++i)
                std::memcpy(out.data() + i * cols + c0, parts[k].data() + i * parts[k].dim(1),
                            parts[k].dim(1) * sizeof(double));
            c0 += parts[k].dim(1);
        }
    }

    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
    if (Tape::active() && tracked) {
        Tape& tp = *Tape::active();
        std::vector<int> ids(parts.size());
        std::vector<Shape> shapes(parts.size());
        for (std::size_t k = 0; k < parts.size(); ++k) {
            ids[k] = tp.track(parts[k]);
            shapes[k] = parts[k].shape();
        }
        tp.record(out, [ids, shapes, offsets, axis, cols](Tape& t, const Tensor& g) {
            for (std::size_t k = 0; k < ids.size(); ++k) {
                Tensor* gk = t.grad_buffer(ids[k]);
                if (!gk) continue;
                const std::size_t pr = shapes[k][0], pc = shapes[k][1];
                double* p = gk->data();
                if (axis == 0) {
                    const double* src = g.data() + offsets[k] * cols;
                    for (std::size_t i = 0; i < pr * pc; ++i) p[i] += src[i];
                } else {
                    for (std::size_t i = 0; i < pr; ++i)
                        for (std::size_t j = 0; j < pc; ++j) p[i * pc + j] += g[i * cols + offsets[k] + j];
                }
            }
        });
    }
    return out;
}

inline Tensor repeat_rows(const Tensor& a, std::size_t k) {
    if (a.rank() != 2) throw std::invalid_argument("repeat_rows: rank-2 tensor required");
    const std::size_t n = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::uninit(Shape{n * k, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < k; ++r)
            std::memcpy(out.data() + (i * k + r) * c, a.data() + i * c, c * sizeof(double));
    if (detail::any_tracked({&a})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a);
        tp.record(out, [ia, n, c, k](Tape& t, const Tensor& g) {
            Tensor* ga = t.grad_buffer(ia);
            double* p = ga->data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t r = 0; r < k; ++r)
                    for (std::size_t j = 0; j < c; ++j) p[i * c + j] += g[(i * k + r) * c + j];
        });
    }
    return out;
}

// [n*k, c] -> [n, c], summing each block of k consecutive rows.
inline Tensor sum_row_groups(const Tensor& a, std::size_t k) {
    if (a.rank() != 2 || k == 0 || a.dim(0) % k != 0)
        throw std::invalid_argument("sum_row_groups: rows not divisible by group size");
    const std::size_t n = a.dim(0) / k, c = a.dim(1);
    Tensor out{Shape{n, c}};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < k; ++r)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] += a[(i * k + r) * c + j];
    if (detail::any_tracked({&a})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a);
        tp.record(out, [ia, n, c, k](Tape& t, const Tensor& g) {
            bool fresh;
            Tensor* ga = t.grad_buffer_raw(ia, &fresh);
            double* p = ga->data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t r = 0; r < k; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                        if (fresh)
                            p[(i * k + r) * c + j] = g[i * c + j];
                        else
                            p[(i * k + r) * c + j] += g[i * c + j];
                    }
        });
    }
    return out;
}

// Variable-length row segments: x [sum(sizes), c] -> [sizes.size(), c], row i
// summing its segment; empty segments yield zero rows.
inline Tensor segment_sum_rows(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> sizes) {
    if (x.rank() != 2) throw std::invalid_argument("segment_sum_rows: rank-2 tensor required");
    const std::size_t c = x.dim(1), n = sizes->size();
    std::size_t total = 0;
    for (std::size_t k : *sizes) total += k;
    if (total != x.dim(0)) throw std::invalid_argument("segment_sum_rows: segment sizes do not cover rows");

    Tensor out{Shape{n, c}};
    std::size_t row = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < (*sizes)[i]; ++r, ++row)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x[row * c + j];
    }
    if (detail::any_tracked({&x})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(x);
        tp.record(out, [ia, sizes, n, c](Tape& t, const Tensor& g) {
            bool fresh;
            Tensor* ga = t.grad_buffer_raw(ia, &fresh);
            double* p = ga->data();
            std::size_t row = 0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t r = 0; r < (*sizes)[i]; ++r, ++row)
                    for (std::size_t j = 0; j < c; ++j) {
                        if (fresh)
                            p[row * c + j] = g[i * c + j];
                        else
                            p[row * c + j] += g[i * c + j];
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row/column broadcasting helpers (the only broadcasting we support)

inline Tensor scale_rows(const Tensor& a, const Tensor& s) {
    if (a.rank() != 2 || s.size() != a.dim(0)) dim_error("scale_rows", a.shape(), s.shape());
    const std::size_t n = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::uninit(a.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * s[i];
    if (detail::any_tracked({&a, &s})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a), is = tp.track(s);
        Tensor sa = a, ss = s;
        tp.record(out, [ia, is, sa, ss, n, c](Tape& t, const Tensor& g) {
            bool fresh;
            if (Tensor* ga = t.grad_buffer_raw(ia, &fresh)) {
                double* p = ga->data();
                if (fresh)
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j) p[i * c + j] = g[i * c + j] * ss[i];
                else
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j) p[i * c + j] += g[i * c + j] * ss[i];
            }
            if (Tensor* gs = t.grad_buffer_raw(is, &fresh)) {
                double* p = gs->data();
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * sa[i * c + j];
                    if (fresh)
                        p[i] = acc;
                    else
                        p[i] += acc;
                }
            }
        });
    }
    return out;
}

inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.rank() != 2 || v.size() != a.dim(1)) dim_error("add_rowvec", a.shape(), v.shape());
    const std::size_t n = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::uninit(a.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] + v[j];
    if (detail::any_tracked({&a, &v})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a), iv = tp.track(v);
        const Shape vs = v.shape();
        tp.record(out, [ia, iv, n, c, vs](Tape& t, const Tensor& g) {
            if (Tensor* ga = t.grad_buffer(ia)) {
                double* p = ga->data();
                for (std::size_t i = 0; i < ga->size(); ++i) p[i] += g[i];
            }
            if (Tensor* gv = t.grad_buffer(iv)) {
                double* p = gv->data();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j) p[j] += g[i * c + j];
            }
            (void)vs;
        });
    }
    return out;
}

inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    if (a.rank() != 2 || v.size() != a.dim(1)) dim_error("mul_rowvec", a.shape(), v.shape());
    const std::size_t n = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::uninit(a.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * v[j];
    if (detail::any_tracked({&a, &v})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a), iv = tp.track(v);
        Tensor sa = a, sv = v;
        tp.record(out, [ia, iv, sa, sv, n, c](Tape& t, const Tensor& g) {
            if (Tensor* ga = t.grad_buffer(ia)) {
                double* p = ga->data();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j) p[i * c + j] += g[i * c + j] * sv[j];
            }
            if (Tensor* gv = t.grad_buffer(iv)) {
                double* p = gv->data();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j) p[j] += g[i * c + j] * sa[i * c + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) dim_error("matmul", a.shape(), b.shape());
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::uninit(Shape{m, n});
    detail::gemm(false, false, m, n, k, a.data(), b.data(), out.data());
    if (detail::any_tracked({&a, &b})) {
        Tape& tp = *Tape::active();
        const int ia = tp.track(a), ib = tp.track(b);
        Tensor sa = a, sb = b;
        tp.record(out, [ia, ib, sa, sb, m, k, n](Tape& t, const Tensor& g) {
            bool fresh;
            if (Tensor* ga = t.grad_buffer_raw(ia, &fresh))
                detail::gemm(false, true, m, k, n, g.data(), sb.data(), ga->data(), !fresh);
            if (Tensor* gb = t.grad_buffer_raw(ib, &fresh))
                detail::gemm(true, false, k, n, m, sa.data(), g.data(), gb->data(), !fresh);
        });
    }
    return out;
}

// y = x W^T + b over the flattened leading dimensions of x.
// x: [*, c_in], w: [c_out, c_in], b: [c_out] or undefined for no bias.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor{}) {
    if (x.rank() < 1 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(1)) dim_error("linear", x.shape(), w.shape());
    if (b.defined() && b.size() != w.dim(0)) dim_error("linear bias", b.shape(), w.shape());
    const std::size_t c_in = w.dim(1), c_out = w.dim(0);
    const std::size_t rows = x.size() / c_in;

    Shape out_shape(x.shape());
    out_shape.back() = c_out;
    Tensor out = Tensor::uninit(out_shape);
    detail::gemm(false, true, rows, c_out, c_in, x.data(), w.data(), out.data());
    if (b.defined()) {
        double* po = out.data();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < c_out; ++j) po[i * c_out + j] += b[j];
    }

    const bool has_bias = b.defined();
    if (detail::any_tracked({&x, &w, &b})) {
        Tape& tp = *Tape::active();
        const int ix = tp.track(x), iw = tp.track(w), ib = has_bias ? tp.track(b) : -1;
        Tensor sx = x, sw = w;
        const Shape xs = x.shape();
        tp.record(out, [ix, iw, ib, sx, sw, xs, rows, c_in, c_out](Tape& t, const Tensor& g) {
            bool fresh;
            if (Tensor* gx = t.grad_buffer_raw(ix, &fresh))
                detail::gemm(false, false, rows, c_in, c_out, g.data(), sw.data(), gx->data(), !fresh);
            if (Tensor* gw = t.grad_buffer_raw(iw, &fresh))
                detail::gemm(true, false, c_out, c_in, rows, g.data(), sx.data(), gw->data(), !fresh);
            if (Tensor* gb = t.grad_buffer(ib)) {
                double* p = gb->data();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < c_out; ++j) p[j] += g[i * c_out + j];
            }
            (void)xs;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                                      " out of range for shape " + shape_str(x.shape()));
    const std::size_t n = x.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor out = Tensor::uninit(x.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(x[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
        }
    }

    if (detail::any_tracked({&x})) {
        Tape& tp = *Tape::active();
        const int ix = tp.track(x);
        Tensor s = out;  // saved output
        tp.record(out, [ix, s, outer, n, inner](Tape& t, const Tensor& g) {
            Tensor* gx = t.grad_buffer(ix);
            double* p = gx->data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * s[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i)
                        p[base + i * inner] += s[base + i * inner] * (g[base + i * inner] - dot);
                }
            }
        });
    }
    return out;
}

// Normalizes over the last axis. gamma/beta: [c].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
    const std::size_t c = x.dim(x.rank() - 1);
    if (gamma.size() != c || beta.size() != c) dim_error("layer_norm", x.shape(), gamma.shape());
    const std::size_t rows = x.size() / c;

    Tensor out = Tensor::uninit(x.shape());
    Tensor xhat = Tensor::uninit(x.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* px = x.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += px[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (px[j] - mu) * is;
            xhat[i * c + j] = xh;
            out[i * c + j] = xh * gamma[j] + beta[j];
        }
    }

    if (detail::any_tracked({&x, &gamma, &beta})) {
        Tape& tp = *Tape::active();
        const int ix = tp.track(x), ig = tp.track(gamma), ib = tp.track(beta);
        Tensor sg = gamma;
        const Shape xs = x.shape(), ps = gamma.shape();
        tp.record(out, [ix, ig, ib, xhat, sg, inv_std, rows, c, xs, ps](Tape& t, const Tensor& g) {
            if (Tensor* gx = t.grad_buffer(ix)) {
                double* p = gx->data();
                for (std::size_t i = 0; i < rows; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = g[i * c + j] * sg[j];
                        m1 += d;
                        m2 += d * xhat[i * c + j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = g[i * c + j] * sg[j];
                        p[i * c + j] += inv_std[i] * (d - m1 - xhat[i * c + j] * m2);
                    }
                }
            }
            if (Tensor* gg = t.grad_buffer(ig)) {
                double* p = gg->data();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < c; ++j) p[j] += g[i * c + j] * xhat[i * c + j];
            }
            if (Tensor* gb = t.grad_buffer(ib)) {
                double* p = gb->data();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < c; ++j) p[j] += g[i * c + j];
            }
            (void)xs;
            (void)ps;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

// Softmax cross entropy with per-class weights, averaged by total target
// weight. targets are class indices per row.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                            const std::vector<double>& class_weights) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size())
        throw std::invalid_argument("cross_entropy: logits/targets mismatch");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (class_weights.size() != k) throw std::invalid_argument("cross_entropy: class weight count mismatch");

    Tensor probs = Tensor::uninit(logits.shape());
    double loss = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data() + i * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
        const double w = class_weights[targets[i]];
        loss += w * (lse - row[targets[i]]);
        wsum += w;
    }
    if (wsum == 0.0) wsum = 1.0;
    Tensor out = Tensor::scalar(loss / wsum);

    if (detail::any_tracked({&logits})) {
        Tape& tp = *Tape::active();
        const int il = tp.track(logits);
        auto tgt = std::make_shared<const std::vector<std::size_t>>(targets);
        auto cw = std::make_shared<const std::vector<double>>(class_weights);
        tp.record(out, [il, probs, tgt, cw, n, k, wsum](Tape& t, const Tensor& g) {
            Tensor gl{probs.shape()};
            for (std::size_t i = 0; i < n; ++i) {
                const double w = (*cw)[(*tgt)[i]] / wsum;
                for (std::size_t j = 0; j < k; ++j) {
                    double d = probs[i * k + j];
                    if (j == (*tgt)[i]) d -= 1.0;
                    gl[i * k + j] = g[0] * w * d;
                }
            }
            t.accumulate(il, std::move(gl));
        });
    }
    return out;
}

// Mean binary cross entropy on logits; targets in [0,1] are not differentiated.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape()) dim_error("bce_with_logits", logits.shape(), targets.shape());
    if (logits.size() == 0) throw std::invalid_argument("bce_with_logits: empty input");
    const std::size_t n = logits.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = logits[i], z = targets[i];
        loss += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::fabs(x)));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));

    if (detail::any_tracked({&logits})) {
        Tape& tp = *Tape::active();
        const int il = tp.track(logits);
        Tensor sx = logits, sz = targets;
        tp.record(out, [il, sx, sz, n](Tape& t, const Tensor& g) {
            Tensor gl{sx.shape()};
            for (std::size_t i = 0; i < n; ++i) {
                const double s = sx[i] >= 0 ? 1.0 / (1.0 + std::exp(-sx[i]))
                                            : std::exp(sx[i]) / (1.0 + std::exp(sx[i]));
                gl[i] = g[0] * (s - sz[i]) / static_cast<double>(n);
            }
            t.accumulate(il, std::move(gl));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bilinear sampling

// Counts bilinear lookups so the sampling complexity of attention kernels can
// be asserted from tests.
struct SampleCounter {
    static std::uint64_t& count() {
        static thread_local std::uint64_t c = 0;
        return c;
    }
    static void reset() { count() = 0; }
};

namespace detail {

// One bilinear read from row-major [h*w, c] values at (y, x), zero padding
// outside [0,h) x [0,w). Writes c values to out.
inline void bilinear_read(const double* values, std::size_t h, std::size_t w, std::size_t c,
                          double y, double x, double* out) {
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
    const double hy = 1.0 - ly, hx = 1.0 - lx;

    const bool y0_in = y0 >= 0 && y0 < static_cast<std::int64_t>(h);
    const bool y1_in = y0 + 1 >= 0 && y0 + 1 < static_cast<std::int64_t>(h);
    const bool x0_in = x0 >= 0 && x0 < static_cast<std::int64_t>(w);
    const bool x1_in = x0 + 1 >= 0 && x0 + 1 < static_cast<std::int64_t>(w);

    const double* r00 = (y0_in && x0_in) ? values + (y0 * w + x0) * c : nullptr;
    const double* r01 = (y0_in && x1_in) ? values + (y0 * w + x0 + 1) * c : nullptr;
    const double* r10 = (y1_in && x0_in) ? values + ((y0 + 1) * w + x0) * c : nullptr;
    const double* r11 = (y1_in && x1_in) ? values + ((y0 + 1) * w + x0 + 1) * c : nullptr;

    for (std::size_t j = 0; j < c; ++j) {
        double v = 0.0;
        if (r00) v += hy * hx * r00[j];
        if (r01) v += hy * lx * r01[j];
        if (r10) v += ly * hx * r10[j];
        if (r11) v += ly * lx * r11[j];
        out[j] = v;
    }
}

}  // namespace detail

// Samples `values` ([h*w, c] row-major grid) at fractional (y, x) points.
// points: [p, 2] rows of (y, x). Out-of-grid neighbors contribute zero.
// Differentiable in both the values and the point coordinates; at exact
// integer coordinates the coordinate gradient takes the floor-cell branch of
// the piecewise-linear interpolant.
inline Tensor bilinear_sample_rows(const Tensor& values, std::size_t h, std::size_t w,
                                   const Tensor& points) {
    if (values.rank() != 2 || values.dim(0) != h * w)
        throw std::invalid_argument("bilinear_sample_rows: values must be [h*w, c]");
    if (points.rank() != 2 || points.dim(1) != 2)
        throw std::invalid_argument("bilinear_sample_rows: points must be [p, 2]");
    const std::size_t c = values.dim(1), p = points.dim(0);

    Tensor out = Tensor::uninit(Shape{p, c});
    for (std::size_t i = 0; i < p; ++i)
        detail::bilinear_read(values.data(), h, w, c, points[2 * i], points[2 * i + 1], out.data() + i * c);
    SampleCounter::count() += p;

    if (detail::any_tracked({&values, &points})) {
        Tape& tp = *Tape::active();
        const int iv = tp.track(values), ip = tp.track(points);
        Tensor sv = values, sp = points;
        tp.record(out, [iv, ip, sv, sp, h, w, c, p](Tape& t, const Tensor& g) {
            Tensor* gvt = t.grad_buffer(iv);
            Tensor* gpt = t.grad_buffer(ip);
            double* gv = gvt ? gvt->data() : nullptr;
            const double* values = sv.data();
            for (std::size_t i = 0; i < p; ++i) {
                const double y = sp[2 * i], x = sp[2 * i + 1];
                const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
                const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
                const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
                const double hy = 1.0 - ly, hx = 1.0 - lx;
                const double* grow = g.data() + i * c;
                double gy = 0.0, gx = 0.0;
                // one pass per in-bounds corner keeps the channel loops tight
                auto corner = [&](std::int64_t yy, std::int64_t xx, double wv, double dy_sign_w,
                                  double dx_sign_w) {
                    if (yy < 0 || xx < 0 || yy >= static_cast<std::int64_t>(h) ||
                        xx >= static_cast<std::int64_t>(w))
                        return;
                    const std::size_t base = (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c;
                    const double* vrow = values + base;
                    if (gv) {
                        double* gvrow = gv + base;
                        for (std::size_t j = 0; j < c; ++j) {
                            const double go = grow[j];
                            gvrow[j] += go * wv;
                            gy += dy_sign_w * vrow[j] * go;
                            gx += dx_sign_w * vrow[j] * go;
                        }
                    } else {
                        for (std::size_t j = 0; j < c; ++j) {
                            const double go = grow[j];
                            gy += dy_sign_w * vrow[j] * go;
                            gx += dx_sign_w * vrow[j] * go;
                        }
                    }
                };
                corner(y0, x0, hy * hx, -hx, -hy);
                corner(y0, x0 + 1, hy * lx, -lx, hy);
                corner(y0 + 1, x0, ly * hx, hx, -ly);
                corner(y0 + 1, x0 + 1, ly * lx, lx, ly);
                if (gpt) {
                    (*gpt)[2 * i] += gy;
                    (*gpt)[2 * i + 1] += gx;
                }
            }
        });
    }
    return out;
}

// map: [c, h, w]; points: [p, 2] rows of (y, x). Returns [p, c].
inline Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
    if (map.rank() != 3) throw std::invalid_argument("bilinear_sample: map must be [c, h, w]");
    const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
    // reorder [c, h, w] -> [h*w, c] rows and reuse the row kernel
    std::vector<std::int64_t> idx(h * w * c);
    for (std::size_t pix = 0; pix < h * w; ++pix)
        for (std::size_t j = 0; j < c; ++j) idx[pix * c + j] = static_cast<std::int64_t>(j * h * w + pix);
    Tensor rows = gather(map, std::move(idx), Shape{h * w, c});
    return bilinear_sample_rows(rows, h, w, points);
}

// ---------------------------------------------------------------------------
// Non-differentiating utilities

inline Tensor softmax_values(const Tensor& x, std::size_t axis) {
    // plain forward pass, never recorded
    Tensor d = x.detach();
    return softmax(d, axis);
}

inline double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

inline double inverse_sigmoid(double p, double eps = 1e-6) {
    const double q = clamp(p, eps, 1.0 - eps);
    return std::log(q / (1.0 - q));
}

}  // namespace deskvis
