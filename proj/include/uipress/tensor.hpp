#pragma once

// Dense row-major arrays with a tape-based reverse-mode autodiff.
//
// Every op that sees at least one input with requires_grad (while grad mode
// is on) records a backward step on the calling thread's tape. `backward`
// replays that tape once in reverse order and clears it. Tapes, grad mode
// and the MAC counter are thread_local, so independent workers can evaluate
// separate samples concurrently against read-only parameters.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uipress/errors.hpp"

namespace uipress {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<TensorNode>()) {
        for (auto d : shape) {
            if (d == 0) {
                throw DimensionError("tensor: zero-sized dimension in shape " +
                                     detail::format_shape(shape));
            }
        }
        node_->value.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        set_requires_grad(requires_grad);
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: shape " + detail::format_shape(shape) + " needs " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        Tensor t(std::move(shape));
        t.node_->value = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_values({1}, {v}, requires_grad);
    }

    template <typename Rng>
    static Tensor normal(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.node_->value) {
            v = dist(rng);
        }
        t.set_requires_grad(requires_grad);
        return t;
    }

    template <typename Rng>
    static Tensor uniform(Shape shape, double bound, Rng& rng, bool requires_grad = false) {
        Tensor t(std::move(shape));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.node_->value) {
            v = dist(rng);
        }
        t.set_requires_grad(requires_grad);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<double> values() { return node_->value; }
    std::span<const double> values() const { return node_->value; }
    std::span<double> grads() { return node_->grad; }
    std::span<const double> grads() const { return node_->grad; }

    double item() const {
        if (numel() != 1) {
            throw DimensionError("item: tensor of shape " + detail::format_shape(shape()) +
                                 " is not a scalar");
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on) {
            node_->grad.assign(node_->value.size(), 0.0);
        } else {
            node_->grad.clear();
            node_->grad.shrink_to_fit();
        }
    }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    // Deep copy of the values, detached from any graph.
    Tensor clone(bool requires_grad = false) const {
        return from_values(shape(), node_->value, requires_grad);
    }

    // Sum of |grad|; zero when no gradient buffer exists.
    double grad_abs_sum() const {
        double s = 0.0;
        for (double g : node_->grad) {
            s += std::abs(g);
        }
        return s;
    }

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape and grad mode

class Tape {
public:
    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
    bool empty() const { return steps_.empty(); }
    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    void replay_reverse() {
        auto steps = std::move(steps_);
        steps_.clear();
        for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
            (*it)();
        }
    }

private:
    std::vector<std::function<void()>> steps_;
};

inline Tape& active_tape() {
    thread_local Tape tape;
    return tape;
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---------------------------------------------------------------------------
// Multiply-accumulate accounting, attributed to the bucket active at call time.

enum class MacBucket : std::size_t { other = 0, projection, attention, ffn, adapter, head, count };

struct MacCounts {
    std::array<std::uint64_t, static_cast<std::size_t>(MacBucket::count)> by_bucket{};

    std::uint64_t& operator[](MacBucket b) { return by_bucket[static_cast<std::size_t>(b)]; }
    std::uint64_t operator[](MacBucket b) const { return by_bucket[static_cast<std::size_t>(b)]; }
    std::uint64_t total() const {
        return std::accumulate(by_bucket.begin(), by_bucket.end(), std::uint64_t{0});
    }
};

inline MacCounts& mac_counts() {
    thread_local MacCounts counts;
    return counts;
}

inline MacBucket& mac_bucket() {
    thread_local MacBucket bucket = MacBucket::other;
    return bucket;
}

inline void count_macs(std::uint64_t n) { mac_counts()[mac_bucket()] += n; }
inline void reset_mac_counts() { mac_counts() = MacCounts{}; }

class MacBucketScope {
public:
    explicit MacBucketScope(MacBucket b) : previous_(mac_bucket()) { mac_bucket() = b; }
    ~MacBucketScope() { mac_bucket() = previous_; }
    MacBucketScope(const MacBucketScope&) = delete;
    MacBucketScope& operator=(const MacBucketScope&) = delete;

private:
    MacBucket previous_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline Tensor make_output(Shape shape, bool tracked) {
    Tensor out(std::move(shape));
    if (tracked) {
        out.set_requires_grad(true);
    }
    return out;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " but got shape " + format_shape(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + format_shape(a.shape()) +
                             " vs " + format_shape(b.shape()));
    }
}

// Raw pointers into node buffers; closures hold the shared_ptrs alive.
struct NodeRef {
    std::shared_ptr<TensorNode> node;
    explicit NodeRef(const Tensor& t) : node(t.node()) {}
    bool wants_grad() const { return node->requires_grad; }
    double* grad() { return node->grad.data(); }
    const double* value() const { return node->value.data(); }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    const bool tracked = detail::any_requires_grad({&a, &b});
    Tensor out = detail::make_output(a.shape(), tracked);
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = av[i] + bv[i];
    }
    if (tracked) {
        active_tape().record([ar = detail::NodeRef(a), br = detail::NodeRef(b),
                              orf = detail::NodeRef(out)]() mutable {
            const double* g = orf.grad();
            const std::size_t n = orf.node->value.size();
            if (ar.wants_grad()) {
                double* ga = ar.grad();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (br.wants_grad()) {
                double* gb = br.grad();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    const bool tracked = detail::any_requires_grad({&a, &b});
    Tensor out = detail::make_output(a.shape(), tracked);
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = av[i] * bv[i];
    }
    if (tracked) {
        active_tape().record([ar = detail::NodeRef(a), br = detail::NodeRef(b),
                              orf = detail::NodeRef(out)]() mutable {
            const double* g = orf.grad();
            const std::size_t n = orf.node->value.size();
            if (ar.wants_grad()) {
                double* ga = ar.grad();
                const double* bv = br.value();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
            }
            if (br.wants_grad()) {
                double* gb = br.grad();
                const double* av = ar.value();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    const bool tracked = detail::any_requires_grad({&a});
    Tensor out = detail::make_output(a.shape(), tracked);
    auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = av[i] * s;
    }
    if (tracked) {
        active_tape().record([ar = detail::NodeRef(a), orf = detail::NodeRef(out), s]() mutable {
            const double* g = orf.grad();
            double* ga = ar.grad();
            for (std::size_t i = 0; i < orf.node->value.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

// x[C x H x W] * m[1 x H x W], the map broadcast over channels.
inline Tensor mul_broadcast_channels(const Tensor& x, const Tensor& m) {
    detail::require_rank(x, 3, "mul_broadcast_channels");
    detail::require_rank(m, 3, "mul_broadcast_channels");
    if (m.dim(0) != 1 || m.dim(1) != x.dim(1) || m.dim(2) != x.dim(2)) {
        throw DimensionError("mul_broadcast_channels: map " + detail::format_shape(m.shape()) +
                             " does not match feature map " + detail::format_shape(x.shape()));
    }
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    const bool tracked = detail::any_requires_grad({&x, &m});
    Tensor out = detail::make_output(x.shape(), tracked);
    auto xv = x.values(), mv = m.values();
    auto ov = out.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < hw; ++i) {
            ov[ch * hw + i] = xv[ch * hw + i] * mv[i];
        }
    }
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), mr = detail::NodeRef(m),
                              orf = detail::NodeRef(out), c, hw]() mutable {
            const double* g = orf.grad();
            if (xr.wants_grad()) {
                double* gx = xr.grad();
                const double* mv = mr.value();
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += g[ch * hw + i] * mv[i];
            }
            if (mr.wants_grad()) {
                double* gm = mr.grad();
                const double* xv = xr.value();
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i) gm[i] += g[ch * hw + i] * xv[ch * hw + i];
            }
        });
    }
    return out;
}

inline constexpr double kGeluCoeff = 0.044715;

// tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
    static const double k = std::sqrt(2.0 / std::numbers::pi);
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output(x.shape(), tracked);
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const double v = xv[i];
        ov[i] = 0.5 * v * (1.0 + std::tanh(k * (v + kGeluCoeff * v * v * v)));
    }
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out)]() mutable {
            const double* g = orf.grad();
            const double* xv = xr.value();
            double* gx = xr.grad();
            for (std::size_t i = 0; i < orf.node->value.size(); ++i) {
                const double v = xv[i];
                const double t = std::tanh(k * (v + kGeluCoeff * v * v * v));
                const double dt = (1.0 - t * t) * k * (1.0 + 3.0 * kGeluCoeff * v * v);
                gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output({1}, tracked);
    double s = 0.0;
    for (double v : x.values()) {
        s += v;
    }
    out.values()[0] = s;
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out)]() mutable {
            const double g = orf.grad()[0];
            double* gx = xr.grad();
            for (std::size_t i = 0; i < xr.node->value.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + detail::format_shape(x.shape()) + " as " +
                             detail::format_shape(shape));
    }
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output(std::move(shape), tracked);
    std::copy(x.values().begin(), x.values().end(), out.values().begin());
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out)]() mutable {
            const double* g = orf.grad();
            double* gx = xr.grad();
            for (std::size_t i = 0; i < xr.node->value.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output({n, m}, tracked);
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out), m, n]() mutable {
            const double* g = orf.grad();
            double* gx = xr.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

// Stacks rank-2 blocks with a common column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw DimensionError("concat_rows: no inputs");
    }
    const std::size_t cols = parts.front().dim(1);
    std::size_t rows = 0;
    bool tracked = false;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_rows");
        if (p.dim(1) != cols) {
            throw DimensionError("concat_rows: column mismatch " +
                                 detail::format_shape(parts.front().shape()) + " vs " +
                                 detail::format_shape(p.shape()));
        }
        rows += p.dim(0);
        tracked = tracked || detail::any_requires_grad({&p});
    }
    Tensor out = detail::make_output({rows, cols}, tracked);
    auto ov = out.values();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), ov.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.numel();
    }
    if (tracked) {
        std::vector<detail::NodeRef> refs;
        refs.reserve(parts.size());
        for (const auto& p : parts) refs.emplace_back(p);
        active_tape().record([refs = std::move(refs), orf = detail::NodeRef(out)]() mutable {
            const double* g = orf.grad();
            std::size_t offset = 0;
            for (auto& r : refs) {
                const std::size_t n = r.node->value.size();
                if (r.wants_grad()) {
                    double* gp = r.grad();
                    for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
                }
                offset += n;
            }
        });
    }
    return out;
}

// Gathers rows of a rank-2 tensor (indices may repeat).
inline Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
    detail::require_rank(x, 2, "select_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    for (auto r : rows) {
        if (r >= n) {
            throw DimensionError("select_rows: row " + std::to_string(r) + " out of range for " +
                                 detail::format_shape(x.shape()));
        }
    }
    if (rows.empty()) {
        throw DimensionError("select_rows: empty selection");
    }
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output({rows.size(), d}, tracked);
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                    ov.begin() + static_cast<std::ptrdiff_t>(i * d));
    if (tracked) {
        std::vector<std::size_t> idx(rows.begin(), rows.end());
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out), idx = std::move(idx),
                              d]() mutable {
            const double* g = orf.grad();
            double* gx = xr.grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    if (begin >= end || end > x.dim(0)) {
        throw DimensionError("slice_rows: invalid range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") for " + detail::format_shape(x.shape()));
    }
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    return select_rows(x, rows);
}

// ---------------------------------------------------------------------------
// Linear algebra

// a[m x k] . b[k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions disagree " + detail::format_shape(a.shape()) +
                             " x " + detail::format_shape(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const bool tracked = detail::any_requires_grad({&a, &b});
    Tensor out = detail::make_output({m, n}, tracked);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = ov + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    count_macs(static_cast<std::uint64_t>(m) * k * n);
    if (tracked) {
        active_tape().record([ar = detail::NodeRef(a), br = detail::NodeRef(b),
                              orf = detail::NodeRef(out), m, k, n]() mutable {
            const double* g = orf.grad();
            const double* av = ar.value();
            const double* bv = br.value();
            if (ar.wants_grad()) {
                double* ga = ar.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (br.wants_grad()) {
                double* gb = br.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = av[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                    }
            }
        });
    }
    return out;
}

// x[n x in] . w[out x in]^T, the usual dense-layer layout.
inline Tensor linear(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear");
    if (x.dim(1) != w.dim(1)) {
        throw DimensionError("linear: input " + detail::format_shape(x.shape()) +
                             " incompatible with weight " + detail::format_shape(w.shape()));
    }
    const std::size_t n = x.dim(0), in = x.dim(1), outd = w.dim(0);
    const bool tracked = detail::any_requires_grad({&x, &w});
    Tensor out = detail::make_output({n, outd}, tracked);
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    double* ov = out.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* xrow = xv + i * in;
        for (std::size_t o = 0; o < outd; ++o) {
            const double* wrow = wv + o * in;
            double acc = 0.0;
            for (std::size_t p = 0; p < in; ++p) acc += xrow[p] * wrow[p];
            ov[i * outd + o] = acc;
        }
    }
    count_macs(static_cast<std::uint64_t>(n) * in * outd);
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), wr = detail::NodeRef(w),
                              orf = detail::NodeRef(out), n, in, outd]() mutable {
            const double* g = orf.grad();
            const double* xv = xr.value();
            const double* wv = wr.value();
            if (xr.wants_grad()) {
                double* gx = xr.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t o = 0; o < outd; ++o) {
                        const double gio = g[i * outd + o];
                        if (gio == 0.0) continue;
                        const double* wrow = wv + o * in;
                        double* gxrow = gx + i * in;
                        for (std::size_t p = 0; p < in; ++p) gxrow[p] += gio * wrow[p];
                    }
            }
            if (wr.wants_grad()) {
                double* gw = wr.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t o = 0; o < outd; ++o) {
                        const double gio = g[i * outd + o];
                        if (gio == 0.0) continue;
                        const double* xrow = xv + i * in;
                        double* gwrow = gw + o * in;
                        for (std::size_t p = 0; p < in; ++p) gwrow[p] += gio * xrow[p];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

inline constexpr double kNormEps = 1e-5;

// Softmax along `axis` of an arbitrary-rank tensor.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                             detail::format_shape(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t len = x.dim(axis);
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output(x.shape(), tracked);
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                ov[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) ov[base + j * inner] /= z;
        }
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out), outer, inner,
                              len]() mutable {
            const double* g = orf.grad();
            const double* y = orf.value();
            double* gx = xr.grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
        });
    }
    return out;
}

namespace detail {

// Normalizes `groups` contiguous blocks of `group_size` values, then applies a
// per-channel affine where each channel owns `channel_stride` consecutive values.
// LayerNorm: groups = rows, channel_stride = 1. GroupNorm: channel_stride = H*W.
inline Tensor normalize_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               std::size_t groups, std::size_t group_size,
                               std::size_t channel_stride, std::size_t channels, double eps) {
    const bool tracked = any_requires_grad({&x, &gamma, &beta});
    Tensor out = make_output(x.shape(), tracked);
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(groups);
    const double* xv = x.values().data();
    const double* gv = gamma.values().data();
    const double* bv = beta.values().data();
    double* ov = out.values().data();
    auto channel_of = [&](std::size_t flat) { return (flat / channel_stride) % channels; };
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t base = g * group_size;
        double mu = 0.0;
        for (std::size_t i = 0; i < group_size; ++i) mu += xv[base + i];
        mu /= static_cast<double>(group_size);
        double var = 0.0;
        for (std::size_t i = 0; i < group_size; ++i) {
            const double d = xv[base + i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(group_size);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[g] = is;
        for (std::size_t i = 0; i < group_size; ++i) {
            const std::size_t idx = base + i;
            const double xh = (xv[idx] - mu) * is;
            (*xhat)[idx] = xh;
            const std::size_t c = channel_of(idx);
            ov[idx] = gv[c] * xh + bv[c];
        }
    }
    if (tracked) {
        active_tape().record([xr = NodeRef(x), gr = NodeRef(gamma), br = NodeRef(beta),
                              orf = NodeRef(out), xhat, inv_std, groups, group_size, channel_stride,
                              channels]() mutable {
            const double* g = orf.grad();
            const double* gv = gr.value();
            auto channel_of = [&](std::size_t flat) { return (flat / channel_stride) % channels; };
            if (gr.wants_grad() || br.wants_grad()) {
                for (std::size_t idx = 0; idx < xhat->size(); ++idx) {
                    const std::size_t c = channel_of(idx);
                    if (gr.wants_grad()) gr.grad()[c] += g[idx] * (*xhat)[idx];
                    if (br.wants_grad()) br.grad()[c] += g[idx];
                }
            }
            if (xr.wants_grad()) {
                double* gx = xr.grad();
                const double n = static_cast<double>(group_size);
                for (std::size_t grp = 0; grp < groups; ++grp) {
                    const std::size_t base = grp * group_size;
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t i = 0; i < group_size; ++i) {
                        const std::size_t idx = base + i;
                        const double d = g[idx] * gv[channel_of(idx)];
                        mean_d += d;
                        mean_dx += d * (*xhat)[idx];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    const double is = (*inv_std)[grp];
                    for (std::size_t i = 0; i < group_size; ++i) {
                        const std::size_t idx = base + i;
                        const double d = g[idx] * gv[channel_of(idx)];
                        gx[idx] += is * (d - mean_d - (*xhat)[idx] * mean_dx);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

// Normalizes each row of x[n x d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = kNormEps) {
    detail::require_rank(x, 2, "layer_norm");
    const std::size_t d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: affine params " + detail::format_shape(gamma.shape()) +
                             " do not match feature width " + std::to_string(d));
    }
    return detail::normalize_affine(x, gamma, beta, x.dim(0), d, 1, d, eps);
}

// x[C x H x W], statistics over (C/groups channels x H x W).
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma,
                         const Tensor& beta, double eps = kNormEps) {
    detail::require_rank(x, 3, "group_norm");
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (groups == 0 || c % groups != 0) {
        throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
    }
    if (gamma.numel() != c || beta.numel() != c) {
        throw DimensionError("group_norm: affine params " + detail::format_shape(gamma.shape()) +
                             " do not match " + std::to_string(c) + " channels");
    }
    return detail::normalize_affine(x, gamma, beta, groups, (c / groups) * hw, hw, c, eps);
}

inline constexpr int kIgnoreIndex = -100;

// Mean negative log-likelihood over rows whose target != ignore_index.
inline Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets,
                                        int ignore_index = kIgnoreIndex) {
    detail::require_rank(logits, 2, "cross_entropy_from_logits");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    if (targets.size() != n) {
        throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");
    }
    std::size_t count = 0;
    for (int t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw DataError("cross_entropy_from_logits: target id " + std::to_string(t) +
                            " outside vocabulary of size " + std::to_string(v));
        }
        ++count;
    }
    if (count == 0) {
        throw DataError("cross_entropy_from_logits: empty target (every position ignored)");
    }
    const bool tracked = detail::any_requires_grad({&logits});
    Tensor out = detail::make_output({1}, tracked);
    auto probs = std::make_shared<std::vector<double>>(n * v, 0.0);
    const double* lv = logits.values().data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] == ignore_index) continue;
        const double* row = lv + i * v;
        const double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        total += lse - row[targets[i]];
        for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] = std::exp(row[j] - lse);
    }
    out.values()[0] = total / static_cast<double>(count);
    if (tracked) {
        std::vector<int> tg(targets.begin(), targets.end());
        active_tape().record([lr = detail::NodeRef(logits), orf = detail::NodeRef(out), probs,
                              tg = std::move(tg), n, v, count, ignore_index]() mutable {
            const double g = orf.grad()[0] / static_cast<double>(count);
            double* gl = lr.grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (tg[i] == ignore_index) continue;
                for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * (*probs)[i * v + j];
                gl[i * v + static_cast<std::size_t>(tg[i])] -= g;
            }
        });
    }
    return out;
}

inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    detail::require_rank(table, 2, "embedding_lookup");
    const std::size_t vocab = table.dim(0);
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw DataError("embedding_lookup: id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(vocab));
        }
        rows.push_back(static_cast<std::size_t>(id));
    }
    return select_rows(table, rows);
}

// Inverted dropout; identity when p == 0.
template <typename Rng>
Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p <= 0.0) {
        return x;
    }
    if (p >= 1.0) {
        throw ConfigError("dropout: probability must be < 1");
    }
    const Tensor keep = [&] {
        Tensor m(x.shape());
        std::bernoulli_distribution bern(1.0 - p);
        const double s = 1.0 / (1.0 - p);
        for (auto& v : m.values()) v = bern(rng) ? s : 0.0;
        return m;
    }();
    return mul(x, keep);
}

// ---------------------------------------------------------------------------
// Spatial ops on [C x H x W]

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t padding) {
    return (in + 2 * padding - kernel) / stride + 1;
}

// Per-channel 3x3 cross-correlation with zero padding.
inline Tensor conv2d_depthwise(const Tensor& x, const Tensor& k, std::size_t stride = 2,
                               std::size_t padding = 1) {
    detail::require_rank(x, 3, "conv2d_depthwise");
    detail::require_rank(k, 3, "conv2d_depthwise");
    if (k.dim(1) != 3 || k.dim(2) != 3) {
        throw DimensionError("conv2d_depthwise: kernel must be Cx3x3, got " +
                             detail::format_shape(k.shape()));
    }
    if (k.dim(0) != x.dim(0)) {
        throw DimensionError("conv2d_depthwise: kernel channels " + detail::format_shape(k.shape()) +
                             " vs input " + detail::format_shape(x.shape()));
    }
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t oh = conv_output_size(h, 3, stride, padding);
    const std::size_t ow = conv_output_size(w, 3, stride, padding);
    const bool tracked = detail::any_requires_grad({&x, &k});
    Tensor out = detail::make_output({c, oh, ow}, tracked);
    const double* xv = x.values().data();
    const double* kv = k.values().data();
    double* ov = out.values().data();
    const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::ptrdiff_t ki = 0; ki < 3; ++ki) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * stride) + ki -
                                             static_cast<std::ptrdiff_t>(padding);
                    if (y < 0 || y >= ih) continue;
                    for (std::ptrdiff_t kj = 0; kj < 3; ++kj) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * stride) + kj -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (xx < 0 || xx >= iw) continue;
                        acc += xv[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(xx)] *
                               kv[ch * 9 + static_cast<std::size_t>(ki * 3 + kj)];
                    }
                }
                ov[(ch * oh + i) * ow + j] = acc;
            }
    count_macs(static_cast<std::uint64_t>(c) * oh * ow * 9);
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), kr = detail::NodeRef(k),
                              orf = detail::NodeRef(out), c, h, w, oh, ow, stride, padding]() mutable {
            const double* g = orf.grad();
            const double* xv = xr.value();
            const double* kv = kr.value();
            double* gx = xr.wants_grad() ? xr.grad() : nullptr;
            double* gk = kr.wants_grad() ? kr.grad() : nullptr;
            const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const double go = g[(ch * oh + i) * ow + j];
                        for (std::ptrdiff_t ki = 0; ki < 3; ++ki) {
                            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * stride) + ki -
                                                     static_cast<std::ptrdiff_t>(padding);
                            if (y < 0 || y >= ih) continue;
                            for (std::ptrdiff_t kj = 0; kj < 3; ++kj) {
                                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * stride) + kj -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (xx < 0 || xx >= iw) continue;
                                const std::size_t xi =
                                    (ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(xx);
                                const std::size_t ki9 = ch * 9 + static_cast<std::size_t>(ki * 3 + kj);
                                if (gx) gx[xi] += go * kv[ki9];
                                if (gk) gk[ki9] += go * xv[xi];
                            }
                        }
                    }
        });
    }
    return out;
}

// Dense 3x3 convolution, k[C_out x C_in x 3 x 3]. Used by the standard-conv ablation.
inline Tensor conv2d_standard(const Tensor& x, const Tensor& k, std::size_t stride = 2,
                              std::size_t padding = 1) {
    detail::require_rank(x, 3, "conv2d_standard");
    detail::require_rank(k, 4, "conv2d_standard");
    if (k.dim(1) != x.dim(0) || k.dim(2) != 3 || k.dim(3) != 3) {
        throw DimensionError("conv2d_standard: kernel " + detail::format_shape(k.shape()) +
                             " incompatible with input " + detail::format_shape(x.shape()));
    }
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = k.dim(0);
    const std::size_t oh = conv_output_size(h, 3, stride, padding);
    const std::size_t ow = conv_output_size(w, 3, stride, padding);
    const bool tracked = detail::any_requires_grad({&x, &k});
    Tensor out = detail::make_output({cout, oh, ow}, tracked);
    const double* xv = x.values().data();
    const double* kv = k.values().data();
    double* ov = out.values().data();
    // Visits every (output, input-channel, tap) triple with in-bounds input.
    auto for_each_tap = [=](auto&& fn) {
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j)
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t ki = 0; ki < 3; ++ki) {
                            const auto y = static_cast<std::ptrdiff_t>(i * stride + ki) -
                                           static_cast<std::ptrdiff_t>(padding);
                            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kj = 0; kj < 3; ++kj) {
                                const auto xx = static_cast<std::ptrdiff_t>(j * stride + kj) -
                                                static_cast<std::ptrdiff_t>(padding);
                                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                                fn((co * oh + i) * ow + j,
                                   (ci * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(xx),
                                   ((co * cin + ci) * 3 + ki) * 3 + kj);
                            }
                        }
    };
    for_each_tap([&](std::size_t o, std::size_t xi, std::size_t ki) { ov[o] += xv[xi] * kv[ki]; });
    count_macs(static_cast<std::uint64_t>(cout) * oh * ow * cin * 9);
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), kr = detail::NodeRef(k),
                              orf = detail::NodeRef(out), for_each_tap]() mutable {
            const double* g = orf.grad();
            const double* xv = xr.value();
            const double* kv = kr.value();
            double* gx = xr.wants_grad() ? xr.grad() : nullptr;
            double* gk = kr.wants_grad() ? kr.grad() : nullptr;
            for_each_tap([&](std::size_t o, std::size_t xi, std::size_t ki) {
                if (gx) gx[xi] += g[o] * kv[ki];
                if (gk) gk[ki] += g[o] * xv[xi];
            });
        });
    }
    return out;
}

// 1x1 convolution: k[C_out x C_in] applied at every pixel.
inline Tensor conv2d_pointwise(const Tensor& x, const Tensor& k) {
    detail::require_rank(x, 3, "conv2d_pointwise");
    detail::require_rank(k, 2, "conv2d_pointwise");
    if (k.dim(1) != x.dim(0)) {
        throw DimensionError("conv2d_pointwise: kernel " + detail::format_shape(k.shape()) +
                             " vs input " + detail::format_shape(x.shape()));
    }
    const std::size_t h = x.dim(1), w = x.dim(2);
    Tensor flat = reshape(x, {x.dim(0), h * w});
    return reshape(matmul(k, flat), {k.dim(0), h, w});
}

// Floor-partition windows: output row i averages input rows
// [floor(i*H/out_h), floor((i+1)*H/out_h)); columns likewise.
inline Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(x, 3, "adaptive_avg_pool2d");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
        throw DimensionError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                             std::to_string(out_w) + " invalid for input " +
                             detail::format_shape(x.shape()));
    }
    const bool tracked = detail::any_requires_grad({&x});
    Tensor out = detail::make_output({c, out_h, out_w}, tracked);
    const double* xv = x.values().data();
    double* ov = out.values().data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < out_h; ++i) {
            const std::size_t r0 = i * h / out_h, r1 = (i + 1) * h / out_h;
            for (std::size_t j = 0; j < out_w; ++j) {
                const std::size_t c0 = j * w / out_w, c1 = (j + 1) * w / out_w;
                double acc = 0.0;
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t cc = c0; cc < c1; ++cc) acc += xv[(ch * h + r) * w + cc];
                ov[(ch * out_h + i) * out_w + j] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
            }
        }
    if (tracked) {
        active_tape().record([xr = detail::NodeRef(x), orf = detail::NodeRef(out), c, h, w, out_h,
                              out_w]() mutable {
            const double* g = orf.grad();
            double* gx = xr.grad();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < out_h; ++i) {
                    const std::size_t r0 = i * h / out_h, r1 = (i + 1) * h / out_h;
                    for (std::size_t j = 0; j < out_w; ++j) {
                        const std::size_t c0 = j * w / out_w, c1 = (j + 1) * w / out_w;
                        const double share =
                            g[(ch * out_h + i) * out_w + j] / static_cast<double>((r1 - r0) * (c1 - c0));
                        for (std::size_t r = r0; r < r1; ++r)
                            for (std::size_t cc = c0; cc < c1; ++cc) gx[(ch * h + r) * w + cc] += share;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention over q, k, v [S x D] split into
// `heads` column blocks. Scores and mixing are computed densely (S*S*D MACs
// each); the causal mask only zeroes probabilities.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t heads, bool causal) {
    detail::require_rank(q, 2, "multi_head_attention");
    detail::require_same_shape(q, k, "multi_head_attention");
    detail::require_same_shape(q, v, "multi_head_attention");
    const std::size_t s = q.dim(0), d = q.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                          " not divisible by " + std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool tracked = detail::any_requires_grad({&q, &k, &v});
    Tensor out = detail::make_output({s, d}, tracked);
    auto probs = std::make_shared<std::vector<double>>(heads * s * s, 0.0);
    const double* qv = q.values().data();
    const double* kv = k.values().data();
    const double* vv = v.values().data();
    double* ov = out.values().data();
    std::vector<double> row(s);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * dh;
        double* p = probs->data() + hd * s * s;
        for (std::size_t i = 0; i < s; ++i) {
            const std::size_t visible = causal ? i + 1 : s;
            for (std::size_t j = 0; j < visible; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < dh; ++t) acc += qv[i * d + off + t] * kv[j * d + off + t];
                row[j] = acc * inv_sqrt;
            }
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
                p[i * s + j] = std::exp(row[j] - mx);
                z += p[i * s + j];
            }
            for (std::size_t j = 0; j < visible; ++j) p[i * s + j] /= z;
        }
        for (std::size_t i = 0; i < s; ++i) {
            const std::size_t visible = causal ? i + 1 : s;
            for (std::size_t j = 0; j < visible; ++j) {
                const double pij = p[i * s + j];
                for (std::size_t t = 0; t < dh; ++t) ov[i * d + off + t] += pij * vv[j * d + off + t];
            }
        }
    }
    count_macs(2ULL * s * s * d);
    if (tracked) {
        active_tape().record([qr = detail::NodeRef(q), kr = detail::NodeRef(k), vr = detail::NodeRef(v),
                              orf = detail::NodeRef(out), probs, s, d, dh, heads, inv_sqrt]() mutable {
            const double* g = orf.grad();
            const double* qv = qr.value();
            const double* kv = kr.value();
            const double* vv = vr.value();
            double* gq = qr.wants_grad() ? qr.grad() : nullptr;
            double* gk = kr.wants_grad() ? kr.grad() : nullptr;
            double* gv = vr.wants_grad() ? vr.grad() : nullptr;
            std::vector<double> dp(s);
            for (std::size_t hd = 0; hd < heads; ++hd) {
                const std::size_t off = hd * dh;
                const double* p = probs->data() + hd * s * s;
                for (std::size_t i = 0; i < s; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < s; ++j) {
                        const double pij = p[i * s + j];
                        if (pij == 0.0) {
                            dp[j] = 0.0;
                            continue;
                        }
                        double acc = 0.0;
                        for (std::size_t t = 0; t < dh; ++t) {
                            acc += g[i * d + off + t] * vv[j * d + off + t];
                            if (gv) gv[j * d + off + t] += pij * g[i * d + off + t];
                        }
                        dp[j] = acc;
                        dot += acc * pij;
                    }
                    for (std::size_t j = 0; j < s; ++j) {
                        const double pij = p[i * s + j];
                        if (pij == 0.0) continue;
                        const double ds = pij * (dp[j] - dot) * inv_sqrt;
                        for (std::size_t t = 0; t < dh; ++t) {
                            if (gq) gq[i * d + off + t] += ds * kv[j * d + off + t];
                            if (gk) gk[j * d + off + t] += ds * qv[i * d + off + t];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------

// A named trainable (or frozen) array. `decay` marks matrices that receive
// decoupled weight decay; norms and positional tables do not.
// One query row attending over `rows` cached key/value rows ([rows x D],
// row-major). Same arithmetic as the last row of causal
// multi_head_attention over the full sequence. Not differentiable.
inline Tensor attention_cached(const Tensor& q, std::span<const double> keys, std::span<const double> vals,
                               std::size_t rows, std::size_t heads) {
    detail::require_rank(q, 2, "attention_cached");
    const std::size_t d = q.dim(1);
    if (q.dim(0) != 1 || keys.size() != rows * d || vals.size() != rows * d || rows == 0) {
        throw DimensionError("attention_cached: expected one query row and " + std::to_string(rows) +
                             " cached rows of width " + std::to_string(d));
    }
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention_cached: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({1, d}, 0.0);
    const double* qv = q.values().data();
    double* ov = out.values().data();
    std::vector<double> row(rows), p(rows);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t j = 0; j < rows; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < dh; ++t) acc += qv[off + t] * keys[j * d + off + t];
            row[j] = acc * inv_sqrt;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < rows; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < rows; ++j) {
            p[j] = std::exp(row[j] - mx);
            z += p[j];
        }
        for (std::size_t j = 0; j < rows; ++j) p[j] /= z;
        for (std::size_t j = 0; j < rows; ++j) {
            for (std::size_t t = 0; t < dh; ++t) ov[off + t] += p[j] * vals[j * d + off + t];
        }
    }
    count_macs(2ULL * rows * d);
    return out;
}

struct Parameter {
    std::string name;
    Tensor tensor;
    bool decay = true;
};

inline std::size_t count_scalars(const std::vector<Parameter>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

inline void zero_grads(const std::vector<Parameter>& params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every requires_grad tensor reachable on
// this thread's tape, then clears the tape.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw DimensionError("backward: loss must be a scalar, got shape " +
                             (loss.defined() ? detail::format_shape(loss.shape()) : std::string("<undefined>")));
    }
    if (active_tape().empty() || !loss.requires_grad()) {
        throw TapeError("backward: no recorded tape leads to this loss");
    }
    loss.node()->grad[0] += 1.0;
    active_tape().replay_reverse();
}

}  // namespace uipress
