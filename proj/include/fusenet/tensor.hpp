// tensor.hpp -- dense tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a cheap handle onto shared storage. Operations build a tape
// of GraphNode records; backward() replays the tape in reverse insertion
// order, accumulating gradients into every reachable tensor that requires
// them. T is float for training runs and double for gradient checking.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"

namespace fusenet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

// Tape position counter. Nodes created later always compare greater, so
// sorting reachable nodes by descending sequence replays the tape backwards.
inline std::atomic<std::uint64_t>& node_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

inline bool autograd_enabled() { return detail::grad_mode_flag(); }

// RAII switch that disables tape recording (inference / metric passes).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
struct TensorImpl;

// One recorded operation: where it sits on the tape, which tensors fed it,
// and how to push the output gradient back into them.
template <typename T>
struct GraphNode {
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    std::function<void(TensorImpl<T>&)> backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad; // allocated lazily; empty unless gradient has flowed
    bool requires_grad = false;
    std::unique_ptr<GraphNode<T>> node;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }

    // Returns the gradient buffer to accumulate into, or nullptr if this
    // tensor never accumulates gradient.
    T* grad_sink() {
        if (!requires_grad) return nullptr;
        ensure_grad();
        return grad.data();
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        impl_->shape = std::move(shape);
        impl_->values.assign(numel(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->values = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->values.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    std::span<const T> values() const { return impl_->values; }
    std::span<T> values_mut() { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

    T item() const {
        if (size() != 1) throw UsageError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
        return impl_->values[0];
    }

    // Deep copy with no graph linkage.
    Tensor detached_clone() const {
        Tensor out(impl_->shape, impl_->values, false);
        return out;
    }

    bool is_leaf() const { return impl_->node == nullptr; }

    // Reverse-mode sweep from a scalar. Gradients accumulate; callers zero
    // them between optimizer steps.
    void backward() const;

    std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

// Wire an op result into the tape. `backward` receives the finished output
// impl and is responsible for pushing output.grad into each parent.
template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> values,
                         std::vector<Tensor<T>> parents,
                         std::function<void(TensorImpl<T>&)> backward) {
    Tensor<T> out(std::move(shape), std::move(values), false);
    bool needs = false;
    if (autograd_enabled()) {
        for (const auto& p : parents)
            if (p.requires_grad()) { needs = true; break; }
    }
    if (needs) {
        out.set_requires_grad(true);
        auto node = std::make_unique<GraphNode<T>>();
        node->seq = node_counter().fetch_add(1, std::memory_order_relaxed) + 1;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.impl());
        node->backward = std::move(backward);
        out.impl()->node = std::move(node);
    }
    return out;
}

// --- dense kernels -------------------------------------------------------
// All kernels keep each output element's reduction sequential, so results
// are bit-identical from run to run.

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A^T * B where A is stored [K,M] and B is [K,N]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void transpose2d(const T* src, T* dst, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

} // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    if (size() != 1)
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(shape()));
    if (!impl_->requires_grad)
        throw UsageError("backward: loss does not require grad (no trainable parameter reaches it)");

    // Collect every impl that recorded an op, reachable from the loss.
    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> seen;
    std::vector<TensorImpl<T>*> stack{impl_.get()};
    while (!stack.empty()) {
        TensorImpl<T>* cur = stack.back();
        stack.pop_back();
        if (!cur->node || !seen.insert(cur).second) continue;
        order.push_back(cur);
        for (const auto& parent : cur->node->parents) stack.push_back(parent.get());
    }
    std::sort(order.begin(), order.end(),
              [](const TensorImpl<T>* a, const TensorImpl<T>* b) { return a->node->seq > b->node->seq; });

    impl_->ensure_grad();
    impl_->grad[0] += T(1);
    for (TensorImpl<T>* node_impl : order) node_impl->node->backward(*node_impl);
}

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto ai = a.impl();
    auto bi = b.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
            if (T* g = bi->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto ai = a.impl();
    auto bi = b.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
            if (T* g = bi->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto ai = a.impl();
    auto bi = b.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->values[i];
            if (T* g = bi->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->values[i];
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    auto ai = a.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a}, [ai, factor](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = T(0);
    for (T v : a.values()) total += v;
    auto ai = a.impl();
    return detail::make_op_output<T>(
        Shape{1}, std::vector<T>{total}, {a}, [ai](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink()) {
                const T up = o.grad[0];
                for (std::size_t i = 0; i < ai->values.size(); ++i) g[i] += up;
            }
        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    std::vector<T> out(a.values().begin(), a.values().end());
    auto ai = a.impl();
    return detail::make_op_output<T>(
        std::move(new_shape), std::move(out), {a}, [ai](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    auto ai = a.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a}, [ai](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                // gate is 0 at exactly 0
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    if (ai->values[i] > T(0)) g[i] += o.grad[i];
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = av[i];
        if (x >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-x));
        } else {
            const T e = std::exp(x);
            out[i] = e / (T(1) + e);
        }
    }
    auto ai = a.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a}, [ai](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    const T s = o.values[i];
                    g[i] += o.grad[i] * s * (T(1) - s);
                }
        });
}

// Row-wise log-softmax over a [B, C] tensor, stabilized by the row maximum.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    if (a.rank() != 2)
        throw ShapeError("log_softmax: expected [B, C], got " + shape_str(a.shape()));
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (cols < 2) throw ShapeError("log_softmax: needs at least 2 classes, got " + std::to_string(cols));
    std::vector<T> out(a.size());
    const auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * cols;
        T* y = out.data() + r * cols;
        T mx = x[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T denom = T(0);
        for (std::size_t c = 0; c < cols; ++c) denom += std::exp(x[c] - mx);
        const T log_denom = std::log(denom);
        for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - mx - log_denom;
    }
    auto ai = a.impl();
    return detail::make_op_output<T>(
        a.shape(), std::move(out), {a}, [ai, rows, cols](TensorImpl<T>& o) {
            if (T* g = ai->grad_sink())
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* go = o.grad.data() + r * cols;
                    const T* y = o.values.data() + r * cols;
                    T gsum = T(0);
                    for (std::size_t c = 0; c < cols; ++c) gsum += go[c];
                    T* gi = g + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) gi[c] += go[c] - std::exp(y[c]) * gsum;
                }
        });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto ai = a.impl();
    auto bi = b.impl();
    return detail::make_op_output<T>(
        Shape{m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl<T>& o) {
            if (T* ga = ai->grad_sink()) {
                // grad_a = grad_out . b^T : transpose b once, then plain GEMM
                std::vector<T> bt(k * n);
                detail::transpose2d(bi->values.data(), bt.data(), k, n);
                detail::gemm_nn_acc(o.grad.data(), bt.data(), ga, m, n, k);
            }
            if (T* gb = bi->grad_sink())
                detail::gemm_tn_acc(ai->values.data(), o.grad.data(), gb, k, m, n);
        });
}

// y = x . W^T + bias, with x [B, In], w [Out, In], bias [Out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
    if (bias.rank() != 1 || bias.dim(0) != w.dim(0))
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    std::vector<T> out(batch * out_dim);
    const auto bv = bias.values();
    for (std::size_t r = 0; r < batch; ++r)
        std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(r * out_dim));
    std::vector<T> wt(in * out_dim);
    detail::transpose2d(w.values().data(), wt.data(), out_dim, in);
    detail::gemm_nn_acc(x.values().data(), wt.data(), out.data(), batch, in, out_dim);
    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = bias.impl();
    return detail::make_op_output<T>(
        Shape{batch, out_dim}, std::move(out), {x, w, bias},
        [xi, wi, bi, batch, in, out_dim](TensorImpl<T>& o) {
            if (T* gx = xi->grad_sink())
                detail::gemm_nn_acc(o.grad.data(), wi->values.data(), gx, batch, out_dim, in);
            if (T* gw = wi->grad_sink())
                detail::gemm_tn_acc(o.grad.data(), xi->values.data(), gw, out_dim, batch, in);
            if (T* gb = bi->grad_sink())
                for (std::size_t r = 0; r < batch; ++r) {
                    const T* go = o.grad.data() + r * out_dim;
                    for (std::size_t c = 0; c < out_dim; ++c) gb[c] += go[c];
                }
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    std::size_t batch, in_c, in_h, in_w;
    std::size_t out_c, kh, kw;
    std::size_t out_h, out_w;
    std::size_t groups, cols_rows; // cols_rows = (in_c/groups)*kh*kw
    int stride, padding;
};

inline std::size_t conv_extent(std::size_t in, int pad, std::size_t kernel, int stride,
                               const char* what) {
    const long long span = static_cast<long long>(in) + 2LL * pad - static_cast<long long>(kernel);
    if (span < 0 || stride < 1)
        throw ShapeError(std::string(what) + ": kernel " + std::to_string(kernel) +
                         " does not fit input extent " + std::to_string(in) + " with padding " +
                         std::to_string(pad));
    return static_cast<std::size_t>(span / stride) + 1;
}

// Gather one group's input patch into col [(Cg*kh*kw) x (out_h*out_w)].
template <typename T>
void im2col(const T* in, std::size_t in_h, std::size_t in_w, std::size_t channels,
            std::size_t kh, std::size_t kw, int stride, int padding, std::size_t out_h,
            std::size_t out_w, T* col) {
    const std::size_t plane = in_h * in_w;
    const std::size_t patch = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* dst = col + ((c * kh + ki) * kw + kj) * patch;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const long long iy =
                        static_cast<long long>(oy) * stride - padding + static_cast<long long>(ki);
                    if (iy < 0 || iy >= static_cast<long long>(in_h)) {
                        std::fill(dst, dst + out_w, T(0));
                        dst += out_w;
                        continue;
                    }
                    const T* src_row = in + c * plane + static_cast<std::size_t>(iy) * in_w;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const long long ix =
                            static_cast<long long>(ox) * stride - padding + static_cast<long long>(kj);
                        *dst++ = (ix < 0 || ix >= static_cast<long long>(in_w))
                                     ? T(0)
                                     : src_row[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

// Scatter-add of a col gradient back onto the input plane.
template <typename T>
void col2im_acc(const T* col, std::size_t in_h, std::size_t in_w, std::size_t channels,
                std::size_t kh, std::size_t kw, int stride, int padding, std::size_t out_h,
                std::size_t out_w, T* in_grad) {
    const std::size_t plane = in_h * in_w;
    const std::size_t patch = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const T* src = col + ((c * kh + ki) * kw + kj) * patch;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const long long iy =
                        static_cast<long long>(oy) * stride - padding + static_cast<long long>(ki);
                    if (iy < 0 || iy >= static_cast<long long>(in_h)) {
                        src += out_w;
                        continue;
                    }
                    T* dst_row = in_grad + c * plane + static_cast<std::size_t>(iy) * in_w;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const long long ix =
                            static_cast<long long>(ox) * stride - padding + static_cast<long long>(kj);
                        if (ix >= 0 && ix < static_cast<long long>(in_w))
                            dst_row[static_cast<std::size_t>(ix)] += src[ox];
                    }
                    src += out_w;
                }
            }
        }
    }
}

} // namespace detail

// 2-D cross-correlation (no kernel flip), NCHW layout.
//   input  [B, Cin, H, W]
//   weight [Cout, Cin/groups, kh, kw]
//   bias   [Cout]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0, int groups = 1) {
    if (input.rank() != 4)
        throw ShapeError("conv2d: input must be [B, C, H, W], got " + shape_str(input.shape()));
    if (weight.rank() != 4)
        throw ShapeError("conv2d: weight must be [Cout, Cin/g, kh, kw], got " +
                         shape_str(weight.shape()));
    detail::ConvDims d;
    d.batch = input.dim(0);
    d.in_c = input.dim(1);
    d.in_h = input.dim(2);
    d.in_w = input.dim(3);
    d.out_c = weight.dim(0);
    d.kh = weight.dim(2);
    d.kw = weight.dim(3);
    d.stride = stride;
    d.padding = padding;
    d.groups = static_cast<std::size_t>(groups);
    if (groups < 1 || d.in_c % d.groups != 0 || d.out_c % d.groups != 0)
        throw ConfigError("conv2d: channels (in=" + std::to_string(d.in_c) +
                          ", out=" + std::to_string(d.out_c) + ") not divisible by groups=" +
                          std::to_string(groups));
    if (weight.dim(1) != d.in_c / d.groups)
        throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1) * d.groups) + " input channels, input has " +
                         std::to_string(d.in_c));
    if (bias.rank() != 1 || bias.dim(0) != d.out_c)
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " must be [" +
                         std::to_string(d.out_c) + "]");
    d.out_h = detail::conv_extent(d.in_h, padding, d.kh, stride, "conv2d");
    d.out_w = detail::conv_extent(d.in_w, padding, d.kw, stride, "conv2d");
    const std::size_t cg = d.in_c / d.groups;    // input channels per group
    const std::size_t og = d.out_c / d.groups;   // output channels per group
    d.cols_rows = cg * d.kh * d.kw;
    const std::size_t patch = d.out_h * d.out_w;

    std::vector<T> out(d.batch * d.out_c * patch);
    std::vector<T> col(d.cols_rows * patch);
    const T* in_data = input.values().data();
    const T* w_data = weight.values().data();
    const auto bias_v = bias.values();
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t g = 0; g < d.groups; ++g) {
            const T* in_g = in_data + (b * d.in_c + g * cg) * d.in_h * d.in_w;
            detail::im2col(in_g, d.in_h, d.in_w, cg, d.kh, d.kw, stride, padding, d.out_h, d.out_w,
                           col.data());
            T* out_g = out.data() + (b * d.out_c + g * og) * patch;
            for (std::size_t oc = 0; oc < og; ++oc)
                std::fill(out_g + oc * patch, out_g + (oc + 1) * patch, bias_v[g * og + oc]);
            detail::gemm_nn_acc(w_data + g * og * d.cols_rows, col.data(), out_g, og, d.cols_rows,
                                patch);
        }
    }

    auto xi = input.impl();
    auto wi = weight.impl();
    auto bi = bias.impl();
    return detail::make_op_output<T>(
        Shape{d.batch, d.out_c, d.out_h, d.out_w}, std::move(out), {input, weight, bias},
        [xi, wi, bi, d, cg, og, patch](TensorImpl<T>& o) {
            T* gx = xi->grad_sink();
            T* gw = wi->grad_sink();
            T* gb = bi->grad_sink();
            std::vector<T> col(d.cols_rows * patch);
            std::vector<T> col_t(gw ? d.cols_rows * patch : 0);
            std::vector<T> gcol(gx ? d.cols_rows * patch : 0);
            for (std::size_t b = 0; b < d.batch; ++b) {
                for (std::size_t g = 0; g < d.groups; ++g) {
                    const T* go_g = o.grad.data() + (b * d.out_c + g * og) * patch;
                    if (gw) {
                        const T* in_g =
                            xi->values.data() + (b * d.in_c + g * cg) * d.in_h * d.in_w;
                        detail::im2col(in_g, d.in_h, d.in_w, cg, d.kh, d.kw, d.stride, d.padding,
                                       d.out_h, d.out_w, col.data());
                        detail::transpose2d(col.data(), col_t.data(), d.cols_rows, patch);
                        detail::gemm_nn_acc(go_g, col_t.data(), gw + g * og * d.cols_rows, og,
                                            patch, d.cols_rows);
                    }
                    if (gb)
                        for (std::size_t oc = 0; oc < og; ++oc) {
                            const T* row = go_g + oc * patch;
                            T acc = T(0);
                            for (std::size_t p = 0; p < patch; ++p) acc += row[p];
                            gb[g * og + oc] += acc;
                        }
                    if (gx) {
                        std::fill(gcol.begin(), gcol.end(), T(0));
                        detail::gemm_tn_acc(wi->values.data() + g * og * d.cols_rows, go_g,
                                            gcol.data(), d.cols_rows, og, patch);
                        detail::col2im_acc(gcol.data(), d.in_h, d.in_w, cg, d.kh, d.kw, d.stride,
                                           d.padding, d.out_h, d.out_w,
                                           gx + (b * d.in_c + g * cg) * d.in_h * d.in_w);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Channel shuffle, concatenation, pooling, dropout
// ---------------------------------------------------------------------------

// Interleaves channel groups: output channel p takes input channel
// (p mod g)*(C/g) + p/g, the reshape-(g, C/g)-transpose-flatten permutation.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& input, int groups) {
    if (input.rank() != 4)
        throw ShapeError("channel_shuffle: input must be [B, C, H, W], got " +
                         shape_str(input.shape()));
    const std::size_t channels = input.dim(1);
    const std::size_t g = static_cast<std::size_t>(groups);
    if (groups < 1 || channels % g != 0)
        throw ConfigError("channel_shuffle: " + std::to_string(channels) +
                          " channels not divisible by groups=" + std::to_string(groups));
    const std::size_t batch = input.dim(0);
    const std::size_t plane = input.dim(2) * input.dim(3);
    const std::size_t per = channels / g;
    std::vector<T> out(input.size());
    const T* in = input.values().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < channels; ++p) {
            const std::size_t src = (p % g) * per + p / g;
            std::memcpy(out.data() + (b * channels + p) * plane, in + (b * channels + src) * plane,
                        plane * sizeof(T));
        }
    auto ii = input.impl();
    return detail::make_op_output<T>(
        input.shape(), std::move(out), {input},
        [ii, batch, channels, plane, g, per](TensorImpl<T>& o) {
            if (T* gi = ii->grad_sink())
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t p = 0; p < channels; ++p) {
                        const std::size_t src = (p % g) * per + p / g;
                        const T* go = o.grad.data() + (b * channels + p) * plane;
                        T* dst = gi + (b * channels + src) * plane;
                        for (std::size_t i = 0; i < plane; ++i) dst[i] += go[i];
                    }
        });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> tensors, int axis) {
    if (tensors.empty()) throw UsageError("concat: no tensors given");
    const Shape& first = tensors[0].shape();
    if (axis < 0 || static_cast<std::size_t>(axis) >= first.size())
        throw UsageError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(first));
    const std::size_t ax = static_cast<std::size_t>(axis);
    std::size_t axis_total = 0;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        const Shape& s = tensors[t].shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (i != ax && s[i] != first[i]) ok = false;
        if (!ok)
            throw ShapeError("concat: tensor " + std::to_string(t) + " has shape " + shape_str(s) +
                             ", incompatible with " + shape_str(first));
        axis_total += s[ax];
    }
    Shape out_shape = first;
    out_shape[ax] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
    for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];

    std::vector<T> out(numel(out_shape));
    const std::size_t out_stride = axis_total * inner;
    std::size_t offset = 0; // element offset within one outer slice
    std::vector<std::size_t> offsets(tensors.size());
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        offsets[t] = offset;
        const std::size_t chunk = tensors[t].shape()[ax] * inner;
        const T* src = tensors[t].values().data();
        for (std::size_t ou = 0; ou < outer; ++ou)
            std::memcpy(out.data() + ou * out_stride + offset, src + ou * chunk, chunk * sizeof(T));
        offset += chunk;
    }

    std::vector<Tensor<T>> parents(tensors.begin(), tensors.end());
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    impls.reserve(parents.size());
    for (auto& p : parents) impls.push_back(p.impl());
    std::vector<std::size_t> chunks(tensors.size());
    for (std::size_t t = 0; t < tensors.size(); ++t) chunks[t] = tensors[t].shape()[ax] * inner;
    return detail::make_op_output<T>(
        std::move(out_shape), std::move(out), std::move(parents),
        [impls, offsets, chunks, outer, out_stride](TensorImpl<T>& o) {
            for (std::size_t t = 0; t < impls.size(); ++t) {
                if (T* gi = impls[t]->grad_sink()) {
                    for (std::size_t ou = 0; ou < outer; ++ou) {
                        const T* go = o.grad.data() + ou * out_stride + offsets[t];
                        T* dst = gi + ou * chunks[t];
                        for (std::size_t i = 0; i < chunks[t]; ++i) dst[i] += go[i];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> tensors, int axis) {
    std::vector<Tensor<T>> v(tensors);
    return concat(std::span<const Tensor<T>>(v), axis);
}

// Non-differentiable inverse of concat; returns leaf tensors.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& t, int axis, const std::vector<std::size_t>& sizes) {
    const Shape& s = t.shape();
    const std::size_t ax = static_cast<std::size_t>(axis);
    if (ax >= s.size()) throw UsageError("split: axis out of range");
    std::size_t total = 0;
    for (std::size_t sz : sizes) total += sz;
    if (total != s[ax]) throw ShapeError("split: sizes do not sum to axis extent");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t in_stride = s[ax] * inner;
    std::vector<Tensor<T>> parts;
    std::size_t offset = 0;
    for (std::size_t sz : sizes) {
        Shape part_shape = s;
        part_shape[ax] = sz;
        std::vector<T> vals(numel(part_shape));
        const std::size_t chunk = sz * inner;
        for (std::size_t ou = 0; ou < outer; ++ou)
            std::memcpy(vals.data() + ou * chunk, t.values().data() + ou * in_stride + offset,
                        chunk * sizeof(T));
        parts.emplace_back(std::move(part_shape), std::move(vals));
        offset += chunk;
    }
    return parts;
}

enum class PoolKind { max, avg, global_avg };

template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, int kernel = 0, int stride = 0,
                 int padding = 0) {
    if (input.rank() != 4)
        throw ShapeError("pool2d: input must be [B, C, H, W], got " + shape_str(input.shape()));
    const std::size_t batch = input.dim(0), channels = input.dim(1);
    const std::size_t in_h = input.dim(2), in_w = input.dim(3);
    const std::size_t plane = in_h * in_w;
    auto ii = input.impl();

    if (kind == PoolKind::global_avg) {
        std::vector<T> out(batch * channels);
        const T* in = input.values().data();
        for (std::size_t bc = 0; bc < batch * channels; ++bc) {
            T acc = T(0);
            const T* src = in + bc * plane;
            for (std::size_t i = 0; i < plane; ++i) acc += src[i];
            out[bc] = acc / static_cast<T>(plane);
        }
        return detail::make_op_output<T>(
            Shape{batch, channels, 1, 1}, std::move(out), {input},
            [ii, batch, channels, plane](TensorImpl<T>& o) {
                if (T* gi = ii->grad_sink())
                    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
                        const T share = o.grad[bc] / static_cast<T>(plane);
                        T* dst = gi + bc * plane;
                        for (std::size_t i = 0; i < plane; ++i) dst[i] += share;
                    }
            });
    }

    if (kernel < 1 || stride < 1)
        throw ConfigError("pool2d: kernel and stride must be positive");
    if (padding < 0 || padding * 2 >= kernel)
        throw ConfigError("pool2d: padding " + std::to_string(padding) +
                          " too large for kernel " + std::to_string(kernel));
    const std::size_t out_h = detail::conv_extent(in_h, padding, static_cast<std::size_t>(kernel),
                                                  stride, "pool2d");
    const std::size_t out_w = detail::conv_extent(in_w, padding, static_cast<std::size_t>(kernel),
                                                  stride, "pool2d");
    const std::size_t out_plane = out_h * out_w;
    std::vector<T> out(batch * channels * out_plane);
    const T* in = input.values().data();

    if (kind == PoolKind::max) {
        // Remember which input element won each window; ties go to the first
        // maximal element in row-major order.
        auto arg = std::make_shared<std::vector<std::uint32_t>>(out.size());
        for (std::size_t bc = 0; bc < batch * channels; ++bc) {
            const T* src = in + bc * plane;
            T* dst = out.data() + bc * out_plane;
            std::uint32_t* am = arg->data() + bc * out_plane;
            for (std::size_t oy = 0; oy < out_h; ++oy)
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::uint32_t best_idx = 0;
                    bool found = false;
                    for (int ki = 0; ki < kernel; ++ki) {
                        const long long iy = static_cast<long long>(oy) * stride - padding + ki;
                        if (iy < 0 || iy >= static_cast<long long>(in_h)) continue;
                        for (int kj = 0; kj < kernel; ++kj) {
                            const long long ix = static_cast<long long>(ox) * stride - padding + kj;
                            if (ix < 0 || ix >= static_cast<long long>(in_w)) continue;
                            const std::size_t idx =
                                static_cast<std::size_t>(iy) * in_w + static_cast<std::size_t>(ix);
                            if (!found || src[idx] > best) {
                                best = src[idx];
                                best_idx = static_cast<std::uint32_t>(idx);
                                found = true;
                            }
                        }
                    }
                    dst[oy * out_w + ox] = best;
                    am[oy * out_w + ox] = best_idx;
                }
        }
        return detail::make_op_output<T>(
            Shape{batch, channels, out_h, out_w}, std::move(out), {input},
            [ii, arg, batch, channels, plane, out_plane](TensorImpl<T>& o) {
                if (T* gi = ii->grad_sink())
                    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
                        const T* go = o.grad.data() + bc * out_plane;
                        const std::uint32_t* am = arg->data() + bc * out_plane;
                        T* dst = gi + bc * plane;
                        for (std::size_t i = 0; i < out_plane; ++i) dst[am[i]] += go[i];
                    }
            });
    }

    // Average pool; padded cells count as zeros with a fixed kernel*kernel divisor.
    const T inv_area = T(1) / static_cast<T>(kernel * kernel);
    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
        const T* src = in + bc * plane;
        T* dst = out.data() + bc * out_plane;
        for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                T acc = T(0);
                for (int ki = 0; ki < kernel; ++ki) {
                    const long long iy = static_cast<long long>(oy) * stride - padding + ki;
                    if (iy < 0 || iy >= static_cast<long long>(in_h)) continue;
                    for (int kj = 0; kj < kernel; ++kj) {
                        const long long ix = static_cast<long long>(ox) * stride - padding + kj;
                        if (ix < 0 || ix >= static_cast<long long>(in_w)) continue;
                        acc += src[static_cast<std::size_t>(iy) * in_w + static_cast<std::size_t>(ix)];
                    }
                }
                dst[oy * out_w + ox] = acc * inv_area;
            }
    }
    const int k = kernel, s = stride, p = padding;
    return detail::make_op_output<T>(
        Shape{batch, channels, out_h, out_w}, std::move(out), {input},
        [ii, batch, channels, plane, out_plane, in_h, in_w, out_h, out_w, k, s, p,
         inv_area](TensorImpl<T>& o) {
            if (T* gi = ii->grad_sink())
                for (std::size_t bc = 0; bc < batch * channels; ++bc) {
                    const T* go = o.grad.data() + bc * out_plane;
                    T* dst = gi + bc * plane;
                    for (std::size_t oy = 0; oy < out_h; ++oy)
                        for (std::size_t ox = 0; ox < out_w; ++ox) {
                            const T share = go[oy * out_w + ox] * inv_area;
                            for (int ki = 0; ki < k; ++ki) {
                                const long long iy = static_cast<long long>(oy) * s - p + ki;
                                if (iy < 0 || iy >= static_cast<long long>(in_h)) continue;
                                for (int kj = 0; kj < k; ++kj) {
                                    const long long ix = static_cast<long long>(ox) * s - p + kj;
                                    if (ix < 0 || ix >= static_cast<long long>(in_w)) continue;
                                    dst[static_cast<std::size_t>(iy) * in_w +
                                        static_cast<std::size_t>(ix)] += share;
                                }
                            }
                        }
                }
        });
}

// Inverted dropout: training mode zeroes each element with probability p and
// scales survivors by 1/(1-p); eval mode is the identity. The mask is drawn
// from the rng in row-major element order.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: rate " + std::to_string(p) + " outside [0, 1)");
    if (!training || p == 0.0) return input;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<T>>(input.size());
    std::vector<T> out(input.size());
    const auto in = input.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T m = rng.next_double() < p ? T(0) : keep_scale;
        (*mask)[i] = m;
        out[i] = in[i] * m;
    }
    auto ii = input.impl();
    return detail::make_op_output<T>(
        input.shape(), std::move(out), {input}, [ii, mask](TensorImpl<T>& o) {
            if (T* gi = ii->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i) gi[i] += o.grad[i] * (*mask)[i];
        });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean over the batch of -log_probs[i, labels[i]].
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, const std::vector<int>& labels) {
    if (log_probs.rank() != 2)
        throw ShapeError("nll_loss: expected [B, C] log-probs, got " + shape_str(log_probs.shape()));
    const std::size_t batch = log_probs.dim(0), classes = log_probs.dim(1);
    if (labels.size() != batch)
        throw UsageError("nll_loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
            throw DataError("nll_loss: label " + std::to_string(labels[i]) + " of sample " +
                            std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    const auto lp = log_probs.values();
    T acc = T(0);
    for (std::size_t i = 0; i < batch; ++i)
        acc -= lp[i * classes + static_cast<std::size_t>(labels[i])];
    const T loss = acc / static_cast<T>(batch);
    auto li = log_probs.impl();
    return detail::make_op_output<T>(
        Shape{1}, std::vector<T>{loss}, {log_probs},
        [li, labels, batch, classes](TensorImpl<T>& o) {
            if (T* g = li->grad_sink()) {
                const T up = o.grad[0] / static_cast<T>(batch);
                for (std::size_t i = 0; i < batch; ++i)
                    g[i * classes + static_cast<std::size_t>(labels[i])] -= up;
            }
        });
}

// Numerically stable binary cross-entropy on raw logits:
//   mean of max(z,0) - z*y + log(1 + exp(-|z|)).
template <typename T>
Tensor<T> binary_sigmoid_nll(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 1)
        throw ShapeError("binary_sigmoid_nll: expected [B] logits, got " +
                         shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0);
    if (labels.size() != batch)
        throw UsageError("binary_sigmoid_nll: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(batch));
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] != 0 && labels[i] != 1)
            throw DataError("binary_sigmoid_nll: label of sample " + std::to_string(i) +
                            " must be 0 or 1, got " + std::to_string(labels[i]));
    const auto z = logits.values();
    T acc = T(0);
    for (std::size_t i = 0; i < batch; ++i) {
        const T zi = z[i];
        const T y = static_cast<T>(labels[i]);
        acc += std::max(zi, T(0)) - zi * y + std::log1p(std::exp(-std::abs(zi)));
    }
    const T loss = acc / static_cast<T>(batch);
    auto li = logits.impl();
    return detail::make_op_output<T>(
        Shape{1}, std::vector<T>{loss}, {logits}, [li, labels, batch](TensorImpl<T>& o) {
            if (T* g = li->grad_sink()) {
                const T up = o.grad[0] / static_cast<T>(batch);
                for (std::size_t i = 0; i < batch; ++i) {
                    const T zi = li->values[i];
                    T s;
                    if (zi >= T(0)) {
                        s = T(1) / (T(1) + std::exp(-zi));
                    } else {
                        const T e = std::exp(zi);
                        s = e / (T(1) + e);
                    }
                    g[i] += up * (s - static_cast<T>(labels[i]));
                }
            }
        });
}

} // namespace fusenet
