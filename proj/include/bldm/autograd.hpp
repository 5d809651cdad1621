#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor<T>.
//
// Every op returns a Var holding its value plus, when gradients are enabled and
// at least one input requires them, a closure that accumulates into the inputs'
// gradients. backward() walks the graph in reverse topological order.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "bldm/tensor.hpp"

namespace bldm::ag {

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool previous;
    NoGradGuard() : previous(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = previous; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape);
        return grad;
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    Tensor<T>& grad() const { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }
    const Shape& shape() const { return node_->value.shape; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    void zero_grad() {
        if (has_grad()) node_->grad.fill(T(0));
    }
    T item() const { return node_->value.data.at(0); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> t) {
    return Var<T>(std::move(t), false);
}

template <class T>
Var<T> parameter(Tensor<T> t) {
    return Var<T>(std::move(t), true);
}

namespace detail {

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (grad_enabled()) {
        for (const auto& in : inputs) {
            if (in.requires_grad()) {
                node->requires_grad = true;
                break;
            }
        }
        if (node->requires_grad) {
            for (auto& in : inputs) node->parents.push_back(in.node());
            node->backward_fn = std::move(fn);
        }
    }
    return Var<T>::from_node(std::move(node));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

}  // namespace detail

// Accumulates d(root)/d(x) into every reachable x that requires grad.
template <class T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    out += b.value();
    return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        if (a.requires_grad()) a.grad() += n.grad;
        if (b.requires_grad()) b.grad() += n.grad;
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.value().data[i];
    return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        if (a.requires_grad()) a.grad() += n.grad;
        if (b.requires_grad()) {
            auto& g = b.grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] -= n.grad.data[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.value().data[i];
    return detail::make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        if (a.requires_grad()) {
            auto& g = a.grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * b.value().data[i];
        }
        if (b.requires_grad()) {
            auto& g = b.grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * a.value().data[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= s;
    return detail::make_result<T>(std::move(out), {a}, [a, s](Node<T>& n) mutable {
        auto& g = a.grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += s * n.grad.data[i];
    });
}

template <class T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
    return detail::make_result<T>(std::move(out), {a}, [a](Node<T>& n) mutable {
        auto& g = a.grad();
        const auto& x = a.value().data;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            T s = T(1) / (T(1) + std::exp(-x[i]));
            g.data[i] += n.grad.data[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2)) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = v > 0 ? v : slope * v;
    return detail::make_result<T>(std::move(out), {a}, [a, slope](Node<T>& n) mutable {
        auto& g = a.grad();
        const auto& x = a.value().data;
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * (x[i] > 0 ? T(1) : slope);
    });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::tanh(v);
    return detail::make_result<T>(out, {a}, [a, out](Node<T>& n) mutable {
        auto& g = a.grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * (T(1) - out.data[i] * out.data[i]);
    });
}

// Clamps values into [lo, hi]; gradient is zero where the clamp is active.
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return detail::make_result<T>(std::move(out), {a}, [a, lo, hi](Node<T>& n) mutable {
        auto& g = a.grad();
        const auto& x = a.value().data;
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (x[i] >= lo && x[i] <= hi) g.data[i] += n.grad.data[i];
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return detail::make_result<T>(std::move(out), {a}, [a](Node<T>& n) mutable { a.grad() += n.grad; });
}

template <class T>
Var<T> detach(const Var<T>& a) {
    return constant(a.value());
}

// ------------------------------------------------------------------ reductions

template <class T>
Var<T> mean(const Var<T>& a) {
    T s = 0;
    for (T v : a.value().data) s += v;
    const T inv = T(1) / static_cast<T>(a.value().numel());
    return detail::make_result<T>(Tensor<T>({1}, s * inv), {a}, [a, inv](Node<T>& n) mutable {
        auto& g = a.grad();
        const T go = n.grad.data[0] * inv;
        for (auto& v : g.data) v += go;
    });
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "mse");
    const auto& x = a.value().data;
    const auto& y = b.value().data;
    T s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    const T inv = T(1) / static_cast<T>(x.size());
    return detail::make_result<T>(Tensor<T>({1}, s * inv), {a, b}, [a, b, inv](Node<T>& n) mutable {
        const T go = T(2) * inv * n.grad.data[0];
        const auto& x = a.value().data;
        const auto& y = b.value().data;
        if (a.requires_grad()) {
            auto& g = a.grad();
            for (std::size_t i = 0; i < x.size(); ++i) g.data[i] += go * (x[i] - y[i]);
        }
        if (b.requires_grad()) {
            auto& g = b.grad();
            for (std::size_t i = 0; i < x.size(); ++i) g.data[i] -= go * (x[i] - y[i]);
        }
    });
}

// Mean absolute difference.
template <class T>
Var<T> l1(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "l1");
    const auto& x = a.value().data;
    const auto& y = b.value().data;
    T s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
    const T inv = T(1) / static_cast<T>(x.size());
    return detail::make_result<T>(Tensor<T>({1}, s * inv), {a, b}, [a, b, inv](Node<T>& n) mutable {
        const T go = inv * n.grad.data[0];
        const auto& x = a.value().data;
        const auto& y = b.value().data;
        auto sgn = [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); };
        if (a.requires_grad()) {
            auto& g = a.grad();
            for (std::size_t i = 0; i < x.size(); ++i) g.data[i] += go * sgn(x[i] - y[i]);
        }
        if (b.requires_grad()) {
            auto& g = b.grad();
            for (std::size_t i = 0; i < x.size(); ++i) g.data[i] -= go * sgn(x[i] - y[i]);
        }
    });
}

// Mean of (a - target)^2 against a constant scalar target.
template <class T>
Var<T> mse_to_scalar(const Var<T>& a, T target) {
    Tensor<T> t(a.shape(), target);
    return mse(a, constant(std::move(t)));
}

// Sum of scalars with weights; skips zero weights.
template <class T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
    T s = 0;
    std::vector<Var<T>> inputs;
    for (const auto& [w, v] : terms) {
        s += w * v.item();
        inputs.push_back(v);
    }
    return detail::make_result<T>(Tensor<T>({1}, s), inputs, [terms](Node<T>& n) mutable {
        for (auto& [w, v] : terms)
            if (v.requires_grad() && w != T(0)) v.grad().data[0] += w * n.grad.data[0];
    });
}

// [N, C, ...] -> [N, C], mean over trailing spatial dims.
template <class T>
Var<T> spatial_mean(const Var<T>& x) {
    const int N = x.value().dim(0), C = x.value().dim(1);
    const std::size_t S = x.value().inner(2);
    Tensor<T> out({N, C});
    for (int i = 0; i < N * C; ++i) {
        T s = 0;
        const T* p = x.value().ptr() + i * S;
        for (std::size_t k = 0; k < S; ++k) s += p[k];
        out.data[i] = s / static_cast<T>(S);
    }
    return detail::make_result<T>(std::move(out), {x}, [x, N, C, S](Node<T>& n) mutable {
        auto& g = x.grad();
        for (int i = 0; i < N * C; ++i) {
            const T go = n.grad.data[i] / static_cast<T>(S);
            T* p = g.ptr() + i * S;
            for (std::size_t k = 0; k < S; ++k) p[k] += go;
        }
    });
}

// Mean softmax cross-entropy of logits [N, K] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const int N = logits.value().dim(0), K = logits.value().dim(1);
    if (static_cast<int>(labels.size()) != N) throw std::invalid_argument("cross_entropy: label count mismatch");
    Tensor<T> prob({N, K});
    T loss = 0;
    for (int i = 0; i < N; ++i) {
        const T* z = logits.value().ptr() + i * K;
        T m = *std::max_element(z, z + K);
        T s = 0;
        for (int k = 0; k < K; ++k) s += std::exp(z[k] - m);
        for (int k = 0; k < K; ++k) prob.data[i * K + k] = std::exp(z[k] - m) / s;
        loss += -(z[labels[i]] - m - std::log(s));
    }
    return detail::make_result<T>(Tensor<T>({1}, loss / N), {logits},
                                  [logits, prob, labels, N, K](Node<T>& n) mutable {
                                      auto& g = logits.grad();
                                      const T go = n.grad.data[0] / N;
                                      for (int i = 0; i < N; ++i)
                                          for (int k = 0; k < K; ++k)
                                              g.data[i * K + k] +=
                                                  go * (prob.data[i * K + k] - (k == labels[i] ? T(1) : T(0)));
                                  });
}

// ------------------------------------------------------------- linear algebra

// x [..., in] times W^T [in, out] plus b [out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const int in = x.value().dim(-1);
    const int out_dim = w.value().dim(0);
    if (w.value().dim(1) != in)
        throw std::invalid_argument("linear: input dim " + std::to_string(in) + " vs weight " +
                                    shape_str(w.shape()));
    const int M = static_cast<int>(x.value().numel() / in);
    Shape os = x.shape();
    os.back() = out_dim;
    Tensor<T> out(os);
    detail::MapMat<T> Y(out.ptr(), M, out_dim);
    detail::CMapMat<T> X(x.value().ptr(), M, in);
    detail::CMapMat<T> W(w.value().ptr(), out_dim, in);
    Y.noalias() = X * W.transpose();
    if (b.defined())
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < out_dim; ++j) out.data[i * out_dim + j] += b.value().data[j];
    return detail::make_result<T>(std::move(out), {x, w, b.defined() ? b : constant(Tensor<T>({1}))},
                                  [x, w, b, M, in, out_dim](Node<T>& n) mutable {
                                      detail::CMapMat<T> G(n.grad.ptr(), M, out_dim);
                                      if (x.requires_grad()) {
                                          detail::MapMat<T> GX(x.grad().ptr(), M, in);
                                          detail::CMapMat<T> W(w.value().ptr(), out_dim, in);
                                          GX.noalias() += G * W;
                                      }
                                      if (w.requires_grad()) {
                                          detail::MapMat<T> GW(w.grad().ptr(), out_dim, in);
                                          detail::CMapMat<T> X(x.value().ptr(), M, in);
                                          GW.noalias() += G.transpose() * X;
                                      }
                                      if (b.defined() && b.requires_grad()) {
                                          auto& gb = b.grad();
                                          for (int i = 0; i < M; ++i)
                                              for (int j = 0; j < out_dim; ++j)
                                                  gb.data[j] += n.grad.data[i * out_dim + j];
                                      }
                                  });
}

// Batched matmul: a [B, P, Q] x b [B, Q, R] -> [B, P, R].
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    const int B = a.value().dim(0), P = a.value().dim(1), Q = a.value().dim(2);
    const int R = b.value().dim(2);
    if (b.value().dim(0) != B || b.value().dim(1) != Q)
        throw std::invalid_argument("bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> out({B, P, R});
    for (int i = 0; i < B; ++i) {
        detail::MapMat<T> Y(out.ptr() + i * P * R, P, R);
        Y.noalias() = detail::CMapMat<T>(a.value().ptr() + i * P * Q, P, Q) *
                      detail::CMapMat<T>(b.value().ptr() + i * Q * R, Q, R);
    }
    return detail::make_result<T>(std::move(out), {a, b}, [a, b, B, P, Q, R](Node<T>& n) mutable {
        for (int i = 0; i < B; ++i) {
            detail::CMapMat<T> G(n.grad.ptr() + i * P * R, P, R);
            if (a.requires_grad()) {
                detail::MapMat<T> GA(a.grad().ptr() + i * P * Q, P, Q);
                GA.noalias() += G * detail::CMapMat<T>(b.value().ptr() + i * Q * R, Q, R).transpose();
            }
            if (b.requires_grad()) {
                detail::MapMat<T> GB(b.grad().ptr() + i * Q * R, Q, R);
                GB.noalias() += detail::CMapMat<T>(a.value().ptr() + i * P * Q, P, Q).transpose() * G;
            }
        }
    });
}

// [B, P, Q] -> [B, Q, P]
template <class T>
Var<T> transpose12(const Var<T>& a) {
    const int B = a.value().dim(0), P = a.value().dim(1), Q = a.value().dim(2);
    Tensor<T> out({B, Q, P});
    for (int i = 0; i < B; ++i)
        for (int p = 0; p < P; ++p)
            for (int q = 0; q < Q; ++q) out.data[(i * Q + q) * P + p] = a.value().data[(i * P + p) * Q + q];
    return detail::make_result<T>(std::move(out), {a}, [a, B, P, Q](Node<T>& n) mutable {
        auto& g = a.grad();
        for (int i = 0; i < B; ++i)
            for (int p = 0; p < P; ++p)
                for (int q = 0; q < Q; ++q) g.data[(i * P + p) * Q + q] += n.grad.data[(i * Q + q) * P + p];
    });
}

// Softmax over the last axis.
template <class T>
Var<T> softmax(const Var<T>& a) {
    const int K = a.value().dim(-1);
    const std::size_t rows = a.value().numel() / K;
    Tensor<T> out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* z = a.value().ptr() + r * K;
        T* y = out.ptr() + r * K;
        T m = *std::max_element(z, z + K);
        T s = 0;
        for (int k = 0; k < K; ++k) s += (y[k] = std::exp(z[k] - m));
        for (int k = 0; k < K; ++k) y[k] /= s;
    }
    return detail::make_result<T>(out, {a}, [a, out, K, rows](Node<T>& n) mutable {
        auto& g = a.grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = out.ptr() + r * K;
            const T* gy = n.grad.ptr() + r * K;
            T dot = 0;
            for (int k = 0; k < K; ++k) dot += gy[k] * y[k];
            for (int k = 0; k < K; ++k) g.data[r * K + k] += y[k] * (gy[k] - dot);
        }
    });
}

// ------------------------------------------------------------ channel helpers

// x [N, C, ...] plus per-(item, channel) offset e [N, C].
template <class T>
Var<T> add_channel_offset(const Var<T>& x, const Var<T>& e) {
    const int N = x.value().dim(0), C = x.value().dim(1);
    if (e.value().numel() != static_cast<std::size_t>(N * C))
        throw std::invalid_argument("add_channel_offset: offset " + shape_str(e.shape()) + " vs " +
                                    shape_str(x.shape()));
    const std::size_t S = x.value().inner(2);
    Tensor<T> out = x.value();
    for (int i = 0; i < N * C; ++i)
        for (std::size_t k = 0; k < S; ++k) out.data[i * S + k] += e.value().data[i];
    return detail::make_result<T>(std::move(out), {x, e}, [x, e, N, C, S](Node<T>& n) mutable {
        if (x.requires_grad()) x.grad() += n.grad;
        if (e.requires_grad()) {
            auto& g = e.grad();
            for (int i = 0; i < N * C; ++i) {
                T s = 0;
                for (std::size_t k = 0; k < S; ++k) s += n.grad.data[i * S + k];
                g.data[i] += s;
            }
        }
    });
}

// Concatenate along the channel axis: [N, Ca, S] ++ [N, Cb, S].
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const int N = a.value().dim(0), Ca = a.value().dim(1), Cb = b.value().dim(1);
    const std::size_t S = a.value().inner(2);
    if (b.value().dim(0) != N || b.value().inner(2) != S)
        throw std::invalid_argument("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Shape os = a.shape();
    os[1] = Ca + Cb;
    Tensor<T> out(os);
    for (int i = 0; i < N; ++i) {
        std::copy_n(a.value().ptr() + i * Ca * S, Ca * S, out.ptr() + i * (Ca + Cb) * S);
        std::copy_n(b.value().ptr() + i * Cb * S, Cb * S, out.ptr() + (i * (Ca + Cb) + Ca) * S);
    }
    return detail::make_result<T>(std::move(out), {a, b}, [a, b, N, Ca, Cb, S](Node<T>& n) mutable {
        for (int i = 0; i < N; ++i) {
            const T* g = n.grad.ptr() + i * (Ca + Cb) * S;
            if (a.requires_grad()) {
                T* ga = a.grad().ptr() + i * Ca * S;
                for (std::size_t k = 0; k < Ca * S; ++k) ga[k] += g[k];
            }
            if (b.requires_grad()) {
                T* gb = b.grad().ptr() + i * Cb * S;
                for (std::size_t k = 0; k < Cb * S; ++k) gb[k] += g[Ca * S + k];
            }
        }
    });
}

// Splits channels [0, k) and [k, C) of x [N, C, ...].
template <class T>
std::pair<Var<T>, Var<T>> split_channels(const Var<T>& x, int k) {
    const int N = x.value().dim(0), C = x.value().dim(1);
    const std::size_t S = x.value().inner(2);
    auto part = [&](int c0, int c1) {
        Shape os = x.shape();
        os[1] = c1 - c0;
        Tensor<T> out(os);
        for (int i = 0; i < N; ++i)
            std::copy_n(x.value().ptr() + (i * C + c0) * S, (c1 - c0) * S, out.ptr() + i * (c1 - c0) * S);
        return detail::make_result<T>(std::move(out), {x}, [x, N, C, S, c0, c1](Node<T>& n) mutable {
            auto& g = x.grad();
            for (int i = 0; i < N; ++i)
                for (std::size_t j = 0; j < (c1 - c0) * S; ++j)
                    g.data[(i * C + c0) * S + j] += n.grad.data[i * (c1 - c0) * S + j];
        });
    };
    return {part(0, k), part(k, C)};
}

// Extracts the plane at `index` along spatial `axis` (0=D, 1=H, 2=W) of
// x [N, C, D, H, W] as [N, C, 1, A, B].
template <class T>
Var<T> extract_plane(const Var<T>& x, int axis, int index) {
    const auto& s = x.shape();
    const int N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    int A = 0, B = 0;
    if (axis == 0) A = H, B = W;
    else if (axis == 1) A = D, B = W;
    else A = D, B = H;
    auto src = [=](int nc, int a, int b) -> std::size_t {
        std::size_t base = static_cast<std::size_t>(nc) * D * H * W;
        if (axis == 0) return base + (static_cast<std::size_t>(index) * H + a) * W + b;
        if (axis == 1) return base + (static_cast<std::size_t>(a) * H + index) * W + b;
        return base + (static_cast<std::size_t>(a) * H + b) * W + index;
    };
    Tensor<T> out({N, C, 1, A, B});
    for (int nc = 0; nc < N * C; ++nc)
        for (int a = 0; a < A; ++a)
            for (int b = 0; b < B; ++b) out.data[(static_cast<std::size_t>(nc) * A + a) * B + b] = x.value().data[src(nc, a, b)];
    return detail::make_result<T>(std::move(out), {x}, [x, N, C, A, B, src](Node<T>& n) mutable {
        auto& g = x.grad();
        for (int nc = 0; nc < N * C; ++nc)
            for (int a = 0; a < A; ++a)
                for (int b = 0; b < B; ++b)
                    g.data[src(nc, a, b)] += n.grad.data[(static_cast<std::size_t>(nc) * A + a) * B + b];
    });
}

// -------------------------------------------------------------- convolution

struct ConvGeometry {
    int kd, kh, kw;
    int stride;
    int pd, ph, pw;
    int D, H, W;
    int Do, Ho, Wo;

    static ConvGeometry make(const Shape& in, const Shape& weight, int stride) {
        ConvGeometry g{};
        g.kd = weight[2], g.kh = weight[3], g.kw = weight[4];
        g.stride = stride;
        g.pd = g.kd / 2, g.ph = g.kh / 2, g.pw = g.kw / 2;
        g.D = in[2], g.H = in[3], g.W = in[4];
        g.Do = (g.D + 2 * g.pd - g.kd) / stride + 1;
        g.Ho = (g.H + 2 * g.ph - g.kh) / stride + 1;
        g.Wo = (g.W + 2 * g.pw - g.kw) / stride + 1;
        return g;
    }
    std::size_t out_spatial() const { return static_cast<std::size_t>(Do) * Ho * Wo; }
    std::size_t in_spatial() const { return static_cast<std::size_t>(D) * H * W; }
    int taps() const { return kd * kh * kw; }
};

namespace detail {

// col[(c, tap), n * So + o] for items [n0, n0 + count).
template <class T>
void im2col(const T* x, int Cin, const ConvGeometry& g, int count, T* col) {
    const std::size_t So = g.out_spatial(), Si = g.in_spatial();
    const std::size_t ld = So * count;
    for (int c = 0; c < Cin; ++c)
        for (int a = 0; a < g.kd; ++a)
            for (int b = 0; b < g.kh; ++b)
                for (int e = 0; e < g.kw; ++e) {
                    const std::size_t row = ((static_cast<std::size_t>(c) * g.kd + a) * g.kh + b) * g.kw + e;
                    T* dst_row = col + row * ld;
                    for (int n = 0; n < count; ++n) {
                        const T* src = x + (static_cast<std::size_t>(n) * Cin + c) * Si;
                        T* dst = dst_row + n * So;
                        for (int oz = 0; oz < g.Do; ++oz) {
                            const int iz = oz * g.stride - g.pd + a;
                            for (int oy = 0; oy < g.Ho; ++oy) {
                                const int iy = oy * g.stride - g.ph + b;
                                T* d = dst + (static_cast<std::size_t>(oz) * g.Ho + oy) * g.Wo;
                                if (iz < 0 || iz >= g.D || iy < 0 || iy >= g.H) {
                                    std::fill_n(d, g.Wo, T(0));
                                    continue;
                                }
                                const T* s = src + (static_cast<std::size_t>(iz) * g.H + iy) * g.W;
                                for (int ox = 0; ox < g.Wo; ++ox) {
                                    const int ix = ox * g.stride - g.pw + e;
                                    d[ox] = (ix >= 0 && ix < g.W) ? s[ix] : T(0);
                                }
                            }
                        }
                    }
                }
}

template <class T>
void col2im(const T* col, int Cin, const ConvGeometry& g, int count, T* dx) {
    const std::size_t So = g.out_spatial(), Si = g.in_spatial();
    const std::size_t ld = So * count;
    for (int c = 0; c < Cin; ++c)
        for (int a = 0; a < g.kd; ++a)
            for (int b = 0; b < g.kh; ++b)
                for (int e = 0; e < g.kw; ++e) {
                    const std::size_t row = ((static_cast<std::size_t>(c) * g.kd + a) * g.kh + b) * g.kw + e;
                    const T* src_row = col + row * ld;
                    for (int n = 0; n < count; ++n) {
                        T* dst = dx + (static_cast<std::size_t>(n) * Cin + c) * Si;
                        const T* src = src_row + n * So;
                        for (int oz = 0; oz < g.Do; ++oz) {
                            const int iz = oz * g.stride - g.pd + a;
                            if (iz < 0 || iz >= g.D) continue;
                            for (int oy = 0; oy < g.Ho; ++oy) {
                                const int iy = oy * g.stride - g.ph + b;
                                if (iy < 0 || iy >= g.H) continue;
                                const T* s = src + (static_cast<std::size_t>(oz) * g.Ho + oy) * g.Wo;
                                T* d = dst + (static_cast<std::size_t>(iz) * g.H + iy) * g.W;
                                for (int ox = 0; ox < g.Wo; ++ox) {
                                    const int ix = ox * g.stride - g.pw + e;
                                    if (ix >= 0 && ix < g.W) d[ix] += s[ox];
                                }
                            }
                        }
                    }
                }
}

inline int conv_chunk(std::size_t rows, std::size_t so, int batch) {
    constexpr std::size_t budget = std::size_t(1) << 24;  // elements per im2col buffer
    const std::size_t per_item = rows * so;
    return static_cast<int>(std::clamp<std::size_t>(budget / std::max<std::size_t>(per_item, 1), 1, batch));
}

}  // namespace detail

// 3D convolution with "same"-style padding k/2 per axis.
// x [N, Cin, D, H, W], w [Cout, Cin, kd, kh, kw], b [Cout] (may be undefined).
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 5 || ws.size() != 5 || xs[1] != ws[1])
        throw std::invalid_argument("conv3d: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
    const int N = xs[0], Cin = xs[1], Cout = ws[0];
    const auto g = ConvGeometry::make(xs, ws, stride);
    const std::size_t So = g.out_spatial(), Si = g.in_spatial();
    const std::size_t K = static_cast<std::size_t>(Cin) * g.taps();
    const int chunk = detail::conv_chunk(K, So, N);

    Tensor<T> out({N, Cout, g.Do, g.Ho, g.Wo});
    std::vector<T> col(K * So * chunk), y(static_cast<std::size_t>(Cout) * So * chunk);
    detail::CMapMat<T> Wm(w.value().ptr(), Cout, K);
    for (int n0 = 0; n0 < N; n0 += chunk) {
        const int cnt = std::min(chunk, N - n0);
        detail::im2col(x.value().ptr() + n0 * Cin * Si, Cin, g, cnt, col.data());
        detail::MapMat<T> Y(y.data(), Cout, So * cnt);
        Y.noalias() = Wm * detail::CMapMat<T>(col.data(), K, So * cnt);
        for (int n = 0; n < cnt; ++n)
            for (int co = 0; co < Cout; ++co) {
                T bias = b.defined() ? b.value().data[co] : T(0);
                const T* src = y.data() + co * So * cnt + n * So;
                T* dst = out.ptr() + ((n0 + n) * Cout + co) * So;
                for (std::size_t k = 0; k < So; ++k) dst[k] = src[k] + bias;
            }
    }
    return detail::make_result<T>(
        std::move(out), {x, w, b.defined() ? b : constant(Tensor<T>({1}))},
        [x, w, b, g, N, Cin, Cout, So, Si, K, chunk](Node<T>& node) mutable {
            std::vector<T> col(K * So * chunk), gy(static_cast<std::size_t>(Cout) * So * chunk);
            for (int n0 = 0; n0 < N; n0 += chunk) {
                const int cnt = std::min(chunk, N - n0);
                for (int n = 0; n < cnt; ++n)
                    for (int co = 0; co < Cout; ++co)
                        std::copy_n(node.grad.ptr() + ((n0 + n) * Cout + co) * So, So,
                                    gy.data() + co * So * cnt + n * So);
                detail::CMapMat<T> GY(gy.data(), Cout, So * cnt);
                if (w.requires_grad()) {
                    detail::im2col(x.value().ptr() + n0 * Cin * Si, Cin, g, cnt, col.data());
                    detail::MapMat<T> GW(w.grad().ptr(), Cout, K);
                    GW.noalias() += GY * detail::CMapMat<T>(col.data(), K, So * cnt).transpose();
                }
                if (x.requires_grad()) {
                    detail::MapMat<T> GC(col.data(), K, So * cnt);
                    GC.noalias() = detail::CMapMat<T>(w.value().ptr(), Cout, K).transpose() * GY;
                    detail::col2im(col.data(), Cin, g, cnt, x.grad().ptr() + n0 * Cin * Si);
                }
            }
            if (b.defined() && b.requires_grad()) {
                auto& gb = b.grad();
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Cout; ++co) {
                        const T* src = node.grad.ptr() + (n * Cout + co) * So;
                        T s = 0;
                        for (std::size_t k = 0; k < So; ++k) s += src[k];
                        gb.data[co] += s;
                    }
            }
        });
}

// Nearest-neighbour upsampling by 2 on every spatial axis.
template <class T>
Var<T> upsample2(const Var<T>& x) {
    const auto& s = x.shape();
    const int NC = s[0] * s[1], D = s[2], H = s[3], W = s[4];
    Tensor<T> out({s[0], s[1], 2 * D, 2 * H, 2 * W});
    for (int nc = 0; nc < NC; ++nc)
        for (int z = 0; z < 2 * D; ++z)
            for (int y = 0; y < 2 * H; ++y) {
                const T* src = x.value().ptr() + ((static_cast<std::size_t>(nc) * D + z / 2) * H + y / 2) * W;
                T* dst = out.ptr() + ((static_cast<std::size_t>(nc) * 2 * D + z) * 2 * H + y) * 2 * W;
                for (int xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
            }
    return detail::make_result<T>(std::move(out), {x}, [x, NC, D, H, W](Node<T>& n) mutable {
        auto& g = x.grad();
        for (int nc = 0; nc < NC; ++nc)
            for (int z = 0; z < 2 * D; ++z)
                for (int y = 0; y < 2 * H; ++y) {
                    T* dst = g.ptr() + ((static_cast<std::size_t>(nc) * D + z / 2) * H + y / 2) * W;
                    const T* src = n.grad.ptr() + ((static_cast<std::size_t>(nc) * 2 * D + z) * 2 * H + y) * 2 * W;
                    for (int xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
                }
    });
}

// Group normalisation over x [N, C, ...] with per-channel affine gamma/beta [C].
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
    const int N = x.value().dim(0), C = x.value().dim(1);
    if (C % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const std::size_t S = x.value().inner(2);
    const int cg = C / groups;
    const std::size_t M = static_cast<std::size_t>(cg) * S;
    Tensor<T> out(x.shape()), xhat(x.shape());
    std::vector<T> rstd(static_cast<std::size_t>(N) * groups);
    for (int n = 0; n < N; ++n)
        for (int gi = 0; gi < groups; ++gi) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + gi * cg) * S;
            const T* p = x.value().ptr() + base;
            T mu = 0;
            for (std::size_t k = 0; k < M; ++k) mu += p[k];
            mu /= static_cast<T>(M);
            T var = 0;
            for (std::size_t k = 0; k < M; ++k) var += (p[k] - mu) * (p[k] - mu);
            var /= static_cast<T>(M);
            const T r = T(1) / std::sqrt(var + eps);
            rstd[n * groups + gi] = r;
            for (int c = 0; c < cg; ++c) {
                const int ch = gi * cg + c;
                for (std::size_t k = 0; k < S; ++k) {
                    const std::size_t idx = base + c * S + k;
                    xhat.data[idx] = (x.value().data[idx] - mu) * r;
                    out.data[idx] = xhat.data[idx] * gamma.value().data[ch] + beta.value().data[ch];
                }
            }
        }
    return detail::make_result<T>(
        std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, N, C, S, groups, cg, M](Node<T>& node) mutable {
            const auto& gy = node.grad.data;
            if (gamma.requires_grad() || beta.requires_grad()) {
                auto& gg = gamma.grad();
                auto& gb = beta.grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c)
                        for (std::size_t k = 0; k < S; ++k) {
                            const std::size_t idx = (static_cast<std::size_t>(n) * C + c) * S + k;
                            gg.data[c] += gy[idx] * xhat.data[idx];
                            gb.data[c] += gy[idx];
                        }
            }
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            for (int n = 0; n < N; ++n)
                for (int gi = 0; gi < groups; ++gi) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + gi * cg) * S;
                    T sum_d = 0, sum_dx = 0;
                    for (int c = 0; c < cg; ++c) {
                        const T gam = gamma.value().data[gi * cg + c];
                        for (std::size_t k = 0; k < S; ++k) {
                            const std::size_t idx = base + c * S + k;
                            const T d = gy[idx] * gam;
                            sum_d += d;
                            sum_dx += d * xhat.data[idx];
                        }
                    }
                    const T r = rstd[n * groups + gi];
                    const T invM = T(1) / static_cast<T>(M);
                    for (int c = 0; c < cg; ++c) {
                        const T gam = gamma.value().data[gi * cg + c];
                        for (std::size_t k = 0; k < S; ++k) {
                            const std::size_t idx = base + c * S + k;
                            const T d = gy[idx] * gam;
                            gx.data[idx] += r * (d - invM * sum_d - xhat.data[idx] * invM * sum_dx);
                        }
                    }
                }
        });
}

// ----------------------------------------------------- variational helpers

// mean + exp(logvar / 2) * eps, elementwise.
template <class T>
Var<T> reparameterize(const Var<T>& mean, const Var<T>& logvar, const Tensor<T>& eps) {
    Tensor<T> out = mean.value();
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] += std::exp(T(0.5) * logvar.value().data[i]) * eps.data[i];
    return detail::make_result<T>(std::move(out), {mean, logvar}, [mean, logvar, eps](Node<T>& n) mutable {
        if (mean.requires_grad()) mean.grad() += n.grad;
        if (logvar.requires_grad()) {
            auto& g = logvar.grad();
            for (std::size_t i = 0; i < g.numel(); ++i)
                g.data[i] += n.grad.data[i] * T(0.5) * std::exp(T(0.5) * logvar.value().data[i]) * eps.data[i];
        }
    });
}

// Per-element mean of KL(N(mean, exp(logvar)) || N(0, 1)).
template <class T>
Var<T> kl_standard_normal(const Var<T>& mean, const Var<T>& logvar) {
    const auto& m = mean.value().data;
    const auto& lv = logvar.value().data;
    T s = 0;
    for (std::size_t i = 0; i < m.size(); ++i) s += T(0.5) * (m[i] * m[i] + std::exp(lv[i]) - T(1) - lv[i]);
    const T inv = T(1) / static_cast<T>(m.size());
    return detail::make_result<T>(Tensor<T>({1}, s * inv), {mean, logvar}, [mean, logvar, inv](Node<T>& n) mutable {
        const T go = n.grad.data[0] * inv;
        if (mean.requires_grad()) {
            auto& g = mean.grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += go * mean.value().data[i];
        }
        if (logvar.requires_grad()) {
            auto& g = logvar.grad();
            for (std::size_t i = 0; i < g.numel(); ++i)
                g.data[i] += go * T(0.5) * (std::exp(logvar.value().data[i]) - T(1));
        }
    });
}

}  // namespace bldm::ag
