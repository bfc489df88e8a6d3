#pragma once

// Tape-based reverse-mode autodiff over dense double tensors.
//
// Graphs are built eagerly: each op returns a Var (shared_ptr<Node>) whose
// backward closure accumulates into its parents' grad buffers. Backward
// runs once from a scalar root in reverse topological order. Parameters
// are long-lived leaf Vars; op nodes die with the loss Var, so a fresh
// graph is built (and freed) every training step.
//
// All backward passes are written gather-style where they parallelize, so
// results are identical for any --threads value; scatter-style backwards
// (warp/upsample, in nn_ops.hpp) run serially.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "regseg/tensor.hpp"

namespace regseg {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, feeds parents

    bool has_grad() const { return !grad.v.empty(); }

    void ensure_grad() {
        if (!has_grad()) grad = Tensor::zeros(val.shape);
    }

    void accum(const Tensor& g) {
        if (!requires_grad) return;  // constants and frozen leaves stay grad-free
        ensure_grad();
        const std::int64_t n = grad.numel();
        for (std::int64_t i = 0; i < n; ++i) grad[i] += g[i];
    }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// RAII guard disabling graph construction (inference / validation passes).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    return n;
}

inline Var leaf(Tensor t, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

// Creates an op node; collapses to a plain value node when no gradient can
// flow (grad mode off, or no differentiable parent).
inline Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    bool need = false;
    if (detail::grad_mode()) {
        for (const auto& p : parents)
            if (p->requires_grad) need = true;
    }
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(back);
    }
    return n;
}

// Reverse-mode sweep from a scalar root. Iterative post-order DFS so deep
// graphs (long training pipelines) cannot overflow the call stack.
inline void backward(const Var& root) {
    require(root != nullptr, "backward: null root");
    require(root->val.numel() == 1, "backward: root must be scalar, got shape " + root->val.shape_str());
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    // order is post-order (parents before dependents), so walk it backwards.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

// Releases the buffers rather than filling them with zeros: has_grad() then
// means "received a gradient since the last zero_grad", which is the predicate
// the optimizer and the norm clip key on, so parameters frozen mid-run stop
// moving entirely (no stale-momentum decay from zero-filled gradients).
inline void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) p->grad = Tensor{};
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "add: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor out = a->val;
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] += b->val[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        self.parents[0]->accum(self.grad);
        self.parents[1]->accum(self.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "sub: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor out = a->val;
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] -= b->val[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        self.parents[0]->accum(self.grad);
        Node& b_ = *self.parents[1];
        if (b_.requires_grad) {
            b_.ensure_grad();
            const std::int64_t m = self.grad.numel();
            for (std::int64_t i = 0; i < m; ++i) b_.grad[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "mul: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor out = a->val;
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] *= b->val[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node& a_ = *self.parents[0];
        Node& b_ = *self.parents[1];
        const std::int64_t m = self.grad.numel();
        if (a_.requires_grad) {
            a_.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) a_.grad[i] += self.grad[i] * b_.val[i];
        }
        if (b_.requires_grad) {
            b_.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) b_.grad[i] += self.grad[i] * a_.val[i];
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "div: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor out = a->val;
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] /= b->val[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node& a_ = *self.parents[0];
        Node& b_ = *self.parents[1];
        const std::int64_t m = self.grad.numel();
        if (a_.requires_grad) {
            a_.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) a_.grad[i] += self.grad[i] / b_.val[i];
        }
        if (b_.requires_grad) {
            b_.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                b_.grad[i] -= self.grad[i] * a_.val[i] / (b_.val[i] * b_.val[i]);
        }
    });
}

inline Var neg(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = -x;
    return make_op(std::move(out), {a}, [](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i) a_.grad[i] -= self.grad[i];
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->val;
    for (auto& x : out.v) x *= s;
    return make_op(std::move(out), {a}, [s](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i) a_.grad[i] += self.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a->val;
    for (auto& x : out.v) x += s;
    return make_op(std::move(out), {a}, [](Node& self) { self.parents[0]->accum(self.grad); });
}

inline Var vexp(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::exp(x);
    return make_op(std::move(out), {a}, [](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i) a_.grad[i] += self.grad[i] * self.val[i];
    });
}

inline Var vlog(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::log(x);
    return make_op(std::move(out), {a}, [](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i) a_.grad[i] += self.grad[i] / a_.val[i];
    });
}

// Subgradient 0 at the clamp boundaries.
inline Var clamp(const Var& a, double lo, double hi) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::min(std::max(x, lo), hi);
    return make_op(std::move(out), {a}, [lo, hi](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i)
            if (a_.val[i] > lo && a_.val[i] < hi) a_.grad[i] += self.grad[i];
    });
}

inline Var clamp_min(const Var& a, double lo) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::max(x, lo);
    return make_op(std::move(out), {a}, [lo](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i)
            if (a_.val[i] > lo) a_.grad[i] += self.grad[i];
    });
}

// x^p for x >= 0. p == 0 yields constants (gradient 0); p >= 1 keeps the
// gradient finite at x == 0.
inline Var pow_const(const Var& a, double p) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::pow(x, p);
    return make_op(std::move(out), {a}, [p](Node& self) {
        if (p == 0.0) return;
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i) {
            const double x = a_.val[i];
            const double d = (x == 0.0 && p > 1.0) ? 0.0 : p * std::pow(x, p - 1.0);
            a_.grad[i] += self.grad[i] * d;
        }
    });
}

// Exact (erf-based) GELU; derivative is Phi(x) + x*phi(x).
inline double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_deriv(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    const double Phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    return Phi + x * phi;
}

inline Var gelu(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = gelu_val(x);
    return make_op(std::move(out), {a}, [](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const std::int64_t m = self.grad.numel();
        for (std::int64_t i = 0; i < m; ++i) a_.grad[i] += self.grad[i] * gelu_deriv(a_.val[i]);
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double x : a->val.v) s += x;
    return make_op(Tensor::scalar(s), {a}, [](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const double g = self.grad[0];
        for (auto& x : a_.grad.v) x += g;
    });
}

inline Var mean(const Var& a) {
    const std::int64_t n = a->val.numel();
    require(n > 0, "mean: empty tensor");
    double s = 0.0;
    for (double x : a->val.v) s += x;
    return make_op(Tensor::scalar(s / static_cast<double>(n)), {a}, [n](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (auto& x : a_.grad.v) x += g;
    });
}

// [C, ...spatial] -> [C]: sum over everything but the leading axis.
inline Var sum_per_channel(const Var& a) {
    require(a->val.shape.size() >= 2, "sum_per_channel: need at least 2 dims, got " + a->val.shape_str());
    const std::int64_t C = a->val.shape[0];
    const std::int64_t S = a->val.numel() / C;
    Tensor out({C});
    for (std::int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        const double* p = a->val.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) s += p[i];
        out[c] = s;
    }
    return make_op(std::move(out), {a}, [C, S](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        for (std::int64_t c = 0; c < C; ++c) {
            const double g = self.grad[c];
            double* p = a_.grad.data() + c * S;
            for (std::int64_t i = 0; i < S; ++i) p[i] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Softmax over the leading (channel) axis of a [C, ...spatial] tensor,
// independently at each spatial location.
inline Var softmax_channels(const Var& a) {
    require(a->val.shape.size() >= 2, "softmax_channels: need at least 2 dims");
    const std::int64_t C = a->val.shape[0];
    const std::int64_t S = a->val.numel() / C;
    Tensor out = a->val;
    for (std::int64_t i = 0; i < S; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, out[c * S + i]);
        double z = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            const double e = std::exp(out[c * S + i] - mx);
            out[c * S + i] = e;
            z += e;
        }
        for (std::int64_t c = 0; c < C; ++c) out[c * S + i] /= z;
    }
    return make_op(std::move(out), {a}, [C, S](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        for (std::int64_t i = 0; i < S; ++i) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < C; ++c) dot += self.grad[c * S + i] * self.val[c * S + i];
            for (std::int64_t c = 0; c < C; ++c)
                a_.grad[c * S + i] += self.val[c * S + i] * (self.grad[c * S + i] - dot);
        }
    });
}

// Row-wise softmax over the last axis of a [N, M] tensor (or a 1-D [M]
// tensor treated as one row).
inline Var softmax_rows(const Var& a) {
    const auto& sh = a->val.shape;
    require(sh.size() == 1 || sh.size() == 2, "softmax_rows: need 1-D or 2-D tensor");
    const std::int64_t N = sh.size() == 2 ? sh[0] : 1;
    const std::int64_t M = sh.size() == 2 ? sh[1] : sh[0];
    Tensor out = a->val;
    for (std::int64_t r = 0; r < N; ++r) {
        double* row = out.data() + r * M;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < M; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < M; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::int64_t j = 0; j < M; ++j) row[j] /= z;
    }
    return make_op(std::move(out), {a}, [N, M](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        for (std::int64_t r = 0; r < N; ++r) {
            const double* y = self.val.data() + r * M;
            const double* g = self.grad.data() + r * M;
            double* da = a_.grad.data() + r * M;
            double dot = 0.0;
            for (std::int64_t j = 0; j < M; ++j) dot += g[j] * y[j];
            for (std::int64_t j = 0; j < M; ++j) da[j] += y[j] * (g[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Dense linear algebra ([N,K]x[K,M] etc.); ikj loops keep the inner stride 1.
// ---------------------------------------------------------------------------

namespace mm {
// C += A(NxK) * B(KxM)
inline void nn(const double* A, const double* B, double* C, std::int64_t N, std::int64_t K, std::int64_t M) {
    parallel_for(N, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            double* c = C + i * M;
            const double* a = A + i * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const double av = a[k];
                const double* b = B + k * M;
                for (std::int64_t j = 0; j < M; ++j) c[j] += av * b[j];
            }
        }
    });
}
// C += A(NxK) * B(MxK)^T
inline void nt(const double* A, const double* B, double* C, std::int64_t N, std::int64_t K, std::int64_t M) {
    parallel_for(N, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* a = A + i * K;
            double* c = C + i * M;
            for (std::int64_t j = 0; j < M; ++j) {
                const double* b = B + j * K;
                double s = 0.0;
                for (std::int64_t k = 0; k < K; ++k) s += a[k] * b[k];
                c[j] += s;
            }
        }
    });
}
// C += A(KxN)^T * B(KxM)
inline void tn(const double* A, const double* B, double* C, std::int64_t N, std::int64_t K, std::int64_t M) {
    parallel_for(N, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            double* c = C + i * M;
            for (std::int64_t k = 0; k < K; ++k) {
                const double av = A[k * N + i];
                const double* b = B + k * M;
                for (std::int64_t j = 0; j < M; ++j) c[j] += av * b[j];
            }
        }
    });
}
}  // namespace mm

inline Var matmul(const Var& a, const Var& b) {
    require(a->val.shape.size() == 2 && b->val.shape.size() == 2, "matmul: need 2-D tensors");
    const std::int64_t N = a->val.shape[0], K = a->val.shape[1], M = b->val.shape[1];
    require(b->val.shape[0] == K,
            "matmul: inner dims differ " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor out({N, M});
    mm::nn(a->val.data(), b->val.data(), out.data(), N, K, M);
    return make_op(std::move(out), {a, b}, [N, K, M](Node& self) {
        Node& a_ = *self.parents[0];
        Node& b_ = *self.parents[1];
        if (a_.requires_grad) {
            a_.ensure_grad();  // dA = G * B^T
            mm::nt(self.grad.data(), b_.val.data(), a_.grad.data(), N, M, K);
        }
        if (b_.requires_grad) {
            b_.ensure_grad();  // dB = A^T * G
            mm::tn(a_.val.data(), self.grad.data(), b_.grad.data(), K, N, M);
        }
    });
}

// a(NxK) * b(MxK)^T without materializing the transpose (attention scores).
inline Var matmul_nt(const Var& a, const Var& b) {
    require(a->val.shape.size() == 2 && b->val.shape.size() == 2, "matmul_nt: need 2-D tensors");
    const std::int64_t N = a->val.shape[0], K = a->val.shape[1], M = b->val.shape[0];
    require(b->val.shape[1] == K,
            "matmul_nt: inner dims differ " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor out({N, M});
    mm::nt(a->val.data(), b->val.data(), out.data(), N, K, M);
    return make_op(std::move(out), {a, b}, [N, K, M](Node& self) {
        Node& a_ = *self.parents[0];
        Node& b_ = *self.parents[1];
        if (a_.requires_grad) {
            a_.ensure_grad();  // dA = G * B
            mm::nn(self.grad.data(), b_.val.data(), a_.grad.data(), N, M, K);
        }
        if (b_.requires_grad) {
            b_.ensure_grad();  // dB = G^T * A
            mm::tn(self.grad.data(), a_.val.data(), b_.grad.data(), M, N, K);
        }
    });
}

// x(NxK) * W(KxM) + b(M)
inline Var linear(const Var& x, const Var& w, const Var& b) {
    require(x->val.shape.size() == 2 && w->val.shape.size() == 2 && b->val.shape.size() == 1,
            "linear: expected x[N,K], w[K,M], b[M]");
    const std::int64_t N = x->val.shape[0], K = x->val.shape[1], M = w->val.shape[1];
    require(w->val.shape[0] == K && b->val.shape[0] == M, "linear: shape mismatch");
    Tensor out({N, M});
    for (std::int64_t i = 0; i < N; ++i) {
        double* row = out.data() + i * M;
        for (std::int64_t j = 0; j < M; ++j) row[j] = b->val[j];
    }
    mm::nn(x->val.data(), w->val.data(), out.data(), N, K, M);
    return make_op(std::move(out), {x, w, b}, [N, K, M](Node& self) {
        Node& x_ = *self.parents[0];
        Node& w_ = *self.parents[1];
        Node& b_ = *self.parents[2];
        if (x_.requires_grad) {
            x_.ensure_grad();
            mm::nt(self.grad.data(), w_.val.data(), x_.grad.data(), N, M, K);
        }
        if (w_.requires_grad) {
            w_.ensure_grad();
            mm::tn(x_.val.data(), self.grad.data(), w_.grad.data(), K, N, M);
        }
        if (b_.requires_grad) {
            b_.ensure_grad();
            for (std::int64_t i = 0; i < N; ++i) {
                const double* g = self.grad.data() + i * M;
                for (std::int64_t j = 0; j < M; ++j) b_.grad[j] += g[j];
            }
        }
    });
}

// Pre-norm transformer LayerNorm over each row of x[N,C] with learnable
// gamma/beta[C]. Population variance, epsilon inside the sqrt.
inline Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    require(x->val.shape.size() == 2, "layernorm_rows: need x[N,C]");
    const std::int64_t N = x->val.shape[0], C = x->val.shape[1];
    require(gamma->val.shape == std::vector<std::int64_t>{C} && beta->val.shape == std::vector<std::int64_t>{C},
            "layernorm_rows: gamma/beta must be [C]");
    Tensor out({N, C});
    Tensor xhat({N, C});
    Tensor inv_sd({N});
    for (std::int64_t r = 0; r < N; ++r) {
        const double* xr = x->val.data() + r * C;
        double mu = 0.0;
        for (std::int64_t j = 0; j < C; ++j) mu += xr[j];
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::int64_t j = 0; j < C; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(C);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sd[r] = is;
        double* hr = xhat.data() + r * C;
        double* orow = out.data() + r * C;
        for (std::int64_t j = 0; j < C; ++j) {
            hr[j] = (xr[j] - mu) * is;
            orow[j] = gamma->val[j] * hr[j] + beta->val[j];
        }
    }
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto is_p = std::make_shared<Tensor>(std::move(inv_sd));
    return make_op(std::move(out), {x, gamma, beta}, [N, C, xhat_p, is_p](Node& self) {
        Node& x_ = *self.parents[0];
        Node& g_ = *self.parents[1];
        Node& b_ = *self.parents[2];
        if (g_.requires_grad) g_.ensure_grad();
        if (b_.requires_grad) b_.ensure_grad();
        if (x_.requires_grad) x_.ensure_grad();
        for (std::int64_t r = 0; r < N; ++r) {
            const double* go = self.grad.data() + r * C;
            const double* hr = xhat_p->data() + r * C;
            if (g_.requires_grad || b_.requires_grad) {
                for (std::int64_t j = 0; j < C; ++j) {
                    if (g_.requires_grad) g_.grad[j] += go[j] * hr[j];
                    if (b_.requires_grad) b_.grad[j] += go[j];
                }
            }
            if (x_.requires_grad) {
                double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                for (std::int64_t j = 0; j < C; ++j) {
                    const double dxh = go[j] * g_.val[j];
                    m1 += dxh;
                    m2 += dxh * hr[j];
                }
                m1 /= static_cast<double>(C);
                m2 /= static_cast<double>(C);
                double* dx = x_.grad.data() + r * C;
                const double is = (*is_p)[r];
                for (std::int64_t j = 0; j < C; ++j) {
                    const double dxh = go[j] * g_.val[j];
                    dx[j] += is * (dxh - m1 - hr[j] * m2);
                }
            }
        }
    });
}

// [N,C] -> [C]: token pooling.
inline Var mean_over_rows(const Var& a) {
    require(a->val.shape.size() == 2, "mean_over_rows: need [N,C]");
    const std::int64_t N = a->val.shape[0], C = a->val.shape[1];
    Tensor out({C});
    for (std::int64_t r = 0; r < N; ++r) {
        const double* row = a->val.data() + r * C;
        for (std::int64_t j = 0; j < C; ++j) out[j] += row[j];
    }
    for (std::int64_t j = 0; j < C; ++j) out[j] /= static_cast<double>(N);
    return make_op(std::move(out), {a}, [N, C](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        const double inv = 1.0 / static_cast<double>(N);
        for (std::int64_t r = 0; r < N; ++r) {
            double* da = a_.grad.data() + r * C;
            for (std::int64_t j = 0; j < C; ++j) da[j] += self.grad[j] * inv;
        }
    });
}

// Column slice [N,C] -> [N,len] starting at column c0 (attention heads).
inline Var cols_slice(const Var& a, std::int64_t c0, std::int64_t len) {
    require(a->val.shape.size() == 2, "cols_slice: need [N,C]");
    const std::int64_t N = a->val.shape[0], C = a->val.shape[1];
    require(c0 >= 0 && len >= 1 && c0 + len <= C, "cols_slice: range out of bounds");
    Tensor out({N, len});
    for (std::int64_t r = 0; r < N; ++r)
        std::copy_n(a->val.data() + r * C + c0, len, out.data() + r * len);
    return make_op(std::move(out), {a}, [N, C, c0, len](Node& self) {
        Node& a_ = *self.parents[0];
        a_.ensure_grad();
        for (std::int64_t r = 0; r < N; ++r) {
            const double* g = self.grad.data() + r * len;
            double* da = a_.grad.data() + r * C + c0;
            for (std::int64_t j = 0; j < len; ++j) da[j] += g[j];
        }
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    require(a->val.shape.size() == 2 && b->val.shape.size() == 2, "concat_cols: need 2-D tensors");
    const std::int64_t N = a->val.shape[0];
    require(b->val.shape[0] == N, "concat_cols: row counts differ");
    const std::int64_t A = a->val.shape[1], B = b->val.shape[1];
    Tensor out({N, A + B});
    for (std::int64_t r = 0; r < N; ++r) {
        std::copy_n(a->val.data() + r * A, A, out.data() + r * (A + B));
        std::copy_n(b->val.data() + r * B, B, out.data() + r * (A + B) + A);
    }
    return make_op(std::move(out), {a, b}, [N, A, B](Node& self) {
        Node& a_ = *self.parents[0];
        Node& b_ = *self.parents[1];
        if (a_.requires_grad) a_.ensure_grad();
        if (b_.requires_grad) b_.ensure_grad();
        for (std::int64_t r = 0; r < N; ++r) {
            const double* g = self.grad.data() + r * (A + B);
            if (a_.requires_grad) {
                double* da = a_.grad.data() + r * A;
                for (std::int64_t j = 0; j < A; ++j) da[j] += g[j];
            }
            if (b_.requires_grad) {
                double* db = b_.grad.data() + r * B;
                for (std::int64_t j = 0; j < B; ++j) db[j] += g[A + j];
            }
        }
    });
}

// Concatenate along axis 0 (channel concat for [C,D,H,W] tensors).
inline Var concat_axis0(const Var& a, const Var& b) {
    require(!a->val.shape.empty() && a->val.shape.size() == b->val.shape.size(),
            "concat_axis0: rank mismatch");
    for (std::size_t i = 1; i < a->val.shape.size(); ++i)
        require(a->val.shape[i] == b->val.shape[i], "concat_axis0: trailing dims differ");
    std::vector<std::int64_t> sh = a->val.shape;
    sh[0] += b->val.shape[0];
    Tensor out(sh);
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + a->val.numel());
    const std::int64_t na = a->val.numel(), nb = b->val.numel();
    return make_op(std::move(out), {a, b}, [na, nb](Node& self) {
        Node& a_ = *self.parents[0];
        Node& b_ = *self.parents[1];
        if (a_.requires_grad) {
            a_.ensure_grad();
            for (std::int64_t i = 0; i < na; ++i) a_.grad[i] += self.grad[i];
        }
        if (b_.requires_grad) {
            b_.ensure_grad();
            for (std::int64_t i = 0; i < nb; ++i) b_.grad[i] += self.grad[na + i];
        }
    });
}

// Shape change without data movement.
inline Var reshape(const Var& a, std::vector<std::int64_t> sh) {
    require(Tensor::numel_of(sh) == a->val.numel(),
            "reshape: element count mismatch for " + a->val.shape_str());
    Tensor out = a->val;
    out.shape = std::move(sh);
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor g = self.grad;
        g.shape = self.parents[0]->val.shape;
        self.parents[0]->accum(g);
    });
}

}  // namespace regseg
