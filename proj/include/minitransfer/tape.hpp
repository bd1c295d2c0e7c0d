#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "minitransfer/error.hpp"
#include "minitransfer/tensor.hpp"

namespace mt {

// A named trainable tensor. Gradients accumulate across backward calls;
// the caller zeroes them between optimizer steps.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad.fill_(0.0); }
};

// Handle to a node on a Tape.
struct Var {
    int id = -1;
};

namespace detail {

// c[M,N] += a[M,K] * b[K,N]
inline void mm_acc(const double* a, const double* b, double* c, std::size_t M, std::size_t K,
                   std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        double* crow = c + i * N;
        const double* arow = a + i * K;
        for (std::size_t p = 0; p < K; ++p) {
            const double av = arow[p];
            const double* brow = b + p * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[M,N] += sum_q a[M,q] * b[N,q]   (a * b^T)
inline void mm_nt_acc(const double* a, const double* b, double* c, std::size_t M, std::size_t N,
                      std::size_t K) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* arow = a + i * K;
        double* crow = c + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const double* brow = b + j * K;
            double acc = 0.0;
            for (std::size_t q = 0; q < K; ++q) acc += arow[q] * brow[q];
            crow[j] += acc;
        }
    }
}

// c[K,N] += sum_i a[i,K] * g[i,N]   (a^T * g)
inline void mm_tn_acc(const double* a, const double* g, double* c, std::size_t M, std::size_t K,
                      std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* arow = a + i * K;
        const double* grow = g + i * N;
        for (std::size_t p = 0; p < K; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += av * grow[j];
        }
    }
}

}  // namespace detail

// Reverse-mode autodiff tape over whole tensors. Nodes are appended in
// topological order by construction (an op's parents always exist before it),
// so the backward sweep is a single reverse pass. One tape per forward pass;
// never shared across threads.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- node creation -------------------------------------------------

    Var leaf(Tensor v) { return Var{push("leaf", std::move(v), {}, nullptr)}; }

    // A constant: participates in forward values, never receives gradient.
    Var constant(Tensor v) { return Var{push("const", std::move(v), {}, nullptr)}; }

    // Leaf bound to a Parameter; backward() accumulates into p.grad.
    Var param(Parameter& p) {
        int id = push("param", p.value, {}, nullptr);
        nodes_[id].sink = &p;
        param_ids_.push_back(id);
        return Var{id};
    }

    // ---- introspection -------------------------------------------------

    const Tensor& value(Var v) const { return node(v.id).value; }

    // Valid after backward(); zero tensor if the node was never reached.
    Tensor grad(Var v) const {
        const Node& n = node(v.id);
        return n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<int>& parents(int id) const { return node(id).parents; }
    const std::vector<int>& param_ids() const { return param_ids_; }
    const char* op_kind(int id) const { return node(id).op; }

    // ---- arithmetic ----------------------------------------------------

    Var add(Var a, Var b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require_same(x, y, "add");
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
        int id = push("add", std::move(out), {a.id, b.id}, [](Tape& t, const Node& n) {
            const Tensor& g = n.grad;
            t.accum(n.parents[0], g);
            t.accum(n.parents[1], g);
        });
        return Var{id};
    }

    Var sub(Var a, Var b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require_same(x, y, "sub");
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
        int id = push("sub", std::move(out), {a.id, b.id}, [](Tape& t, const Node& n) {
            const Tensor& g = n.grad;
            t.accum(n.parents[0], g);
            Tensor& gb = t.grad_ref(n.parents[1]);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        });
        return Var{id};
    }

    Var mul(Var a, Var b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require_same(x, y, "mul");
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
        int id = push("mul", std::move(out), {a.id, b.id}, [](Tape& t, const Node& n) {
            const Tensor& g = n.grad;
            const Tensor& x = t.node(n.parents[0]).value;
            const Tensor& y = t.node(n.parents[1]).value;
            Tensor& ga = t.grad_ref(n.parents[0]);
            Tensor& gb = t.grad_ref(n.parents[1]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * y[i];
                gb[i] += g[i] * x[i];
            }
        });
        return Var{id};
    }

    Var scale(Var a, double c) {
        Tensor out = value(a);
        out.scale_(c);
        int id = push("scale", std::move(out), {a.id}, [c](Tape& t, const Node& n) {
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += c * n.grad[i];
        });
        return Var{id};
    }

    Var add_scalar(Var a, double c) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
        int id = push("add_scalar", std::move(out), {a.id}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], n.grad);
        });
        return Var{id};
    }

    // Adds a tensor with no gradient tracking (attention masks and the like).
    Var add_const(Var a, const Tensor& c) {
        const Tensor& x = value(a);
        require_same(x, c, "add_const");
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
        int id = push("add_const", std::move(out), {a.id}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], n.grad);
        });
        return Var{id};
    }

    // a[..., H] + bias[H], broadcast over all leading dims.
    Var add_bias(Var a, Var bias) {
        const Tensor& x = value(a);
        const Tensor& b = value(bias);
        if (b.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != b.dim(0))
            throw ShapeError("add_bias: shape " + shape_str(x.shape()) + " vs bias " +
                             shape_str(b.shape()));
        const std::size_t h = b.dim(0);
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % h];
        int id = push("add_bias", std::move(out), {a.id, bias.id}, [h](Tape& t, const Node& n) {
            const Tensor& g = n.grad;
            t.accum(n.parents[0], g);
            Tensor& gb = t.grad_ref(n.parents[1]);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % h] += g[i];
        });
        return Var{id};
    }

    // ---- matrix products -------------------------------------------------

    // [m,k]x[k,n]; [B,m,k]x[k,n]; [B,m,k]x[B,k,n].
    Var matmul(Var a, Var b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        auto bad = [&] {
            throw ShapeError("matmul: incompatible shapes " + shape_str(x.shape()) + " and " +
                             shape_str(y.shape()));
        };
        if (x.rank() == 2 && y.rank() == 2) {
            const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
            if (y.dim(0) != k) bad();
            Tensor out({m, n});
            detail::mm_acc(x.data(), y.data(), out.data(), m, k, n);
            int id = push("matmul", std::move(out), {a.id, b.id}, [m, k, n](Tape& t, const Node& nd) {
                const double* g = nd.grad.data();
                const Tensor& xv = t.node(nd.parents[0]).value;
                const Tensor& yv = t.node(nd.parents[1]).value;
                detail::mm_nt_acc(g, yv.data(), t.grad_ref(nd.parents[0]).data(), m, k, n);
                detail::mm_tn_acc(xv.data(), g, t.grad_ref(nd.parents[1]).data(), m, k, n);
            });
            return Var{id};
        }
        if (x.rank() == 3 && y.rank() == 2) {
            const std::size_t B = x.dim(0), m = x.dim(1), k = x.dim(2), n = y.dim(1);
            if (y.dim(0) != k) bad();
            Tensor out({B, m, n});
            for (std::size_t s = 0; s < B; ++s)
                detail::mm_acc(x.data() + s * m * k, y.data(), out.data() + s * m * n, m, k, n);
            int id = push("matmul", std::move(out), {a.id, b.id},
                          [B, m, k, n](Tape& t, const Node& nd) {
                const Tensor& xv = t.node(nd.parents[0]).value;
                const Tensor& yv = t.node(nd.parents[1]).value;
                Tensor& ga = t.grad_ref(nd.parents[0]);
                Tensor& gb = t.grad_ref(nd.parents[1]);
                for (std::size_t s = 0; s < B; ++s) {
                    const double* g = nd.grad.data() + s * m * n;
                    detail::mm_nt_acc(g, yv.data(), ga.data() + s * m * k, m, k, n);
                    detail::mm_tn_acc(xv.data() + s * m * k, g, gb.data(), m, k, n);
                }
            });
            return Var{id};
        }
        if (x.rank() == 3 && y.rank() == 3) {
            const std::size_t B = x.dim(0), m = x.dim(1), k = x.dim(2), n = y.dim(2);
            if (y.dim(0) != B || y.dim(1) != k) bad();
            Tensor out({B, m, n});
            for (std::size_t s = 0; s < B; ++s)
                detail::mm_acc(x.data() + s * m * k, y.data() + s * k * n, out.data() + s * m * n,
                               m, k, n);
            int id = push("matmul", std::move(out), {a.id, b.id},
                          [B, m, k, n](Tape& t, const Node& nd) {
                const Tensor& xv = t.node(nd.parents[0]).value;
                const Tensor& yv = t.node(nd.parents[1]).value;
                Tensor& ga = t.grad_ref(nd.parents[0]);
                Tensor& gb = t.grad_ref(nd.parents[1]);
                for (std::size_t s = 0; s < B; ++s) {
                    const double* g = nd.grad.data() + s * m * n;
                    detail::mm_nt_acc(g, yv.data() + s * k * n, ga.data() + s * m * k, m, k, n);
                    detail::mm_tn_acc(xv.data() + s * m * k, g, gb.data() + s * k * n, m, k, n);
                }
            });
            return Var{id};
        }
        bad();
        return Var{};
    }

    // a * b^T over the last two dims: [m,k]x[n,k] -> [m,n]; [B,m,k]x[B,n,k] -> [B,m,n].
    Var matmul_nt(Var a, Var b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        auto bad = [&] {
            throw ShapeError("matmul_nt: incompatible shapes " + shape_str(x.shape()) + " and " +
                             shape_str(y.shape()));
        };
        if (x.rank() == 2 && y.rank() == 2) {
            const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(0);
            if (y.dim(1) != k) bad();
            Tensor out({m, n});
            detail::mm_nt_acc(x.data(), y.data(), out.data(), m, n, k);
            int id = push("matmul_nt", std::move(out), {a.id, b.id},
                          [m, k, n](Tape& t, const Node& nd) {
                const double* g = nd.grad.data();
                const Tensor& xv = t.node(nd.parents[0]).value;
                const Tensor& yv = t.node(nd.parents[1]).value;
                detail::mm_acc(g, yv.data(), t.grad_ref(nd.parents[0]).data(), m, n, k);
                detail::mm_tn_acc(g, xv.data(), t.grad_ref(nd.parents[1]).data(), m, n, k);
            });
            return Var{id};
        }
        if (x.rank() == 3 && y.rank() == 3) {
            const std::size_t B = x.dim(0), m = x.dim(1), k = x.dim(2), n = y.dim(1);
            if (y.dim(0) != B || y.dim(2) != k) bad();
            Tensor out({B, m, n});
            for (std::size_t s = 0; s < B; ++s)
                detail::mm_nt_acc(x.data() + s * m * k, y.data() + s * n * k,
                                  out.data() + s * m * n, m, n, k);
            int id = push("matmul_nt", std::move(out), {a.id, b.id},
                          [B, m, k, n](Tape& t, const Node& nd) {
                const Tensor& xv = t.node(nd.parents[0]).value;
                const Tensor& yv = t.node(nd.parents[1]).value;
                Tensor& ga = t.grad_ref(nd.parents[0]);
                Tensor& gb = t.grad_ref(nd.parents[1]);
                for (std::size_t s = 0; s < B; ++s) {
                    const double* g = nd.grad.data() + s * m * n;
                    detail::mm_acc(g, yv.data() + s * n * k, ga.data() + s * m * k, m, n, k);
                    detail::mm_tn_acc(g, xv.data() + s * m * k, gb.data() + s * n * k, m, n, k);
                }
            });
            return Var{id};
        }
        bad();
        return Var{};
    }

    // ---- elementwise nonlinearities --------------------------------------

    Var relu(Var a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
        int id = push("relu", std::move(out), {a.id}, [](Tape& t, const Node& n) {
            const Tensor& x = t.node(n.parents[0]).value;
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (x[i] > 0.0) ga[i] += n.grad[i];
        });
        return Var{id};
    }

    Var tanh(Var a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
        int id = push("tanh", std::move(out), {a.id}, [](Tape& t, const Node& n) {
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                ga[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
        });
        return Var{id};
    }

    Var sigmoid(Var a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = out[i];
            out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        }
        int id = push("sigmoid", std::move(out), {a.id}, [](Tape& t, const Node& n) {
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                ga[i] += n.grad[i] * n.value[i] * (1.0 - n.value[i]);
        });
        return Var{id};
    }

    Var log(Var a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
        int id = push("log", std::move(out), {a.id}, [](Tape& t, const Node& n) {
            const Tensor& x = t.node(n.parents[0]).value;
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] / x[i];
        });
        return Var{id};
    }

    // Gradient passes through on [lo, hi], zero outside.
    Var clamp(Var a, double lo, double hi) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = out[i] < lo ? lo : (out[i] > hi ? hi : out[i]);
        int id = push("clamp", std::move(out), {a.id}, [lo, hi](Tape& t, const Node& n) {
            const Tensor& x = t.node(n.parents[0]).value;
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (x[i] >= lo && x[i] <= hi) ga[i] += n.grad[i];
        });
        return Var{id};
    }

    // ---- reductions ------------------------------------------------------

    Var sum(Var a) {
        double s = 0.0;
        const Tensor& x = value(a);
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
        int id = push("sum", Tensor::scalar(s), {a.id}, [](Tape& t, const Node& n) {
            const double g = n.grad[0];
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
        return Var{id};
    }

    Var mean(Var a) {
        const Tensor& x = value(a);
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
        const double inv = 1.0 / static_cast<double>(x.size());
        int id = push("mean", Tensor::scalar(s * inv), {a.id}, [inv](Tape& t, const Node& n) {
            const double g = n.grad[0] * inv;
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
        return Var{id};
    }

    // ---- softmax family ----------------------------------------------------

    // Softmax over the last axis, max-subtracted for stability.
    Var softmax(Var a) {
        const Tensor& x = value(a);
        if (x.rank() < 1) throw ShapeError("softmax: scalar input");
        const std::size_t n = x.dim(x.rank() - 1);
        const std::size_t rows = x.size() / n;
        Tensor out = x;
        for (std::size_t r = 0; r < rows; ++r) {
            double* row = out.data() + r * n;
            double mx = row[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            const double inv = 1.0 / z;
            for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
        }
        int id = push("softmax", std::move(out), {a.id}, [n, rows](Tape& t, const Node& nd) {
            Tensor& ga = t.grad_ref(nd.parents[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = nd.value.data() + r * n;
                const double* g = nd.grad.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                double* out = ga.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) out[j] += y[j] * (g[j] - dot);
            }
        });
        return Var{id};
    }

    // Mean over the batch of -log softmax(logits)[label]. Weighted variant:
    // per-row weights and an explicit denominator, so data-parallel shards and
    // masked-token objectives can keep exact mean-reduction algebra.
    Var cross_entropy(Var logits, const std::vector<int>& labels) {
        const std::size_t b = rows_of(logits, "cross_entropy");
        return cross_entropy_weighted(logits, labels, std::vector<double>(b, 1.0),
                                      static_cast<double>(b));
    }

    Var cross_entropy_weighted(Var logits, const std::vector<int>& labels,
                               const std::vector<double>& weights, double denom) {
        const Tensor& x = value(logits);
        if (x.rank() != 2)
            throw ShapeError("cross_entropy: logits must be 2-d, got " + shape_str(x.shape()));
        const std::size_t b = x.dim(0), n = x.dim(1);
        if (labels.size() != b)
            throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(b) + " rows");
        if (weights.size() != b) throw ShapeError("cross_entropy: weight count mismatch");
        if (denom <= 0.0) throw ValueError("cross_entropy: denominator must be positive");
        for (std::size_t i = 0; i < b; ++i)
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n)
                throw ValueError("cross_entropy: label " + std::to_string(labels[i]) +
                                 " out of range [0, " + std::to_string(n) + ")");
        // Cache softmax probabilities for the backward pass.
        Tensor probs({b, n});
        double loss = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const double* row = x.data() + i * n;
            double mx = row[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
            const double lse = mx + std::log(z);
            loss += weights[i] * (lse - row[labels[i]]);
            double* prow = probs.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) prow[j] = std::exp(row[j] - lse);
        }
        loss /= denom;
        int id = push("cross_entropy", Tensor::scalar(loss), {logits.id},
                      [probs = std::move(probs), labels, weights, denom, b,
                       n](Tape& t, const Node& nd) {
            const double g = nd.grad[0] / denom;
            Tensor& ga = t.grad_ref(nd.parents[0]);
            for (std::size_t i = 0; i < b; ++i) {
                const double wi = g * weights[i];
                if (wi == 0.0) continue;
                const double* prow = probs.data() + i * n;
                double* grow = ga.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) grow[j] += wi * prow[j];
                grow[labels[i]] -= wi;
            }
        });
        return Var{id};
    }

    // Mean over the batch of KL(softmax(teacher/T) || softmax(student/T)).
    // The teacher is a plain tensor, so gradients flow only into the student.
    Var kl_soft(const Tensor& teacher, Var student, double temperature) {
        if (temperature <= 0.0)
            throw ValueError("kl_soft: temperature must be positive, got " +
                             std::to_string(temperature));
        const Tensor& s = value(student);
        if (!teacher.same_shape(s))
            throw ShapeError("kl_soft: teacher " + shape_str(teacher.shape()) + " vs student " +
                             shape_str(s.shape()));
        if (s.rank() != 2) throw ShapeError("kl_soft: logits must be 2-d");
        const std::size_t b = s.dim(0), n = s.dim(1);
        const double T = temperature;
        Tensor p({b, n}), q({b, n});
        double loss = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            log_softmax_row(teacher.data() + i * n, p.data() + i * n, n, T);
            log_softmax_row(s.data() + i * n, q.data() + i * n, n, T);
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double lp = p[i * n + j];
                const double pj = std::exp(lp);
                if (pj > 0.0) acc += pj * (lp - q[i * n + j]);
            }
            loss += acc;
        }
        loss /= static_cast<double>(b);
        int id = push("kl_soft", Tensor::scalar(loss), {student.id},
                      [p = std::move(p), q = std::move(q), b, n, T](Tape& t, const Node& nd) {
            const double g = nd.grad[0] / (static_cast<double>(b) * T);
            Tensor& gs = t.grad_ref(nd.parents[0]);
            for (std::size_t i = 0; i < b * n; ++i) gs[i] += g * (std::exp(q[i]) - std::exp(p[i]));
        });
        return Var{id};
    }

    // Identity forward; backward multiplies the upstream gradient by -lambda.
    Var grad_reverse(Var a, double lambda) {
        if (lambda < 0.0)
            throw ValueError("grad_reverse: lambda must be non-negative, got " +
                             std::to_string(lambda));
        int id = push("grad_reverse", value(a), {a.id}, [lambda](Tape& t, const Node& n) {
            Tensor& ga = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] -= lambda * n.grad[i];
        });
        return Var{id};
    }

    // ---- structured ops ----------------------------------------------------

    // Row lookup: table[V,H] gathered by ids into [b,len,H].
    Var embedding(Var table, const std::vector<int>& ids, std::size_t b, std::size_t len) {
        const Tensor& tab = value(table);
        if (tab.rank() != 2) throw ShapeError("embedding: table must be 2-d");
        const std::size_t V = tab.dim(0), H = tab.dim(1);
        if (ids.size() != b * len) throw ShapeError("embedding: id count mismatch");
        for (int id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= V)
                throw ValueError("embedding: token id " + std::to_string(id) +
                                 " out of range [0, " + std::to_string(V) + ")");
        Tensor out({b, len, H});
        for (std::size_t i = 0; i < ids.size(); ++i)
            std::memcpy(out.data() + i * H, tab.data() + static_cast<std::size_t>(ids[i]) * H,
                        H * sizeof(double));
        int id = push("embedding", std::move(out), {table.id}, [ids, H](Tape& t, const Node& n) {
            Tensor& gt = t.grad_ref(n.parents[0]);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const double* g = n.grad.data() + i * H;
                double* row = gt.data() + static_cast<std::size_t>(ids[i]) * H;
                for (std::size_t h = 0; h < H; ++h) row[h] += g[h];
            }
        });
        return Var{id};
    }

    // Mean over unmasked positions; a fully masked row pools to zeros.
    Var masked_mean_pool(Var states, const Tensor& mask) {
        const Tensor& x = value(states);
        if (x.rank() != 3) throw ShapeError("masked_mean_pool: states must be [b,len,H]");
        const std::size_t b = x.dim(0), len = x.dim(1), H = x.dim(2);
        if (mask.rank() != 2 || mask.dim(0) != b || mask.dim(1) != len)
            throw ShapeError("masked_mean_pool: mask " + shape_str(mask.shape()) +
                             " vs states " + shape_str(x.shape()));
        Tensor out({b, H});
        std::vector<double> inv(b);
        for (std::size_t r = 0; r < b; ++r) {
            double cnt = 0.0;
            for (std::size_t t = 0; t < len; ++t) cnt += mask.at2(r, t);
            inv[r] = 1.0 / std::max(cnt, 1.0);
            for (std::size_t t = 0; t < len; ++t) {
                const double m = mask.at2(r, t);
                if (m == 0.0) continue;
                const double* src = x.data() + (r * len + t) * H;
                double* dst = out.data() + r * H;
                for (std::size_t h = 0; h < H; ++h) dst[h] += m * src[h];
            }
            for (std::size_t h = 0; h < H; ++h) out.data()[r * H + h] *= inv[r];
        }
        int id = push("masked_mean_pool", std::move(out), {states.id},
                      [mask, inv = std::move(inv), b, len, H](Tape& t, const Node& n) {
            Tensor& gs = t.grad_ref(n.parents[0]);
            for (std::size_t r = 0; r < b; ++r) {
                const double* g = n.grad.data() + r * H;
                for (std::size_t tt = 0; tt < len; ++tt) {
                    const double m = mask.at2(r, tt) * inv[r];
                    if (m == 0.0) continue;
                    double* dst = gs.data() + (r * len + tt) * H;
                    for (std::size_t h = 0; h < H; ++h) dst[h] += m * g[h];
                }
            }
        });
        return Var{id};
    }

    // Layer normalization over the last axis with learnable gain and bias.
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Tensor& xv = value(x);
        const Tensor& gv = value(gain);
        const Tensor& bv = value(bias);
        const std::size_t H = xv.dim(xv.rank() - 1);
        if (gv.rank() != 1 || gv.dim(0) != H || bv.rank() != 1 || bv.dim(0) != H)
            throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(H) + "]");
        const std::size_t rows = xv.size() / H;
        Tensor out(xv.shape());
        Tensor xhat(xv.shape());
        std::vector<double> inv_std(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = xv.data() + r * H;
            double mu = 0.0;
            for (std::size_t h = 0; h < H; ++h) mu += row[h];
            mu /= static_cast<double>(H);
            double var = 0.0;
            for (std::size_t h = 0; h < H; ++h) var += (row[h] - mu) * (row[h] - mu);
            var /= static_cast<double>(H);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std[r] = inv;
            for (std::size_t h = 0; h < H; ++h) {
                const double xh = (row[h] - mu) * inv;
                xhat.data()[r * H + h] = xh;
                out.data()[r * H + h] = gv[h] * xh + bv[h];
            }
        }
        int id = push("layer_norm", std::move(out), {x.id, gain.id, bias.id},
                      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                       H](Tape& t, const Node& n) {
            const Tensor& gv = t.node(n.parents[1]).value;
            Tensor& gx = t.grad_ref(n.parents[0]);
            Tensor& gg = t.grad_ref(n.parents[1]);
            Tensor& gb = t.grad_ref(n.parents[2]);
            const double invH = 1.0 / static_cast<double>(H);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = n.grad.data() + r * H;
                const double* xh = xhat.data() + r * H;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t h = 0; h < H; ++h) {
                    const double gg_h = g[h] * gv[h];
                    m1 += gg_h;
                    m2 += gg_h * xh[h];
                    gg[h] += g[h] * xh[h];
                    gb[h] += g[h];
                }
                m1 *= invH;
                m2 *= invH;
                double* dst = gx.data() + r * H;
                for (std::size_t h = 0; h < H; ++h)
                    dst[h] += inv_std[r] * (g[h] * gv[h] - m1 - xh[h] * m2);
            }
        });
        return Var{id};
    }

    // Rows scaled to unit L2 norm, with a 1e-12 guard on the divisor.
    Var row_l2_normalize(Var x) {
        const Tensor& xv = value(x);
        const std::size_t H = xv.dim(xv.rank() - 1);
        const std::size_t rows = xv.size() / H;
        Tensor out(xv.shape());
        std::vector<double> norms(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = xv.data() + r * H;
            double n2 = 0.0;
            for (std::size_t h = 0; h < H; ++h) n2 += row[h] * row[h];
            const double nrm = std::sqrt(n2);
            norms[r] = nrm;
            const double inv = 1.0 / (nrm + 1e-12);
            for (std::size_t h = 0; h < H; ++h) out.data()[r * H + h] = row[h] * inv;
        }
        int id = push("row_l2_normalize", std::move(out), {x.id},
                      [norms = std::move(norms), rows, H](Tape& t, const Node& n) {
            const Tensor& xv = t.node(n.parents[0]).value;
            Tensor& gx = t.grad_ref(n.parents[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = n.grad.data() + r * H;
                const double* y = n.value.data() + r * H;
                const double* xr = xv.data() + r * H;
                const double d = norms[r] + 1e-12;
                double gy = 0.0;
                for (std::size_t h = 0; h < H; ++h) gy += g[h] * y[h];
                const double c = norms[r] > 0.0 ? gy / (norms[r] * d) : 0.0;
                double* dst = gx.data() + r * H;
                for (std::size_t h = 0; h < H; ++h) dst[h] += g[h] / d - c * xr[h];
            }
        });
        return Var{id};
    }

    // Concatenation along the last axis.
    Var concat_last(Var a, Var b) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        if (x.rank() != y.rank())
            throw ShapeError("concat_last: rank mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
        for (std::size_t i = 0; i + 1 < x.rank(); ++i)
            if (x.dim(i) != y.dim(i))
                throw ShapeError("concat_last: leading dims differ " + shape_str(x.shape()) +
                                 " vs " + shape_str(y.shape()));
        const std::size_t p = x.dim(x.rank() - 1), q = y.dim(y.rank() - 1);
        const std::size_t rows = x.size() / p;
        Shape out_shape = x.shape();
        out_shape.back() = p + q;
        Tensor out(out_shape);
        for (std::size_t r = 0; r < rows; ++r) {
            std::memcpy(out.data() + r * (p + q), x.data() + r * p, p * sizeof(double));
            std::memcpy(out.data() + r * (p + q) + p, y.data() + r * q, q * sizeof(double));
        }
        int id = push("concat_last", std::move(out), {a.id, b.id},
                      [p, q, rows](Tape& t, const Node& n) {
            Tensor& ga = t.grad_ref(n.parents[0]);
            Tensor& gb = t.grad_ref(n.parents[1]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = n.grad.data() + r * (p + q);
                double* da = ga.data() + r * p;
                double* db = gb.data() + r * q;
                for (std::size_t i = 0; i < p; ++i) da[i] += g[i];
                for (std::size_t i = 0; i < q; ++i) db[i] += g[p + i];
            }
        });
        return Var{id};
    }

    // One time step of a [b,len,H] sequence.
    Var select_time(Var states, std::size_t step) {
        const Tensor& x = value(states);
        if (x.rank() != 3) throw ShapeError("select_time: states must be [b,len,H]");
        const std::size_t b = x.dim(0), len = x.dim(1), H = x.dim(2);
        if (step >= len) throw ValueError("select_time: step out of range");
        Tensor out({b, H});
        for (std::size_t r = 0; r < b; ++r)
            std::memcpy(out.data() + r * H, x.data() + (r * len + step) * H, H * sizeof(double));
        int id = push("select_time", std::move(out), {states.id},
                      [b, len, H, step](Tape& t, const Node& n) {
            Tensor& gs = t.grad_ref(n.parents[0]);
            for (std::size_t r = 0; r < b; ++r) {
                const double* g = n.grad.data() + r * H;
                double* dst = gs.data() + (r * len + step) * H;
                for (std::size_t h = 0; h < H; ++h) dst[h] += g[h];
            }
        });
        return Var{id};
    }

    // len tensors of [b,H] stacked into [b,len,H].
    Var stack_time(const std::vector<Var>& steps) {
        if (steps.empty()) throw ShapeError("stack_time: empty sequence");
        const Tensor& first = value(steps[0]);
        if (first.rank() != 2) throw ShapeError("stack_time: steps must be [b,H]");
        const std::size_t b = first.dim(0), H = first.dim(1), len = steps.size();
        Tensor out({b, len, H});
        std::vector<int> parents(len);
        for (std::size_t s = 0; s < len; ++s) {
            const Tensor& v = value(steps[s]);
            if (!v.same_shape(first)) throw ShapeError("stack_time: inconsistent step shapes");
            parents[s] = steps[s].id;
            for (std::size_t r = 0; r < b; ++r)
                std::memcpy(out.data() + (r * len + s) * H, v.data() + r * H, H * sizeof(double));
        }
        int id = push("stack_time", std::move(out), std::move(parents),
                      [b, len, H](Tape& t, const Node& n) {
            for (std::size_t s = 0; s < len; ++s) {
                Tensor& gp = t.grad_ref(n.parents[s]);
                for (std::size_t r = 0; r < b; ++r) {
                    const double* g = n.grad.data() + (r * len + s) * H;
                    double* dst = gp.data() + r * H;
                    for (std::size_t h = 0; h < H; ++h) dst[h] += g[h];
                }
            }
        });
        return Var{id};
    }

    // Per-row blend: out[r,:] = m[r]*a[r,:] + (1-m[r])*b[r,:]. The blend
    // weights carry no gradient (they come from padding masks).
    Var lerp_rows(Var a, Var b, const Tensor& m) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        require_same(x, y, "lerp_rows");
        if (x.rank() != 2 || m.size() != x.dim(0))
            throw ShapeError("lerp_rows: need [b,H] inputs and b blend weights");
        const std::size_t rows = x.dim(0), H = x.dim(1);
        Tensor out({rows, H});
        for (std::size_t r = 0; r < rows; ++r) {
            const double w = m[r];
            for (std::size_t h = 0; h < H; ++h)
                out.data()[r * H + h] = w * x.data()[r * H + h] + (1.0 - w) * y.data()[r * H + h];
        }
        int id = push("lerp_rows", std::move(out), {a.id, b.id},
                      [m, rows, H](Tape& t, const Node& n) {
            Tensor& ga = t.grad_ref(n.parents[0]);
            Tensor& gb = t.grad_ref(n.parents[1]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double w = m[r];
                const double* g = n.grad.data() + r * H;
                for (std::size_t h = 0; h < H; ++h) {
                    ga.data()[r * H + h] += w * g[h];
                    gb.data()[r * H + h] += (1.0 - w) * g[h];
                }
            }
        });
        return Var{id};
    }

    // Multiply a tensor by a scalar variable (a learned gate).
    Var scale_by(Var a, Var s) {
        const Tensor& x = value(a);
        const Tensor& sv = value(s);
        if (sv.size() != 1) throw ShapeError("scale_by: scale must be scalar");
        Tensor out = x;
        out.scale_(sv[0]);
        int id = push("scale_by", std::move(out), {a.id, s.id}, [](Tape& t, const Node& n) {
            const Tensor& x = t.node(n.parents[0]).value;
            const double sv = t.node(n.parents[1]).value[0];
            Tensor& ga = t.grad_ref(n.parents[0]);
            Tensor& gs = t.grad_ref(n.parents[1]);
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                ga[i] += sv * n.grad[i];
                acc += n.grad[i] * x[i];
            }
            gs[0] += acc;
        });
        return Var{id};
    }

    // ---- backward ----------------------------------------------------------

    // Reverse sweep from a scalar loss. Gradients of bound Parameters
    // accumulate into Parameter::grad. One backward per tape.
    void backward(Var loss) {
        Node& ln = node(loss.id);
        if (ln.value.size() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(ln.value.shape()));
        if (backward_done_) throw Error("backward: tape already swept");
        backward_done_ = true;
        grad_ref(loss.id)[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.empty() || !n.back) continue;
            n.back(*this, n);
        }
        for (int id : param_ids_) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.sink && !n.grad.empty()) n.sink->grad.add_(n.grad);
        }
    }

  private:
    struct Node {
        const char* op = "";
        Tensor value;
        Tensor grad;  // allocated lazily during backward
        std::vector<int> parents;
        std::function<void(Tape&, const Node&)> back;
        Parameter* sink = nullptr;
    };

    static void log_softmax_row(const double* logits, double* out, std::size_t n, double T) {
        double mx = logits[0] / T;
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits[j] / T);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(logits[j] / T - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) out[j] = logits[j] / T - lse;
    }

    Node& node(int id) {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw Error("invalid tape node id " + std::to_string(id));
        return nodes_[static_cast<std::size_t>(id)];
    }
    const Node& node(int id) const { return const_cast<Tape*>(this)->node(id); }

    int push(const char* op, Tensor value, std::vector<int> parents,
             std::function<void(Tape&, const Node&)> back) {
        if (!value.all_finite())
            throw Error(std::string("non-finite values produced by op '") + op + "'");
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Tensor& grad_ref(int id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }

    void accum(int id, const Tensor& g) { grad_ref(id).add_(g); }

    static void require_same(const Tensor& a, const Tensor& b, const char* op) {
        if (!a.same_shape(b))
            throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }

    std::size_t rows_of(Var v, const char* op) const {
        const Tensor& x = value(v);
        if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected 2-d tensor");
        return x.dim(0);
    }

    std::vector<Node> nodes_;
    std::vector<int> param_ids_;
    bool backward_done_ = false;
};

}  // namespace mt
