#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pepdiff/common.hpp"

namespace pepdiff::ad {

/// Reverse-mode tape over dense matrices. Nodes are evaluated eagerly as they
/// are recorded, so the node list is topologically ordered by construction.
/// backward() walks the list in reverse and accumulates gradients into every
/// leaf recorded with requires_grad.
///
/// S = float is the production scalar; S = double exists for the
/// finite-difference checks.
template <typename S>
class Tape {
public:
    using NodeId = std::size_t;

    Tape() = default;
    // backward closures capture `this`, so the tape must stay put
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    // ----- leaves ----------------------------------------------------------

    NodeId input(Matrix<S> value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, {});
    }
    NodeId param(Matrix<S> value) { return input(std::move(value), true); }
    NodeId constant(Matrix<S> value) { return input(std::move(value), false); }

    NodeId scalar(S v) {
        Matrix<S> m(1, 1);
        m.data[0] = v;
        return constant(std::move(m));
    }

    // ----- primitives -------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.cols != B.rows) throw ShapeError("matmul: inner dimensions differ");
        Matrix<S> Y(A.rows, B.cols);
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t k = 0; k < A.cols; ++k) {
                const S aik = A.at(i, k);
                if (aik == S(0)) continue;
                for (std::size_t j = 0; j < B.cols; ++j) Y.at(i, j) += aik * B.at(k, j);
            }
        return push(std::move(Y), needs(a) || needs(b), [this, a, b](const Node& n) {
            const auto& A = val(a);
            const auto& B = val(b);
            if (needs(a)) {
                auto& dA = grad_buf(a);
                for (std::size_t i = 0; i < A.rows; ++i)
                    for (std::size_t j = 0; j < B.cols; ++j) {
                        const S g = n.grad.at(i, j);
                        if (g == S(0)) continue;
                        for (std::size_t k = 0; k < A.cols; ++k) dA.at(i, k) += g * B.at(k, j);
                    }
            }
            if (needs(b)) {
                auto& dB = grad_buf(b);
                for (std::size_t i = 0; i < A.rows; ++i)
                    for (std::size_t k = 0; k < A.cols; ++k) {
                        const S aik = A.at(i, k);
                        if (aik == S(0)) continue;
                        for (std::size_t j = 0; j < B.cols; ++j)
                            dB.at(k, j) += aik * n.grad.at(i, j);
                    }
            }
        });
    }

    /// Elementwise add; b may also be 1 x C, broadcast over the rows of a.
    NodeId add(NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        const bool broadcast = (B.rows == 1 && A.rows != 1 && B.cols == A.cols);
        if (!broadcast && !A.same_shape(B)) throw ShapeError("add: shape mismatch");
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t r = 0; r < A.rows; ++r)
            for (std::size_t c = 0; c < A.cols; ++c)
                Y.at(r, c) = A.at(r, c) + (broadcast ? B.at(0, c) : B.at(r, c));
        return push(std::move(Y), needs(a) || needs(b), [this, a, b, broadcast](const Node& n) {
            if (needs(a)) {
                auto& dA = grad_buf(a);
                for (std::size_t i = 0; i < n.grad.size(); ++i) dA.data[i] += n.grad.data[i];
            }
            if (needs(b)) {
                auto& dB = grad_buf(b);
                if (broadcast) {
                    for (std::size_t r = 0; r < n.grad.rows; ++r)
                        for (std::size_t c = 0; c < n.grad.cols; ++c)
                            dB.at(0, c) += n.grad.at(r, c);
                } else {
                    for (std::size_t i = 0; i < n.grad.size(); ++i) dB.data[i] += n.grad.data[i];
                }
            }
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        require_same_shape(A, B, "mul");
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t i = 0; i < A.size(); ++i) Y.data[i] = A.data[i] * B.data[i];
        return push(std::move(Y), needs(a) || needs(b), [this, a, b](const Node& n) {
            const auto& A = val(a);
            const auto& B = val(b);
            if (needs(a)) {
                auto& dA = grad_buf(a);
                for (std::size_t i = 0; i < A.size(); ++i) dA.data[i] += n.grad.data[i] * B.data[i];
            }
            if (needs(b)) {
                auto& dB = grad_buf(b);
                for (std::size_t i = 0; i < A.size(); ++i) dB.data[i] += n.grad.data[i] * A.data[i];
            }
        });
    }

    NodeId scale(NodeId a, double c) {
        const auto& A = val(a);
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t i = 0; i < A.size(); ++i) Y.data[i] = static_cast<S>(c) * A.data[i];
        return push(std::move(Y), needs(a), [this, a, c](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                dA.data[i] += static_cast<S>(c) * n.grad.data[i];
        });
    }

    NodeId transpose(NodeId a) {
        const auto& A = val(a);
        Matrix<S> Y(A.cols, A.rows);
        for (std::size_t r = 0; r < A.rows; ++r)
            for (std::size_t c = 0; c < A.cols; ++c) Y.at(c, r) = A.at(r, c);
        return push(std::move(Y), needs(a), [this, a](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t r = 0; r < n.grad.rows; ++r)
                for (std::size_t c = 0; c < n.grad.cols; ++c) dA.at(c, r) += n.grad.at(r, c);
        });
    }

    /// Row-wise softmax with max subtraction.
    NodeId softmax_rows(NodeId a) {
        const auto& A = val(a);
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t r = 0; r < A.rows; ++r) {
            S mx = A.at(r, 0);
            for (std::size_t c = 1; c < A.cols; ++c) mx = std::max(mx, A.at(r, c));
            S sum = 0;
            for (std::size_t c = 0; c < A.cols; ++c) {
                Y.at(r, c) = std::exp(A.at(r, c) - mx);
                sum += Y.at(r, c);
            }
            for (std::size_t c = 0; c < A.cols; ++c) Y.at(r, c) /= sum;
        }
        return push(std::move(Y), needs(a), [this, a](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t r = 0; r < n.value.rows; ++r) {
                S dot = 0;
                for (std::size_t c = 0; c < n.value.cols; ++c)
                    dot += n.grad.at(r, c) * n.value.at(r, c);
                for (std::size_t c = 0; c < n.value.cols; ++c)
                    dA.at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
            }
        });
    }

    /// Row-wise normalization to zero mean / unit variance (eps floor), then
    /// per-column affine with gain and bias of shape 1 x C.
    NodeId layer_norm(NodeId a, NodeId gain, NodeId bias, double eps = 1e-5) {
        const auto& A = val(a);
        const auto& G = val(gain);
        const auto& B = val(bias);
        if (G.rows != 1 || G.cols != A.cols || B.rows != 1 || B.cols != A.cols)
            throw ShapeError("layer_norm: gain/bias must be 1 x cols");
        Matrix<S> xhat(A.rows, A.cols);
        std::vector<S> inv_std(A.rows);
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t r = 0; r < A.rows; ++r) {
            S mean = 0;
            for (std::size_t c = 0; c < A.cols; ++c) mean += A.at(r, c);
            mean /= static_cast<S>(A.cols);
            S var = 0;
            for (std::size_t c = 0; c < A.cols; ++c) {
                const S d = A.at(r, c) - mean;
                var += d * d;
            }
            var /= static_cast<S>(A.cols);
            const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
            inv_std[r] = istd;
            for (std::size_t c = 0; c < A.cols; ++c) {
                xhat.at(r, c) = (A.at(r, c) - mean) * istd;
                Y.at(r, c) = G.at(0, c) * xhat.at(r, c) + B.at(0, c);
            }
        }
        return push(std::move(Y), needs(a) || needs(gain) || needs(bias),
                    [this, a, gain, bias, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](const Node& n) {
                        const auto& G = val(gain);
                        const std::size_t R = n.value.rows, C = n.value.cols;
                        if (needs(gain)) {
                            auto& dG = grad_buf(gain);
                            for (std::size_t r = 0; r < R; ++r)
                                for (std::size_t c = 0; c < C; ++c)
                                    dG.at(0, c) += n.grad.at(r, c) * xhat.at(r, c);
                        }
                        if (needs(bias)) {
                            auto& dB = grad_buf(bias);
                            for (std::size_t r = 0; r < R; ++r)
                                for (std::size_t c = 0; c < C; ++c) dB.at(0, c) += n.grad.at(r, c);
                        }
                        if (needs(a)) {
                            auto& dA = grad_buf(a);
                            for (std::size_t r = 0; r < R; ++r) {
                                S m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                                for (std::size_t c = 0; c < C; ++c) {
                                    const S dxh = n.grad.at(r, c) * G.at(0, c);
                                    m1 += dxh;
                                    m2 += dxh * xhat.at(r, c);
                                }
                                m1 /= static_cast<S>(C);
                                m2 /= static_cast<S>(C);
                                for (std::size_t c = 0; c < C; ++c) {
                                    const S dxh = n.grad.at(r, c) * G.at(0, c);
                                    dA.at(r, c) += inv_std[r] * (dxh - m1 - xhat.at(r, c) * m2);
                                }
                            }
                        }
                    });
    }

    /// Exact-erf GELU.
    NodeId gelu(NodeId a) {
        const auto& A = val(a);
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t i = 0; i < A.size(); ++i) {
            const double x = static_cast<double>(A.data[i]);
            Y.data[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
        }
        return push(std::move(Y), needs(a), [this, a](const Node& n) {
            if (!needs(a)) return;
            const auto& A = val(a);
            auto& dA = grad_buf(a);
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (std::size_t i = 0; i < A.size(); ++i) {
                const double x = static_cast<double>(A.data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                dA.data[i] += n.grad.data[i] * static_cast<S>(cdf + x * pdf);
            }
        });
    }

    /// Inverted dropout: train mode multiplies by a seeded Bernoulli mask
    /// scaled by 1/(1-p); eval mode is the identity (no node recorded).
    NodeId dropout(NodeId a, double p, std::uint64_t seed, bool train) {
        if (!train || p <= 0.0) return a;
        if (p >= 1.0) throw InvalidArgument("dropout: p must be < 1");
        const auto& A = val(a);
        Rng rng(seed);
        Matrix<S> mask(A.rows, A.cols);
        const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
        for (std::size_t i = 0; i < mask.size(); ++i)
            mask.data[i] = rng.uniform() < p ? S(0) : keep_scale;
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t i = 0; i < A.size(); ++i) Y.data[i] = A.data[i] * mask.data[i];
        return push(std::move(Y), needs(a), [this, a, mask = std::move(mask)](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                dA.data[i] += n.grad.data[i] * mask.data[i];
        });
    }

    NodeId concat_cols(NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rows != B.rows) throw ShapeError("concat_cols: row counts differ");
        Matrix<S> Y(A.rows, A.cols + B.cols);
        for (std::size_t r = 0; r < A.rows; ++r) {
            for (std::size_t c = 0; c < A.cols; ++c) Y.at(r, c) = A.at(r, c);
            for (std::size_t c = 0; c < B.cols; ++c) Y.at(r, A.cols + c) = B.at(r, c);
        }
        const std::size_t split = A.cols;
        return push(std::move(Y), needs(a) || needs(b), [this, a, b, split](const Node& n) {
            if (needs(a)) {
                auto& dA = grad_buf(a);
                for (std::size_t r = 0; r < n.grad.rows; ++r)
                    for (std::size_t c = 0; c < split; ++c) dA.at(r, c) += n.grad.at(r, c);
            }
            if (needs(b)) {
                auto& dB = grad_buf(b);
                for (std::size_t r = 0; r < n.grad.rows; ++r)
                    for (std::size_t c = split; c < n.grad.cols; ++c)
                        dB.at(r, c - split) += n.grad.at(r, c);
            }
        });
    }

    /// Columns [c0, c1).
    NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
        const auto& A = val(a);
        if (c0 >= c1 || c1 > A.cols) throw ShapeError("slice_cols: range out of bounds");
        Matrix<S> Y(A.rows, c1 - c0);
        for (std::size_t r = 0; r < A.rows; ++r)
            for (std::size_t c = c0; c < c1; ++c) Y.at(r, c - c0) = A.at(r, c);
        return push(std::move(Y), needs(a), [this, a, c0](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t r = 0; r < n.grad.rows; ++r)
                for (std::size_t c = 0; c < n.grad.cols; ++c)
                    dA.at(r, c0 + c) += n.grad.at(r, c);
        });
    }

    /// R x C -> R x 1, sum over each row.
    NodeId row_sum(NodeId a) {
        const auto& A = val(a);
        Matrix<S> Y(A.rows, 1);
        for (std::size_t r = 0; r < A.rows; ++r) {
            S s = 0;
            for (std::size_t c = 0; c < A.cols; ++c) s += A.at(r, c);
            Y.at(r, 0) = s;
        }
        return push(std::move(Y), needs(a), [this, a](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t r = 0; r < dA.rows; ++r)
                for (std::size_t c = 0; c < dA.cols; ++c) dA.at(r, c) += n.grad.at(r, 0);
        });
    }

    /// Mean over all entries -> 1 x 1.
    NodeId mean_all(NodeId a) {
        const auto& A = val(a);
        Matrix<S> Y(1, 1);
        S s = 0;
        for (S v : A.data) s += v;
        Y.at(0, 0) = s / static_cast<S>(A.size());
        return push(std::move(Y), needs(a), [this, a](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            const S g = n.grad.at(0, 0) / static_cast<S>(dA.size());
            for (auto& v : dA.data) v += g;
        });
    }

    /// (a + shift)^(-1/2), elementwise. Inputs must keep a + shift > 0.
    NodeId rsqrt_shift(NodeId a, double shift) {
        const auto& A = val(a);
        Matrix<S> Y(A.rows, A.cols);
        for (std::size_t i = 0; i < A.size(); ++i)
            Y.data[i] = S(1) / std::sqrt(A.data[i] + static_cast<S>(shift));
        return push(std::move(Y), needs(a), [this, a](const Node& n) {
            if (!needs(a)) return;
            auto& dA = grad_buf(a);
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                const S y = n.value.data[i];
                dA.data[i] += n.grad.data[i] * S(-0.5) * y * y * y;
            }
        });
    }

    // ----- access -----------------------------------------------------------

    const Matrix<S>& value(NodeId id) const { return nodes_[id].value; }

    bool has_grad(NodeId id) const { return nodes_[id].grad.size() > 0; }

    const Matrix<S>& grad(NodeId id) const {
        if (!has_grad(id)) throw InvalidArgument("grad: node has no gradient buffer");
        return nodes_[id].grad;
    }

    std::size_t node_count() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// requires_grad node reachable from `loss`.
    void backward(NodeId loss) {
        const auto& L = val(loss);
        if (L.rows != 1 || L.cols != 1) throw InvalidArgument("backward: loss must be scalar");
        grad_buf(loss).at(0, 0) = S(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.size() == 0) continue;
            n.backward(n);
        }
    }

private:
    struct Node {
        Matrix<S> value;
        Matrix<S> grad;  // empty until needed
        bool requires_grad = false;
        std::function<void(const Node&)> backward;  // empty for leaves
    };

    const Matrix<S>& val(NodeId id) const { return nodes_[id].value; }
    bool needs(NodeId id) const { return nodes_[id].requires_grad; }

    Matrix<S>& grad_buf(NodeId id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Matrix<S>(n.value.rows, n.value.cols);
        return n.grad;
    }

    NodeId push(Matrix<S> value, bool requires_grad, std::function<void(const Node&)> bw) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
};

/// Central-difference check of a scalar-valued tape program. `build` receives
/// a tape plus the leaf ids for `params` (same keys) and must return the loss
/// node. With samples_per_tensor = 0 every entry is checked; otherwise a
/// seeded subset per tensor.
template <typename S, typename Build>
GradCheckReport grad_check(const std::map<std::string, Matrix<S>>& params, Build&& build,
                           double eps = 1e-5, std::size_t samples_per_tensor = 0,
                           std::uint64_t seed = 0) {
    using NodeId = typename Tape<S>::NodeId;

    auto run = [&](const std::map<std::string, Matrix<S>>& p, Tape<S>* keep,
                   std::map<std::string, NodeId>* ids_out) -> double {
        Tape<S> local;
        Tape<S>& tape = keep ? *keep : local;
        std::map<std::string, NodeId> ids;
        for (const auto& [name, m] : p) ids[name] = tape.param(m);
        const NodeId loss = build(tape, ids);
        if (ids_out) *ids_out = ids;
        if (keep) tape.backward(loss);
        return static_cast<double>(tape.value(loss).at(0, 0));
    };

    Tape<S> tape;
    std::map<std::string, NodeId> ids;
    run(params, &tape, &ids);

    GradCheckReport report;
    Rng rng(seed);
    for (const auto& [name, m] : params) {
        GradCheckEntry entry;
        entry.name = name;
        std::vector<std::size_t> picks;
        if (samples_per_tensor == 0 || samples_per_tensor >= m.size()) {
            picks.resize(m.size());
            for (std::size_t i = 0; i < m.size(); ++i) picks[i] = i;
        } else {
            for (std::size_t k = 0; k < samples_per_tensor; ++k)
                picks.push_back(rng.uniform_index(m.size()));
        }
        for (std::size_t idx : picks) {
            auto perturbed = params;
            const S saved = perturbed[name].data[idx];
            const S up_v = saved + static_cast<S>(eps);
            const S down_v = saved - static_cast<S>(eps);
            perturbed[name].data[idx] = up_v;
            const double up = run(perturbed, nullptr, nullptr);
            perturbed[name].data[idx] = down_v;
            const double down = run(perturbed, nullptr, nullptr);
            // use the realized step so low-precision scalars stay accurate
            const double fd = (up - down) / (double(up_v) - double(down_v));
            const double an = tape.has_grad(ids[name])
                                  ? static_cast<double>(tape.grad(ids[name]).data[idx])
                                  : 0.0;
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            entry.max_rel_err = std::max(entry.max_rel_err, std::abs(fd - an) / denom);
            ++entry.checked;
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace pepdiff::ad
