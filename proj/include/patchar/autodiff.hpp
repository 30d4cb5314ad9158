// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reverse-mode tape over dense tensors, restricted to the ops the patch
// decoder needs. Reductions always run in ascending index order so that a
// fixed input gives bit-identical results.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "patchar/errors.hpp"
#include "patchar/tensor.hpp"

namespace patchar {

/// Trainable tensor with its gradient accumulator.
template <class T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape) {}
    void zero_grad() { grad.fill(T(0)); }
};

/// Boolean visibility matrix for attention, true = key visible to query.
struct AttentionMask {
    std::size_t q_len = 0;
    std::size_t k_len = 0;
    std::vector<std::uint8_t> visible;

    static AttentionMask all(std::size_t q, std::size_t k) { return {q, k, std::vector<std::uint8_t>(q * k, 1)}; }
    bool operator()(std::size_t i, std::size_t j) const { return visible[i * k_len + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { visible[i * k_len + j] = v ? 1 : 0; }
};

inline constexpr double kMaskedScore = -1e9;

template <class T>
class Graph {
public:
    struct Var {
        std::size_t id = SIZE_MAX;
        bool valid() const { return id != SIZE_MAX; }
    };

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var constant(Tensor<T> v) {
        Node n;
        n.own_value = std::move(v);
        return push(std::move(n));
    }

    /// Leaf bound to a parameter: no copy, gradients accumulate into p.grad.
    Var param(Parameter<T>& p) {
        Node n;
        n.value_ref = &p.value;
        if (grad_enabled_) {
            n.requires_grad = true;
            if (p.grad.shape != p.value.shape) p.grad = Tensor<T>(p.value.shape);
            n.grad_ref = &p.grad;
        }
        return push(std::move(n));
    }

    const Tensor<T>& value(Var v) const { return nodes_[v.id].value(); }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Gradient accumulator of a node (allocated on first use).
    Tensor<T>& grad(Var v) { return nodes_[v.id].grad(); }

    // ---------------------------------------------------------------- ops

    Var matmul(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
            throw ShapeError("matmul: " + shape_str(A.shape) + " x " + shape_str(B.shape));
        const std::size_t n = A.shape[0], k = A.shape[1], m = B.shape[1];
        Tensor<T> C({n, m});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const T a_ip = A.data[i * k + p];
                const T* brow = &B.data[p * m];
                T* crow = &C.data[i * m];
                for (std::size_t j = 0; j < m; ++j) crow[j] += a_ip * brow[j];
            }
        return op(std::move(C), {a, b}, [this, a, b, n, k, m](Var out) {
            const auto& dC = grad(out);
            if (requires_grad(a)) {
                const auto& B = value(b);
                auto& dA = grad(a);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = 0;
                        for (std::size_t j = 0; j < m; ++j) acc += dC.data[i * m + j] * B.data[p * m + j];
                        dA.data[i * k + p] += acc;
                    }
            }
            if (requires_grad(b)) {
                const auto& A = value(a);
                auto& dB = grad(b);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const T a_ip = A.data[i * k + p];
                        for (std::size_t j = 0; j < m; ++j) dB.data[p * m + j] += a_ip * dC.data[i * m + j];
                    }
            }
        });
    }

    Var add(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.shape != B.shape) throw ShapeError("add: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
        Tensor<T> C = A;
        for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
        return op(std::move(C), {a, b}, [this, a, b](Var out) {
            const auto& dC = grad(out);
            for (Var x : {a, b})
                if (requires_grad(x)) {
                    auto& dX = grad(x);
                    for (std::size_t i = 0; i < dC.size(); ++i) dX.data[i] += dC.data[i];
                }
        });
    }

    /// a (n x m) + row (m), broadcast over rows.
    Var add_row(Var a, Var row) {
        const auto& A = value(a);
        const auto& R = value(row);
        if (A.shape.size() != 2 || R.size() != A.shape[1])
            throw ShapeError("add_row: " + shape_str(A.shape) + " + " + shape_str(R.shape));
        const std::size_t n = A.shape[0], m = A.shape[1];
        Tensor<T> C = A;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) C.data[i * m + j] += R.data[j];
        return op(std::move(C), {a, row}, [this, a, row, n, m](Var out) {
            const auto& dC = grad(out);
            if (requires_grad(a)) {
                auto& dA = grad(a);
                for (std::size_t i = 0; i < dC.size(); ++i) dA.data[i] += dC.data[i];
            }
            if (requires_grad(row)) {
                auto& dR = grad(row);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) dR.data[j] += dC.data[i * m + j];
            }
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> C = value(a);
        for (auto& v : C.data) v *= s;
        return op(std::move(C), {a}, [this, a, s](Var out) {
            const auto& dC = grad(out);
            auto& dA = grad(a);
            for (std::size_t i = 0; i < dC.size(); ++i) dA.data[i] += s * dC.data[i];
        });
    }

    Var sum(Var a) {
        T acc = 0;
        for (auto v : value(a).data) acc += v;
        return op(Tensor<T>({1}, std::vector<T>{acc}), {a}, [this, a](Var out) {
            const T g = grad(out).data[0];
            auto& dA = grad(a);
            for (auto& v : dA.data) v += g;
        });
    }

    /// Row-wise layer normalisation with gain and bias vectors.
    Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
        const auto& X = value(x);
        const auto& G = value(gain);
        const auto& B = value(bias);
        if (X.shape.size() != 2 || G.size() != X.shape[1] || B.size() != X.shape[1])
            throw ShapeError("layer_norm: " + shape_str(X.shape));
        const std::size_t n = X.shape[0], m = X.shape[1];
        Tensor<T> Y({n, m});
        std::vector<T> xhat(n * m), inv_std(n);
        for (std::size_t i = 0; i < n; ++i) {
            T mean = 0;
            for (std::size_t j = 0; j < m; ++j) mean += X.data[i * m + j];
            mean /= static_cast<T>(m);
            T var = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const T c = X.data[i * m + j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(m);
            inv_std[i] = T(1) / std::sqrt(var + eps);
            for (std::size_t j = 0; j < m; ++j) {
                xhat[i * m + j] = (X.data[i * m + j] - mean) * inv_std[i];
                Y.data[i * m + j] = xhat[i * m + j] * G.data[j] + B.data[j];
            }
        }
        return op(std::move(Y), {x, gain, bias},
                  [this, x, gain, bias, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Var out) {
                      const auto& dY = grad(out);
                      const auto& G = value(gain);
                      if (requires_grad(gain) || requires_grad(bias)) {
                          for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j) {
                                  if (requires_grad(gain)) grad(gain).data[j] += dY.data[i * m + j] * xhat[i * m + j];
                                  if (requires_grad(bias)) grad(bias).data[j] += dY.data[i * m + j];
                              }
                      }
                      if (requires_grad(x)) {
                          auto& dX = grad(x);
                          for (std::size_t i = 0; i < n; ++i) {
                              T s1 = 0, s2 = 0;
                              for (std::size_t j = 0; j < m; ++j) {
                                  const T g = dY.data[i * m + j] * G.data[j];
                                  s1 += g;
                                  s2 += g * xhat[i * m + j];
                              }
                              const T inv_m = T(1) / static_cast<T>(m);
                              for (std::size_t j = 0; j < m; ++j) {
                                  const T g = dY.data[i * m + j] * G.data[j];
                                  dX.data[i * m + j] += inv_std[i] * (g - inv_m * s1 - xhat[i * m + j] * inv_m * s2);
                              }
                          }
                      }
                  });
    }

    /// Exact GELU, x * Phi(x).
    Var gelu(Var x) {
        Tensor<T> Y = value(x);
        for (auto& v : Y.data) v = v * cdf(v);
        return op(std::move(Y), {x}, [this, x](Var out) {
            const auto& X = value(x);
            const auto& dY = grad(out);
            auto& dX = grad(x);
            for (std::size_t i = 0; i < X.size(); ++i) {
                const T v = X.data[i];
                const T pdf = std::exp(-v * v / T(2)) / std::sqrt(T(2) * std::numbers::pi_v<T>);
                dX.data[i] += dY.data[i] * (cdf(v) + v * pdf);
            }
        });
    }

    /// Rows `ids` of a 2-D table.
    Var gather_rows(Var table, std::vector<std::size_t> ids) {
        const auto& W = value(table);
        if (W.shape.size() != 2) throw ShapeError("gather_rows: table must be 2-D");
        const std::size_t m = W.shape[1];
        Tensor<T> Y({ids.size(), m});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= W.shape[0]) throw RangeError("gather_rows: id out of range");
            std::copy_n(&W.data[ids[i] * m], m, &Y.data[i * m]);
        }
        return op(std::move(Y), {table}, [this, table, m, ids = std::move(ids)](Var out) {
            const auto& dY = grad(out);
            auto& dW = grad(table);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < m; ++j) dW.data[ids[i] * m + j] += dY.data[i * m + j];
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no inputs");
        const std::size_t m = value(parts[0]).cols();
        std::size_t n = 0;
        for (Var p : parts) {
            if (value(p).shape.size() != 2 || value(p).shape[1] != m) throw ShapeError("concat_rows: width mismatch");
            n += value(p).shape[0];
        }
        Tensor<T> Y({n, m});
        std::size_t off = 0;
        for (Var p : parts) {
            std::copy(value(p).data.begin(), value(p).data.end(), Y.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += value(p).size();
        }
        return op(std::move(Y), parts, [this, parts](Var out) {
            const auto& dY = grad(out);
            std::size_t off = 0;
            for (Var p : parts) {
                const auto len = value(p).size();
                if (requires_grad(p)) {
                    auto& dP = grad(p);
                    for (std::size_t i = 0; i < len; ++i) dP.data[i] += dY.data[off + i];
                }
                off += len;
            }
        });
    }

    /// Per-head sums of a (k x d) tensor: (k x heads).
    Var head_sums(Var x, std::size_t heads) {
        const auto& X = value(x);
        if (X.shape.size() != 2 || heads == 0 || X.shape[1] % heads) throw ShapeError("head_sums: bad shape");
        const std::size_t k = X.shape[0], d = X.shape[1], dh = d / heads;
        Tensor<T> Y({k, heads});
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t t = 0; t < dh; ++t) Y.data[j * heads + h] += X.data[j * d + h * dh + t];
        return op(std::move(Y), {x}, [this, x, k, d, dh, heads](Var out) {
            const auto& dY = grad(out);
            auto& dX = grad(x);
            for (std::size_t j = 0; j < k; ++j)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t t = 0; t < dh; ++t) dX.data[j * d + h * dh + t] += dY.data[j * heads + h];
        });
    }

    /// Multi-head scaled dot-product attention. Q: q x d, K,V: k x d, split
    /// into `heads` column blocks. Scores are QK^T/sqrt(d_h), plus key_bias
    /// (k x heads) when given, plus -1e9 on masked entries.
    Var attention(Var q, Var k, Var v, std::size_t heads, const AttentionMask& mask,
                  std::optional<Var> key_bias = std::nullopt) {
        const auto& Q = value(q);
        const auto& K = value(k);
        const auto& V = value(v);
        if (Q.shape.size() != 2 || K.shape.size() != 2 || V.shape != K.shape || Q.shape[1] != K.shape[1] || heads == 0 ||
            Q.shape[1] % heads)
            throw ShapeError("attention: Q" + shape_str(Q.shape) + " K" + shape_str(K.shape) + " V" +
                             shape_str(V.shape));
        const std::size_t nq = Q.shape[0], nk = K.shape[0], d = Q.shape[1], dh = d / heads;
        if (mask.q_len != nq || mask.k_len != nk) throw ShapeError("attention: mask shape mismatch");
        if (key_bias) {
            const auto& Bv = value(*key_bias);
            if (Bv.shape.size() != 2 || Bv.shape[0] != nk || Bv.shape[1] != heads)
                throw ShapeError("attention: key bias must be k x heads");
        }
        for (std::size_t i = 0; i < nq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < nk && !any; ++j) any = mask(i, j);
            if (!any) throw DegenerateRowError("attention: query row " + std::to_string(i) + " sees no key");
        }
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        Tensor<T> Y({nq, d});
        std::vector<T> probs(heads * nq * nk);
        std::vector<T> s(nk);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < nq; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < nk; ++j) {
                    T dot = 0;
                    for (std::size_t t = 0; t < dh; ++t) dot += Q.data[i * d + h * dh + t] * K.data[j * d + h * dh + t];
                    T sc = dot * scale;
                    if (key_bias) sc += value(*key_bias).data[j * heads + h];
                    if (!mask(i, j)) sc += static_cast<T>(kMaskedScore);
                    s[j] = sc;
                    mx = std::max(mx, sc);
                }
                T z = 0;
                for (std::size_t j = 0; j < nk; ++j) {
                    s[j] = std::exp(s[j] - mx);
                    z += s[j];
                }
                T* p = &probs[(h * nq + i) * nk];
                for (std::size_t j = 0; j < nk; ++j) p[j] = s[j] / z;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (p[j] == T(0)) continue;
                    for (std::size_t t = 0; t < dh; ++t) Y.data[i * d + h * dh + t] += p[j] * V.data[j * d + h * dh + t];
                }
            }
        std::vector<Var> inputs{q, k, v};
        if (key_bias) inputs.push_back(*key_bias);
        return op(std::move(Y), inputs,
                  [this, q, k, v, key_bias, heads, nq, nk, d, dh, scale, probs = std::move(probs)](Var out) {
                      const auto& dY = grad(out);
                      const auto& Q = value(q);
                      const auto& K = value(k);
                      const auto& V = value(v);
                      std::vector<T> dp(nk), ds(nk);
                      for (std::size_t h = 0; h < heads; ++h)
                          for (std::size_t i = 0; i < nq; ++i) {
                              const T* p = &probs[(h * nq + i) * nk];
                              T dot_pd = 0;
                              for (std::size_t j = 0; j < nk; ++j) {
                                  T acc = 0;
                                  for (std::size_t t = 0; t < dh; ++t)
                                      acc += dY.data[i * d + h * dh + t] * V.data[j * d + h * dh + t];
                                  dp[j] = acc;
                                  dot_pd += p[j] * acc;
                              }
                              for (std::size_t j = 0; j < nk; ++j) ds[j] = p[j] * (dp[j] - dot_pd);
                              if (requires_grad(v)) {
                                  auto& dV = grad(v);
                                  for (std::size_t j = 0; j < nk; ++j)
                                      for (std::size_t t = 0; t < dh; ++t)
                                          dV.data[j * d + h * dh + t] += p[j] * dY.data[i * d + h * dh + t];
                              }
                              if (requires_grad(q)) {
                                  auto& dQ = grad(q);
                                  for (std::size_t t = 0; t < dh; ++t) {
                                      T acc = 0;
                                      for (std::size_t j = 0; j < nk; ++j) acc += ds[j] * K.data[j * d + h * dh + t];
                                      dQ.data[i * d + h * dh + t] += scale * acc;
                                  }
                              }
                              if (requires_grad(k)) {
                                  auto& dK = grad(k);
                                  for (std::size_t j = 0; j < nk; ++j)
                                      for (std::size_t t = 0; t < dh; ++t)
                                          dK.data[j * d + h * dh + t] += scale * ds[j] * Q.data[i * d + h * dh + t];
                              }
                              if (key_bias && requires_grad(*key_bias)) {
                                  auto& dB = grad(*key_bias);
                                  for (std::size_t j = 0; j < nk; ++j) dB.data[j * heads + h] += ds[j];
                              }
                          }
                  });
    }

    /// Mean cross-entropy of the selected rows of `logits` (rows x vocab)
    /// against `targets`. Rows with weight 0 are ignored; all rows count when
    /// `rows` is empty. Max-subtracted log-sum-exp.
    Var softmax_ce(Var logits, const std::vector<std::uint32_t>& targets, std::vector<std::uint8_t> rows = {}) {
        const auto& X = value(logits);
        if (X.shape.size() != 2 || targets.size() != X.shape[0]) throw ShapeError("softmax_ce: one target per row");
        const std::size_t n = X.shape[0], m = X.shape[1];
        if (rows.empty()) rows.assign(n, 1);
        std::size_t count = 0;
        for (auto r : rows) count += r ? 1 : 0;
        if (count == 0) throw ShapeError("softmax_ce: no rows selected");
        std::vector<T> probs(n * m);
        T total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!rows[i]) continue;
            if (targets[i] >= m) throw RangeError("softmax_ce: target outside vocab");
            T mx = X.data[i * m];
            for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, X.data[i * m + j]);
            T z = 0;
            for (std::size_t j = 0; j < m; ++j) {
                probs[i * m + j] = std::exp(X.data[i * m + j] - mx);
                z += probs[i * m + j];
            }
            for (std::size_t j = 0; j < m; ++j) probs[i * m + j] /= z;
            total += -(X.data[i * m + targets[i]] - mx - std::log(z));
        }
        const T inv = T(1) / static_cast<T>(count);
        return op(Tensor<T>({1}, std::vector<T>{total * inv}), {logits},
                  [this, logits, n, m, inv, targets, rows = std::move(rows), probs = std::move(probs)](Var out) {
                      const T g = grad(out).data[0] * inv;
                      auto& dX = grad(logits);
                      for (std::size_t i = 0; i < n; ++i) {
                          if (!rows[i]) continue;
                          for (std::size_t j = 0; j < m; ++j)
                              dX.data[i * m + j] += g * (probs[i * m + j] - (j == targets[i] ? T(1) : T(0)));
                      }
                  });
    }

    /// Reverse sweep from a scalar node (seed gradient 1).
    void backward(Var loss) {
        if (!grad_enabled_) throw UsageError("backward on a graph built without gradients");
        if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
        if (!requires_grad(loss)) return;
        grad(loss).data[0] += T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.backward && n.has_grad()) n.backward(Var{i});
        }
    }

private:
    struct Node {
        Tensor<T> own_value;
        const Tensor<T>* value_ref = nullptr;
        Tensor<T> own_grad;
        Tensor<T>* grad_ref = nullptr;
        bool requires_grad = false;
        std::function<void(Var)> backward;

        const Tensor<T>& value() const { return value_ref ? *value_ref : own_value; }
        bool has_grad() const { return grad_ref || !own_grad.data.empty() || value().size() == 0; }
        Tensor<T>& grad() {
            if (grad_ref) return *grad_ref;
            if (own_grad.shape != value().shape) own_grad = Tensor<T>(value().shape);
            return own_grad;
        }
    };

    static T cdf(T v) { return T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2)))); }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    template <class Backward>
    Var op(Tensor<T> out, const std::vector<Var>& inputs, Backward&& bw) {
        Node n;
        n.own_value = std::move(out);
        if (grad_enabled_) {
            for (Var in : inputs) n.requires_grad = n.requires_grad || requires_grad(in);
            if (n.requires_grad) n.backward = std::forward<Backward>(bw);
        }
        return push(std::move(n));
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

}  // namespace patchar
