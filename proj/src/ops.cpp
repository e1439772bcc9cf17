#include "mose/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace mose {

namespace {

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (!std::isfinite(v)) throw EvalError(std::string(op) + ": non-finite value produced");
}

} // namespace

Tensor matmul(Tensor a, Tensor b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expected rank-2 operands, got " +
                             shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& A = a.data();
    const auto& B = b.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = A[static_cast<std::size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = &B[static_cast<std::size_t>(p) * n];
            double* orow = &out[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& node) {
        const auto& g = node.grad;
        TensorNode* pa = node.parents[0].get();
        TensorNode* pb = node.parents[1].get();
        if (pa->requires_grad) {
            pa->ensure_grad();
            // a.grad += g * b^T
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = &g[static_cast<std::size_t>(i) * n];
                    const double* brow = &pb->data[static_cast<std::size_t>(p) * n];
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    pa->grad[static_cast<std::size_t>(i) * k + p] += s;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // b.grad += a^T * g
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double av = pa->data[static_cast<std::size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    const double* grow = &g[static_cast<std::size_t>(i) * n];
                    double* brow = &pb->grad[static_cast<std::size_t>(p) * n];
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

Tensor transpose(Tensor x) {
    if (x.rank() != 2)
        throw DimensionError("transpose: expected rank-2, got " + shape_str(x.shape()));
    const int m = x.rows(), n = x.cols();
    std::vector<double> out(x.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = x.data()[static_cast<std::size_t>(i) * n + j];
    return make_op({n, m}, std::move(out), {x}, [m, n](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                p->grad[static_cast<std::size_t>(i) * n + j] +=
                    node.grad[static_cast<std::size_t>(j) * m + i];
    });
}

Tensor add(Tensor a, Tensor b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& node) {
        for (int side = 0; side < 2; ++side) {
            TensorNode* p = node.parents[side].get();
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += node.grad[i];
        }
    });
}

Tensor scale(Tensor x, double c) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    return make_op(x.shape(), std::move(out), {x}, [c](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += c * node.grad[i];
    });
}

Tensor row_scale(Tensor x, Tensor s) {
    const int m = x.rows(), d = x.cols();
    if (static_cast<int>(s.size()) != m)
        throw DimensionError("row_scale: scale length " + std::to_string(s.size()) +
                             " vs rows " + std::to_string(m));
    std::vector<double> out(x.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j)
            out[static_cast<std::size_t>(i) * d + j] =
                x.data()[static_cast<std::size_t>(i) * d + j] * s.data()[i];
    return make_op(x.shape(), std::move(out), {x, s}, [m, d](TensorNode& node) {
        TensorNode* px = node.parents[0].get();
        TensorNode* ps = node.parents[1].get();
        if (px->requires_grad) {
            px->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j)
                    px->grad[static_cast<std::size_t>(i) * d + j] +=
                        node.grad[static_cast<std::size_t>(i) * d + j] * ps->data[i];
        }
        if (ps->requires_grad) {
            ps->ensure_grad();
            for (int i = 0; i < m; ++i) {
                double acc = 0.0;
                for (int j = 0; j < d; ++j)
                    acc += node.grad[static_cast<std::size_t>(i) * d + j] *
                           px->data[static_cast<std::size_t>(i) * d + j];
                ps->grad[i] += acc;
            }
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_rows: empty input");
    const int d = xs[0].cols();
    int m = 0;
    for (const Tensor& t : xs) {
        if (t.cols() != d)
            throw DimensionError("concat_rows: column mismatch, " + std::to_string(t.cols()) +
                                 " vs " + std::to_string(d));
        m += t.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m) * d);
    for (const Tensor& t : xs) out.insert(out.end(), t.data().begin(), t.data().end());
    std::vector<int> row_counts;
    for (const Tensor& t : xs) row_counts.push_back(t.rows());
    return make_op({m, d}, std::move(out), xs, [row_counts, d](TensorNode& node) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < node.parents.size(); ++k) {
            TensorNode* p = node.parents[k].get();
            std::size_t len = static_cast<std::size_t>(row_counts[k]) * d;
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < len; ++i) p->grad[i] += node.grad[off + i];
            }
            off += len;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_cols: empty input");
    const int m = xs[0].rows();
    int d = 0;
    for (const Tensor& t : xs) {
        if (t.rows() != m)
            throw DimensionError("concat_cols: row mismatch");
        d += t.cols();
    }
    std::vector<double> out(static_cast<std::size_t>(m) * d);
    int coff = 0;
    for (const Tensor& t : xs) {
        const int tc = t.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < tc; ++j)
                out[static_cast<std::size_t>(i) * d + coff + j] =
                    t.data()[static_cast<std::size_t>(i) * tc + j];
        coff += tc;
    }
    std::vector<int> col_counts;
    for (const Tensor& t : xs) col_counts.push_back(t.cols());
    return make_op({m, d}, std::move(out), xs, [m, d, col_counts](TensorNode& node) {
        int coff2 = 0;
        for (std::size_t k = 0; k < node.parents.size(); ++k) {
            TensorNode* p = node.parents[k].get();
            const int tc = col_counts[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < tc; ++j)
                        p->grad[static_cast<std::size_t>(i) * tc + j] +=
                            node.grad[static_cast<std::size_t>(i) * d + coff2 + j];
            }
            coff2 += tc;
        }
    });
}

Tensor slice_rows(Tensor x, int r0, int r1) {
    const int m = x.rows(), d = x.cols();
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw DimensionError("slice_rows: invalid range [" + std::to_string(r0) + ", " +
                             std::to_string(r1) + ") for " + std::to_string(m) + " rows");
    std::vector<double> out(x.data().begin() + static_cast<std::size_t>(r0) * d,
                            x.data().begin() + static_cast<std::size_t>(r1) * d);
    return make_op({r1 - r0, d}, std::move(out), {x}, [r0, d](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        const std::size_t base = static_cast<std::size_t>(r0) * d;
        for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[base + i] += node.grad[i];
    });
}

Tensor slice_cols(Tensor x, int c0, int c1) {
    const int m = x.rows(), d = x.cols();
    if (c0 < 0 || c1 > d || c0 >= c1)
        throw DimensionError("slice_cols: invalid range");
    const int w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<std::size_t>(i) * w + j] =
                x.data()[static_cast<std::size_t>(i) * d + c0 + j];
    return make_op({m, w}, std::move(out), {x}, [m, d, c0, w](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                p->grad[static_cast<std::size_t>(i) * d + c0 + j] +=
                    node.grad[static_cast<std::size_t>(i) * w + j];
    });
}

Tensor mean_rows(Tensor x) {
    const int m = x.rows(), d = x.cols();
    std::vector<double> out(d, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) out[j] += x.data()[static_cast<std::size_t>(i) * d + j];
    for (int j = 0; j < d; ++j) out[j] /= m;
    return make_op({1, d}, std::move(out), {x}, [m, d](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j)
                p->grad[static_cast<std::size_t>(i) * d + j] += node.grad[j] / m;
    });
}

Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps) {
    const int m = x.rows(), d = x.cols();
    if (static_cast<int>(gain.size()) != d || static_cast<int>(bias.size()) != d)
        throw DimensionError("layer_norm: gain/bias width mismatch");
    std::vector<double> out(x.size());
    std::vector<double> inv_std(m), xhat(x.size());
    for (int i = 0; i < m; ++i) {
        const double* row = &x.data()[static_cast<std::size_t>(i) * d];
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * istd;
            xhat[static_cast<std::size_t>(i) * d + j] = xh;
            out[static_cast<std::size_t>(i) * d + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [m, d, inv_std, xhat](TensorNode& node) {
        TensorNode* px = node.parents[0].get();
        TensorNode* pg = node.parents[1].get();
        TensorNode* pb = node.parents[2].get();
        if (pg->requires_grad) {
            pg->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j)
                    pg->grad[j] += node.grad[static_cast<std::size_t>(i) * d + j] *
                                   xhat[static_cast<std::size_t>(i) * d + j];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j)
                    pb->grad[j] += node.grad[static_cast<std::size_t>(i) * d + j];
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (int i = 0; i < m; ++i) {
                // dL/dxhat scaled by gain
                double sum_g = 0.0, sum_gx = 0.0;
                std::vector<double> gh(d);
                for (int j = 0; j < d; ++j) {
                    gh[j] = node.grad[static_cast<std::size_t>(i) * d + j] * pg->data[j];
                    sum_g += gh[j];
                    sum_gx += gh[j] * xhat[static_cast<std::size_t>(i) * d + j];
                }
                for (int j = 0; j < d; ++j) {
                    const double xh = xhat[static_cast<std::size_t>(i) * d + j];
                    px->grad[static_cast<std::size_t>(i) * d + j] +=
                        inv_std[i] * (gh[j] - sum_g / d - xh * sum_gx / d);
                }
            }
        }
    });
}

Tensor gelu(Tensor x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
    }
    return make_op(x.shape(), std::move(out), {x}, [](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const double v = p->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            p->grad[i] += node.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor softmax(Tensor x, int axis) {
    if (x.rank() < 1 || x.rank() > 2)
        throw DimensionError("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    if (r == 2 && axis == 0) return transpose(softmax(transpose(x), 1));

    const int m = x.rows(), n = x.cols();
    std::vector<double> out(x.size());
    for (int i = 0; i < m; ++i) {
        const double* row = &x.data()[static_cast<std::size_t>(i) * n];
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(i) * n + j] = std::exp(row[j] - mx) / z;
    }
    Tensor res = make_op(x.shape(), std::move(out), {x}, [m, n](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = &node.data[static_cast<std::size_t>(i) * n];
            const double* g = &node.grad[static_cast<std::size_t>(i) * n];
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += y[j] * g[j];
            for (int j = 0; j < n; ++j)
                p->grad[static_cast<std::size_t>(i) * n + j] += y[j] * (g[j] - dot);
        }
    });
    return res;
}

Tensor cross_entropy(Tensor logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("cross_entropy: logits must be [batch x classes], got " +
                             shape_str(logits.shape()));
    const int b = logits.rows(), c = logits.cols();
    if (static_cast<int>(labels.size()) != b)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(b));
    for (int label : labels)
        if (label < 0 || label >= c)
            throw InputError("cross_entropy: label " + std::to_string(label) +
                             " outside [0, " + std::to_string(c) + ")");
    double total = 0.0;
    std::vector<double> probs(logits.size());
    for (int i = 0; i < b; ++i) {
        const double* row = &logits.data()[static_cast<std::size_t>(i) * c];
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double logz = std::log(z) + mx;
        for (int j = 0; j < c; ++j)
            probs[static_cast<std::size_t>(i) * c + j] = std::exp(row[j] - logz);
        total += logz - row[labels[i]];
    }
    Tensor out = make_op({1}, {total / b}, {logits},
                         [b, c, labels, probs](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = node.grad[0] / b;
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < c; ++j)
                p->grad[static_cast<std::size_t>(i) * c + j] +=
                    g * (probs[static_cast<std::size_t>(i) * c + j] - (labels[i] == j ? 1.0 : 0.0));
    });
    check_finite(out, "cross_entropy");
    return out;
}

Tensor cosine_similarity(Tensor u, Tensor v) {
    if (u.size() != v.size())
        throw DimensionError("cosine_similarity: length mismatch, " + shape_str(u.shape()) +
                             " vs " + shape_str(v.shape()));
    const std::size_t n = u.size();
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        uu += u.data()[i] * u.data()[i];
        vv += v.data()[i] * v.data()[i];
        uv += u.data()[i] * v.data()[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (nu == 0.0 || nv == 0.0)
        throw DegenerateInputError("cosine_similarity: zero-norm input");
    const double c = uv / (nu * nv);
    return make_op({1}, {c}, {u, v}, [n, nu, nv, c](TensorNode& node) {
        TensorNode* pu = node.parents[0].get();
        TensorNode* pv = node.parents[1].get();
        const double g = node.grad[0];
        if (pu->requires_grad) {
            pu->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                pu->grad[i] += g * (pv->data[i] / (nu * nv) - c * pu->data[i] / (nu * nu));
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                pv->grad[i] += g * (pu->data[i] / (nu * nv) - c * pv->data[i] / (nv * nv));
        }
    });
}

std::vector<int> topk_indices(const std::vector<double>& x, int k) {
    if (k < 1 || k > static_cast<int>(x.size()))
        throw InputError("topk_indices: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(x.size()) + "]");
    std::vector<int> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&x](int a, int b) {
        if (x[a] != x[b]) return x[a] > x[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

namespace {

Tensor masked_weight_impl(Tensor w, Tensor scores, const BitMask& mask, bool with_scores) {
    if (mask.size() != w.size())
        throw DimensionError("masked_weight: mask length " + std::to_string(mask.size()) +
                             " vs weight size " + std::to_string(w.size()));
    std::vector<double> out(w.size());
    // copy so the closure doesn't dangle on caller-owned masks
    BitMask m = mask;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.get(i) ? w.data()[i] : 0.0;
    std::vector<Tensor> parents{w};
    if (with_scores) parents.push_back(scores);
    return make_op(w.shape(), std::move(out), std::move(parents),
                   [m, with_scores](TensorNode& node) {
        TensorNode* pw = node.parents[0].get();
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i)
                if (m.get(i)) pw->grad[i] += node.grad[i];
        }
        if (with_scores) {
            TensorNode* ps = node.parents[1].get();
            if (ps->requires_grad) {
                ps->ensure_grad();
                // straight-through: the selection is treated as identity, so
                // every score sees g * w regardless of the mask bit
                for (std::size_t i = 0; i < node.grad.size(); ++i)
                    ps->grad[i] += node.grad[i] * pw->data[i];
            }
        }
    });
}

} // namespace

Tensor masked_weight(Tensor w, Tensor scores, const BitMask& mask) {
    if (scores.size() != w.size())
        throw DimensionError("masked_weight: score length mismatch");
    return masked_weight_impl(w, scores, mask, true);
}

Tensor masked_weight(Tensor w, const BitMask& mask) {
    return masked_weight_impl(w, Tensor(), mask, false);
}

Tensor topk_renorm(Tensor probs, const std::vector<std::vector<int>>& sel) {
    const int m = probs.rows(), n = probs.cols();
    if (static_cast<int>(sel.size()) != m)
        throw DimensionError("topk_renorm: selection rows mismatch");
    const int k = sel.empty() ? 0 : static_cast<int>(sel[0].size());
    std::vector<double> out(static_cast<std::size_t>(m) * k);
    std::vector<double> sums(m);
    for (int i = 0; i < m; ++i) {
        if (static_cast<int>(sel[i].size()) != k)
            throw DimensionError("topk_renorm: ragged selection");
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += probs.data()[static_cast<std::size_t>(i) * n + sel[i][j]];
        sums[i] = s;
        for (int j = 0; j < k; ++j)
            out[static_cast<std::size_t>(i) * k + j] =
                probs.data()[static_cast<std::size_t>(i) * n + sel[i][j]] / s;
    }
    return make_op({m, k}, std::move(out), {probs}, [m, n, k, sel, sums](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int j = 0; j < k; ++j)
                dot += node.grad[static_cast<std::size_t>(i) * k + j] *
                       node.data[static_cast<std::size_t>(i) * k + j];
            for (int j = 0; j < k; ++j)
                p->grad[static_cast<std::size_t>(i) * n + sel[i][j]] +=
                    (node.grad[static_cast<std::size_t>(i) * k + j] - dot) / sums[i];
        }
    });
}

Tensor gather_rows(Tensor x, const std::vector<int>& rows) {
    const int m = x.rows(), d = x.cols();
    std::vector<double> out(rows.size() * static_cast<std::size_t>(d));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= m) throw DimensionError("gather_rows: row out of range");
        std::copy_n(&x.data()[static_cast<std::size_t>(rows[r]) * d], d,
                    &out[r * static_cast<std::size_t>(d)]);
    }
    return make_op({static_cast<int>(rows.size()), d}, std::move(out), {x},
                   [rows, d](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (int j = 0; j < d; ++j)
                p->grad[static_cast<std::size_t>(rows[r]) * d + j] +=
                    node.grad[r * static_cast<std::size_t>(d) + j];
    });
}

Tensor scatter_rows(Tensor x, const std::vector<int>& rows, int total_rows) {
    const int d = x.cols();
    if (x.rows() != static_cast<int>(rows.size()))
        throw DimensionError("scatter_rows: row-count mismatch");
    std::vector<double> out(static_cast<std::size_t>(total_rows) * d, 0.0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= total_rows)
            throw DimensionError("scatter_rows: row out of range");
        std::copy_n(&x.data()[r * static_cast<std::size_t>(d)], d,
                    &out[static_cast<std::size_t>(rows[r]) * d]);
    }
    return make_op({total_rows, d}, std::move(out), {x}, [rows, d](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (int j = 0; j < d; ++j)
                p->grad[r * static_cast<std::size_t>(d) + j] +=
                    node.grad[static_cast<std::size_t>(rows[r]) * d + j];
    });
}

Tensor gather_entries(Tensor x, const std::vector<std::pair<int, int>>& idx) {
    const int m = x.rows(), d = x.cols();
    std::vector<double> out(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        auto [i, j] = idx[r];
        if (i < 0 || i >= m || j < 0 || j >= d)
            throw DimensionError("gather_entries: index out of range");
        out[r] = x.data()[static_cast<std::size_t>(i) * d + j];
    }
    return make_op({static_cast<int>(idx.size()), 1}, std::move(out), {x},
                   [idx, d](TensorNode& node) {
        TensorNode* p = node.parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            p->grad[static_cast<std::size_t>(idx[r].first) * d + idx[r].second] += node.grad[r];
    });
}

double grad_check(const std::function<Tensor()>& f, Tensor x, double h) {
    Tensor loss = f();
    if (loss.size() != 1) throw EvalError("grad_check: f must return a scalar");
    if (!std::isfinite(loss.data()[0])) throw EvalError("grad_check: non-finite loss at x");
    x.zero_grad();
    loss.backward();
    std::vector<double> analytic = x.grad_view().empty()
                                       ? std::vector<double>(x.size(), 0.0)
                                       : x.grad_view();

    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        double fp;
        {
            NoGradGuard ng;
            fp = f().data()[0];
        }
        x.data()[i] = orig - h;
        double fm;
        {
            NoGradGuard ng;
            fm = f().data()[0];
        }
        x.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw EvalError("grad_check: non-finite loss under perturbation");
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace mose
