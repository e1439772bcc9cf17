#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mose/bitmask.hpp"
#include "mose/tensor.hpp"

namespace mose {

// Dense math over rank-1/2 tensors, all differentiable unless noted.

Tensor matmul(Tensor a, Tensor b);           // [m x k] * [k x n]
Tensor transpose(Tensor x);                  // [m x n] -> [n x m]
Tensor add(Tensor a, Tensor b);              // same shape
Tensor scale(Tensor x, double c);
Tensor row_scale(Tensor x, Tensor s);        // [m x d] scaled per row by [m] or [m x 1]
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_rows(Tensor x, int r0, int r1); // rows [r0, r1)
Tensor slice_cols(Tensor x, int c0, int c1);
Tensor mean_rows(Tensor x);                  // [m x d] -> [1 x d]
Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps = 1e-5);
Tensor gelu(Tensor x);                       // exact erf form

// Row-wise softmax along `axis` (default: last). axis 0 on a matrix
// normalizes columns.
Tensor softmax(Tensor x, int axis = -1);

// Mean negative log-likelihood of integer labels under row-wise softmax.
Tensor cross_entropy(Tensor logits, const std::vector<int>& labels);

// <u,v> / (|u||v|), shapes flattened; throws DegenerateInputError on zero norm.
Tensor cosine_similarity(Tensor u, Tensor v);

// Indices of the k largest values, descending by value, ties to lowest index.
std::vector<int> topk_indices(const std::vector<double>& x, int k);

// w elementwise-masked by a constant bitmask. Weight grads are masked;
// score grads use the straight-through rule s.grad += g * w on every entry.
Tensor masked_weight(Tensor w, Tensor scores, const BitMask& mask);
Tensor masked_weight(Tensor w, const BitMask& mask);

// Renormalizes the selected columns of a row-stochastic matrix: out[i][j] =
// p[i][sel[i][j]] / sum_j p[i][sel[i][j]]. Selection is a constant.
Tensor topk_renorm(Tensor probs, const std::vector<std::vector<int>>& sel);

Tensor gather_rows(Tensor x, const std::vector<int>& rows);
// Inverse of gather_rows: places x's rows at `rows` within a [total x d] zero tensor.
Tensor scatter_rows(Tensor x, const std::vector<int>& rows, int total_rows);
// Picks entries (r, c) of x into an [n x 1] column.
Tensor gather_entries(Tensor x, const std::vector<std::pair<int, int>>& idx);

// Max over entries of |analytic - central difference| / max(1, |analytic|),
// where f rebuilds the scalar loss from x's current contents.
double grad_check(const std::function<Tensor()>& f, Tensor x, double h = 1e-5);

} // namespace mose
