#pragma once

#include <vector>

#include "cim/graph.hpp"
#include "cim/macro.hpp"

namespace cim {

// --- dense linear algebra helpers (also used by the simulator's float tail) ---

// C[M,N] += A[M,K] * B[K,N], row-major. Accumulation over k is in ascending
// order so float results are reproducible.
void gemm_acc(int M, int N, int K, const double* A, const double* B, double* C);

int conv_out_dim(int in, int k, int stride, int pad);

// col buffer layout: [C*k*k, Ho*Wo]
void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, double* col);
void col2im_acc(const double* col, int C, int H, int W, int k, int stride, int pad, double* x);

// --- graph ops ---

// x: [N,C,H,W], w: [Co,Ci,k,k], optional bias [Co]
NodeP conv2d(NodeP x, NodeP w, NodeP bias, int stride, int pad);
// x: [N,F], w: [O,F], bias [O]
NodeP linear(NodeP x, NodeP w, NodeP bias);
NodeP relu(NodeP x);
NodeP maxpool2d(NodeP x, int k, int stride);
NodeP global_avgpool(NodeP x);      // [N,C,H,W] -> [N,C]
NodeP add(NodeP a, NodeP b);
NodeP flatten(NodeP x);             // [N,...] -> [N,F]

// Training-mode batchnorm: normalizes with batch statistics and updates the
// provided running stats in place (momentum convention: new = (1-m)*old + m*batch).
NodeP batchnorm_train(NodeP x, NodeP gamma, NodeP beta, Tensor& run_mean, Tensor& run_var,
                      double eps, double momentum);
// Inference-mode batchnorm using running statistics.
NodeP batchnorm_infer(NodeP x, NodeP gamma, NodeP beta, const Tensor& run_mean,
                      const Tensor& run_var, double eps);

// Mean cross-entropy over the batch; logits [N,K].
NodeP cross_entropy(NodeP logits, const std::vector<int>& labels);

// Elementwise multiply by a constant vector (used for BN fold: s = gamma * rsqrt(var+eps)).
NodeP cmul(NodeP x, Tensor c);
// value = beta - mu .* s  (folded conv bias; mu constant)
NodeP fold_bias(NodeP beta, NodeP s, Tensor mu);
// Scales filter c of w [Co,Ci,k,k] by s[c].
NodeP scale_filters(NodeP w, NodeP s);

}  // namespace cim
