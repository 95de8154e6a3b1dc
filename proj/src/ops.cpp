#include "cim/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace cim {

void gemm_acc(int M, int N, int K, const double* A, const double* B, double* C) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<int64_t>(i) * K;
        double* c = C + static_cast<int64_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double aik = a[k];
            if (aik == 0.0) continue;
            const double* b = B + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
static void gemm_abt(int M, int N, int K, const double* A, const double* B, double* C) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<int64_t>(i) * K;
        double* c = C + static_cast<int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const double* b = B + static_cast<int64_t>(j) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
static void gemm_atb(int M, int N, int K, const double* A, const double* B, double* C) {
    for (int k = 0; k < K; ++k) {
        const double* a = A + static_cast<int64_t>(k) * M;
        const double* b = B + static_cast<int64_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const double aki = a[i];
            if (aki == 0.0) continue;
            double* c = C + static_cast<int64_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += aki * b[j];
        }
    }
}

int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, double* col) {
    const int Ho = conv_out_dim(H, k, stride, pad);
    const int Wo = conv_out_dim(W, k, stride, pad);
    int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj, ++r) {
                double* dst = col + r * Ho * Wo;
                const double* src = x + static_cast<int64_t>(c) * H * W;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int jj = oj * stride - pad + kj;
                        *dst++ = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                     ? src[static_cast<int64_t>(ii) * W + jj]
                                     : 0.0;
                    }
                }
            }
}

void col2im_acc(const double* col, int C, int H, int W, int k, int stride, int pad, double* x) {
    const int Ho = conv_out_dim(H, k, stride, pad);
    const int Wo = conv_out_dim(W, k, stride, pad);
    int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj, ++r) {
                const double* src = col + r * Ho * Wo;
                double* dst = x + static_cast<int64_t>(c) * H * W;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) { src += Wo; continue; }
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < W) dst[static_cast<int64_t>(ii) * W + jj] += src[oj];
                    }
                    src += Wo;
                }
            }
}

static void check_4d(const Tensor& t, const char* op) {
    if (t.shape.size() != 4)
        throw std::runtime_error(std::string(op) + ": expected 4-D input, got " + t.shape_str());
}

NodeP conv2d(NodeP x, NodeP w, NodeP bias, int stride, int pad) {
    check_4d(x->value, "conv2d");
    if (w->value.shape.size() != 4)
        throw std::runtime_error("conv2d: weight must be 4-D, got " + w->value.shape_str());
    const int N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int Co = w->value.dim(0), k = w->value.dim(2);
    if (w->value.dim(1) != Ci)
        throw std::runtime_error("conv2d: input channels " + std::to_string(Ci) +
                                 " do not match weight " + w->value.shape_str());
    if (pad < 0) throw std::runtime_error("conv2d: padding must be >= 0");
    const int Ho = conv_out_dim(H, k, stride, pad), Wo = conv_out_dim(W, k, stride, pad);
    const int ckk = Ci * k * k, hw = Ho * Wo;

    auto n = std::make_shared<Node>();
    n->value = Tensor({N, Co, Ho, Wo});
    n->parents = {x, w};
    if (bias) n->parents.push_back(bias);
    n->requires_grad = x->requires_grad || w->requires_grad || (bias && bias->requires_grad);

    std::vector<double> col(static_cast<size_t>(ckk) * hw);
    for (int img = 0; img < N; ++img) {
        im2col(x->value.v.data() + static_cast<int64_t>(img) * Ci * H * W, Ci, H, W, k, stride,
               pad, col.data());
        double* out = n->value.v.data() + static_cast<int64_t>(img) * Co * hw;
        gemm_acc(Co, hw, ckk, w->value.v.data(), col.data(), out);
        if (bias)
            for (int co = 0; co < Co; ++co)
                for (int p = 0; p < hw; ++p) out[static_cast<int64_t>(co) * hw + p] += bias->value[co];
    }

    n->backward_fn = [=](Node& self) {
        NodeP xn = self.parents[0], wn = self.parents[1];
        NodeP bn = self.parents.size() > 2 ? self.parents[2] : nullptr;
        std::vector<double> colb(static_cast<size_t>(ckk) * hw);
        std::vector<double> colg;
        if (xn->requires_grad) {
            xn->ensure_grad();
            colg.resize(static_cast<size_t>(ckk) * hw);
        }
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        for (int img = 0; img < N; ++img) {
            const double* g = self.grad.v.data() + static_cast<int64_t>(img) * Co * hw;
            if (wn->requires_grad || xn->requires_grad)
                im2col(xn->value.v.data() + static_cast<int64_t>(img) * Ci * H * W, Ci, H, W, k,
                       stride, pad, colb.data());
            if (wn->requires_grad) gemm_abt(Co, ckk, hw, g, colb.data(), wn->grad.v.data());
            if (xn->requires_grad) {
                std::fill(colg.begin(), colg.end(), 0.0);
                gemm_atb(ckk, hw, Co, wn->value.v.data(), g, colg.data());
                col2im_acc(colg.data(), Ci, H, W, k, stride, pad,
                           xn->grad.v.data() + static_cast<int64_t>(img) * Ci * H * W);
            }
            if (bn && bn->requires_grad)
                for (int co = 0; co < Co; ++co)
                    for (int p = 0; p < hw; ++p) bn->grad[co] += g[static_cast<int64_t>(co) * hw + p];
        }
    };
    return n;
}

NodeP linear(NodeP x, NodeP w, NodeP bias) {
    if (x->value.shape.size() != 2 || w->value.shape.size() != 2 ||
        x->value.dim(1) != w->value.dim(1))
        throw std::runtime_error("linear: shape mismatch " + x->value.shape_str() + " vs " +
                                 w->value.shape_str());
    const int N = x->value.dim(0), F = x->value.dim(1), O = w->value.dim(0);
    auto n = std::make_shared<Node>();
    n->value = Tensor({N, O});
    n->parents = {x, w};
    if (bias) n->parents.push_back(bias);
    n->requires_grad = x->requires_grad || w->requires_grad || (bias && bias->requires_grad);
    gemm_abt(N, O, F, x->value.v.data(), w->value.v.data(), n->value.v.data());
    if (bias)
        for (int i = 0; i < N; ++i)
            for (int o = 0; o < O; ++o) n->value[static_cast<int64_t>(i) * O + o] += bias->value[o];

    n->backward_fn = [=](Node& self) {
        NodeP xn = self.parents[0], wn = self.parents[1];
        NodeP bn = self.parents.size() > 2 ? self.parents[2] : nullptr;
        if (xn->requires_grad) {
            xn->ensure_grad();
            gemm_acc(N, F, O, self.grad.v.data(), wn->value.v.data(), xn->grad.v.data());
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            gemm_atb(O, F, N, self.grad.v.data(), xn->value.v.data(), wn->grad.v.data());
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int o = 0; o < O; ++o) bn->grad[o] += self.grad[static_cast<int64_t>(i) * O + o];
        }
    };
    return n;
}

NodeP relu(NodeP x) {
    auto n = std::make_shared<Node>();
    n->value = x->value;
    n->parents = {x};
    n->requires_grad = x->requires_grad;
    for (auto& v : n->value.v) v = v > 0.0 ? v : 0.0;
    n->backward_fn = [](Node& self) {
        NodeP xn = self.parents[0];
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
    };
    return n;
}

NodeP maxpool2d(NodeP x, int k, int stride) {
    check_4d(x->value, "maxpool2d");
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    auto n = std::make_shared<Node>();
    n->value = Tensor({N, C, Ho, Wo});
    n->parents = {x};
    n->requires_grad = x->requires_grad;
    auto argmax = std::make_shared<std::vector<int64_t>>(n->value.numel());
    int64_t o = 0;
    for (int img = 0; img < N; ++img)
        for (int c = 0; c < C; ++c) {
            const double* plane = x->value.v.data() + (static_cast<int64_t>(img) * C + c) * H * W;
            const int64_t base = (static_cast<int64_t>(img) * C + c) * H * W;
            for (int oi = 0; oi < Ho; ++oi)
                for (int oj = 0; oj < Wo; ++oj, ++o) {
                    double best = -1e300;
                    int64_t bi = 0;
                    for (int ki = 0; ki < k; ++ki)
                        for (int kj = 0; kj < k; ++kj) {
                            const int64_t idx = static_cast<int64_t>(oi * stride + ki) * W +
                                                (oj * stride + kj);
                            if (plane[idx] > best) { best = plane[idx]; bi = idx; }
                        }
                    n->value[o] = best;
                    (*argmax)[o] = base + bi;
                }
        }
    n->backward_fn = [argmax](Node& self) {
        NodeP xn = self.parents[0];
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) xn->grad[(*argmax)[i]] += self.grad[i];
    };
    return n;
}

NodeP global_avgpool(NodeP x) {
    check_4d(x->value, "global_avgpool");
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int hw = H * W;
    auto n = std::make_shared<Node>();
    n->value = Tensor({N, C});
    n->parents = {x};
    n->requires_grad = x->requires_grad;
    for (int64_t i = 0; i < static_cast<int64_t>(N) * C; ++i) {
        double s = 0.0;
        for (int p = 0; p < hw; ++p) s += x->value[i * hw + p];
        n->value[i] = s / hw;
    }
    n->backward_fn = [hw](Node& self) {
        NodeP xn = self.parents[0];
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            const double g = self.grad[i] / hw;
            for (int p = 0; p < hw; ++p) xn->grad[i * hw + p] += g;
        }
    };
    return n;
}

NodeP add(NodeP a, NodeP b) {
    if (!a->value.same_shape(b->value))
        throw std::runtime_error("add: shape mismatch " + a->value.shape_str() + " vs " +
                                 b->value.shape_str());
    auto n = std::make_shared<Node>();
    n->value = a->value;
    for (int64_t i = 0; i < n->value.numel(); ++i) n->value[i] += b->value[i];
    n->parents = {a, b};
    n->requires_grad = a->requires_grad || b->requires_grad;
    n->backward_fn = [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->add_grad(self.grad);
    };
    return n;
}

NodeP flatten(NodeP x) {
    const int N = x->value.dim(0);
    const int F = static_cast<int>(x->value.numel() / N);
    auto n = std::make_shared<Node>();
    n->value = Tensor({N, F}, x->value.v);
    n->parents = {x};
    n->requires_grad = x->requires_grad;
    n->backward_fn = [](Node& self) {
        NodeP xn = self.parents[0];
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) xn->grad[i] += self.grad[i];
    };
    return n;
}

NodeP batchnorm_train(NodeP x, NodeP gamma, NodeP beta, Tensor& run_mean, Tensor& run_var,
                      double eps, double momentum) {
    check_4d(x->value, "batchnorm");
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int hw = H * W;
    const int64_t m = static_cast<int64_t>(N) * hw;
    auto n = std::make_shared<Node>();
    n->value = Tensor(x->value.shape);
    n->parents = {x, gamma, beta};
    n->requires_grad = x->requires_grad || gamma->requires_grad || beta->requires_grad;

    auto xhat = std::make_shared<Tensor>(x->value.shape);
    auto inv_std = std::make_shared<std::vector<double>>(C);
    for (int c = 0; c < C; ++c) {
        double mean = 0.0;
        for (int img = 0; img < N; ++img) {
            const double* p = x->value.v.data() + (static_cast<int64_t>(img) * C + c) * hw;
            for (int i = 0; i < hw; ++i) mean += p[i];
        }
        mean /= m;
        double var = 0.0;
        for (int img = 0; img < N; ++img) {
            const double* p = x->value.v.data() + (static_cast<int64_t>(img) * C + c) * hw;
            for (int i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
        }
        var /= m;  // biased, used for both normalization and running stats
        run_mean[c] = (1.0 - momentum) * run_mean[c] + momentum * mean;
        run_var[c] = (1.0 - momentum) * run_var[c] + momentum * var;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        for (int img = 0; img < N; ++img) {
            const int64_t base = (static_cast<int64_t>(img) * C + c) * hw;
            for (int i = 0; i < hw; ++i) {
                const double xh = (x->value[base + i] - mean) * is;
                (*xhat)[base + i] = xh;
                n->value[base + i] = gamma->value[c] * xh + beta->value[c];
            }
        }
    }

    n->backward_fn = [=](Node& self) {
        NodeP xn = self.parents[0], gn = self.parents[1], bn = self.parents[2];
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int c = 0; c < C; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (int img = 0; img < N; ++img) {
                const int64_t base = (static_cast<int64_t>(img) * C + c) * hw;
                for (int i = 0; i < hw; ++i) {
                    sg += self.grad[base + i];
                    sgx += self.grad[base + i] * (*xhat)[base + i];
                }
            }
            if (bn->requires_grad) bn->grad[c] += sg;
            if (gn->requires_grad) gn->grad[c] += sgx;
            if (xn->requires_grad) {
                const double scale = gn->value[c] * (*inv_std)[c];
                const double mg = sg / m, mgx = sgx / m;
                for (int img = 0; img < N; ++img) {
                    const int64_t base = (static_cast<int64_t>(img) * C + c) * hw;
                    for (int i = 0; i < hw; ++i)
                        xn->grad[base + i] +=
                            scale * (self.grad[base + i] - mg - (*xhat)[base + i] * mgx);
                }
            }
        }
    };
    return n;
}

NodeP batchnorm_infer(NodeP x, NodeP gamma, NodeP beta, const Tensor& run_mean,
                      const Tensor& run_var, double eps) {
    check_4d(x->value, "batchnorm");
    const int N = x->value.dim(0), C = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
    auto n = std::make_shared<Node>();
    n->value = Tensor(x->value.shape);
    n->parents = {x, gamma, beta};
    n->requires_grad = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    auto inv_std = std::make_shared<std::vector<double>>(C);
    auto mean = std::make_shared<std::vector<double>>(run_mean.v.begin(), run_mean.v.end());
    for (int c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(run_var[c] + eps);
    for (int img = 0; img < N; ++img)
        for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(img) * C + c) * hw;
            const double s = gamma->value[c] * (*inv_std)[c];
            const double b = beta->value[c] - (*mean)[c] * s;
            for (int i = 0; i < hw; ++i) n->value[base + i] = s * x->value[base + i] + b;
        }
    n->backward_fn = [=](Node& self) {
        NodeP xn = self.parents[0], gn = self.parents[1], bn = self.parents[2];
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int img = 0; img < N; ++img)
            for (int c = 0; c < C; ++c) {
                const int64_t base = (static_cast<int64_t>(img) * C + c) * hw;
                for (int i = 0; i < hw; ++i) {
                    const double g = self.grad[base + i];
                    if (xn->requires_grad) xn->grad[base + i] += g * gn->value[c] * (*inv_std)[c];
                    if (gn->requires_grad)
                        gn->grad[c] += g * (xn->value[base + i] - (*mean)[c]) * (*inv_std)[c];
                    if (bn->requires_grad) bn->grad[c] += g;
                }
            }
    };
    return n;
}

NodeP cross_entropy(NodeP logits, const std::vector<int>& labels) {
    const int N = logits->value.dim(0), K = logits->value.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw std::runtime_error("cross_entropy: label count does not match batch");
    auto probs = std::make_shared<Tensor>(logits->value.shape);
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        const double* row = logits->value.v.data() + static_cast<int64_t>(i) * K;
        double mx = row[0];
        for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < K; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < K; ++j) (*probs)[static_cast<int64_t>(i) * K + j] = std::exp(row[j] - mx) / z;
        loss -= std::log((*probs)[static_cast<int64_t>(i) * K + labels[i]]);
    }
    auto n = std::make_shared<Node>();
    n->value = Tensor::scalar(loss / N);
    n->parents = {logits};
    n->requires_grad = logits->requires_grad;
    auto lab = std::make_shared<std::vector<int>>(labels);
    n->backward_fn = [probs, lab, N, K](Node& self) {
        NodeP ln = self.parents[0];
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const double g = self.grad[0] / N;
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < K; ++j) {
                double d = (*probs)[static_cast<int64_t>(i) * K + j];
                if (j == (*lab)[i]) d -= 1.0;
                ln->grad[static_cast<int64_t>(i) * K + j] += g * d;
            }
    };
    return n;
}

NodeP cmul(NodeP x, Tensor c) {
    if (!x->value.same_shape(c))
        throw std::runtime_error("cmul: shape mismatch");
    auto n = std::make_shared<Node>();
    n->value = Tensor(x->value.shape);
    for (int64_t i = 0; i < c.numel(); ++i) n->value[i] = x->value[i] * c[i];
    n->parents = {x};
    n->requires_grad = x->requires_grad;
    auto cc = std::make_shared<Tensor>(std::move(c));
    n->backward_fn = [cc](Node& self) {
        NodeP xn = self.parents[0];
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) xn->grad[i] += self.grad[i] * (*cc)[i];
    };
    return n;
}

NodeP fold_bias(NodeP beta, NodeP s, Tensor mu) {
    auto n = std::make_shared<Node>();
    n->value = Tensor(beta->value.shape);
    for (int64_t i = 0; i < n->value.numel(); ++i)
        n->value[i] = beta->value[i] - mu[i] * s->value[i];
    n->parents = {beta, s};
    n->requires_grad = beta->requires_grad || s->requires_grad;
    auto muc = std::make_shared<Tensor>(std::move(mu));
    n->backward_fn = [muc](Node& self) {
        NodeP bn = self.parents[0], sn = self.parents[1];
        if (bn->requires_grad) bn->add_grad(self.grad);
        if (sn->requires_grad) {
            sn->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                sn->grad[i] -= self.grad[i] * (*muc)[i];
        }
    };
    return n;
}

NodeP scale_filters(NodeP w, NodeP s) {
    const int Co = w->value.dim(0);
    const int64_t per = w->value.numel() / Co;
    auto n = std::make_shared<Node>();
    n->value = Tensor(w->value.shape);
    for (int c = 0; c < Co; ++c)
        for (int64_t i = 0; i < per; ++i) n->value[c * per + i] = w->value[c * per + i] * s->value[c];
    n->parents = {w, s};
    n->requires_grad = w->requires_grad || s->requires_grad;
    n->backward_fn = [Co, per](Node& self) {
        NodeP wn = self.parents[0], sn = self.parents[1];
        if (wn->requires_grad) wn->ensure_grad();
        if (sn->requires_grad) sn->ensure_grad();
        for (int c = 0; c < Co; ++c)
            for (int64_t i = 0; i < per; ++i) {
                const double g = self.grad[c * per + i];
                if (wn->requires_grad) wn->grad[c * per + i] += g * sn->value[c];
                if (sn->requires_grad) sn->grad[c] += g * wn->value[c * per + i];
            }
    };
    return n;
}

}  // namespace cim
