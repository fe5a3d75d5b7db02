#pragma once

#include <cmath>
#include <cstring>
#include <utility>

#include "ddl/parallel.hpp"
#include "ddl/tensor.hpp"

namespace ddl {
namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major.
inline void gemm_nn(i64 M, i64 N, i64 K, const real* A, const real* B, real* C) {
    for (i64 i = 0; i < M; ++i) {
        const real* a = A + i * K;
        real* c = C + i * N;
        for (i64 k = 0; k < K; ++k) {
            real av = a[k];
            const real* b = B + k * N;
            for (i64 j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(i64 M, i64 N, i64 K, const real* A, const real* B, real* C) {
    for (i64 i = 0; i < M; ++i) {
        const real* a = A + i * K;
        real* c = C + i * N;
        for (i64 j = 0; j < N; ++j) {
            const real* b = B + j * K;
            real acc = 0;
            for (i64 k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(i64 M, i64 N, i64 K, const real* A, const real* B, real* C) {
    for (i64 k = 0; k < K; ++k) {
        const real* a = A + k * M;
        const real* b = B + k * N;
        for (i64 i = 0; i < M; ++i) {
            real av = a[i];
            real* c = C + i * N;
            for (i64 j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

inline Tensor make_op(std::vector<i64> shape, std::vector<real> data,
                      std::vector<Tensor> inputs,
                      std::function<void(Tensor::Node&)> backward_fn) {
    auto n = std::make_shared<Tensor::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool record = NoGradGuard::grad_enabled();
    if (record) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        record = any;
    }
    if (record) {
        n->requires_grad = true;
        for (const auto& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(n);
}

inline void accumulate(Tensor::Node& parent, const std::vector<real>& contrib) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    for (std::size_t i = 0; i < contrib.size(); ++i) parent.grad[i] += contrib[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_dims(a.shape() == b.shape(), "add: shape mismatch");
    std::vector<real> out(a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_dims(a.shape() == b.shape(), "sub: shape mismatch");
    std::vector<real> out(a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_dims(a.shape() == b.shape(), "mul: shape mismatch");
    std::vector<real> out(a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, real c) {
    std::vector<real> out(a.data());
    for (auto& v : out) v *= c;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, c](Tensor::Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += c * n.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, real c) {
    std::vector<real> out(a.data());
    for (auto& v : out) v += c;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](Tensor::Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

// x[N,C,H,W] + b[C], broadcast over N,H,W.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    check_dims(x.shape().size() == 4, "add_channel_bias: x must be 4-d");
    check_dims(b.shape().size() == 1 && b.dim(0) == x.dim(1), "add_channel_bias: bias/channel mismatch");
    i64 N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<real> out(x.data());
    const auto& bd = b.data();
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            real bv = bd[static_cast<std::size_t>(c)];
            real* p = out.data() + (n * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) p[i] += bv;
        }
    auto xn = x.node();
    auto bn = b.node();
    return detail::make_op(x.shape(), std::move(out), {x, b}, [xn, bn, N, C, HW](Tensor::Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (i64 s = 0; s < N; ++s)
                for (i64 c = 0; c < C; ++c) {
                    const real* g = n.grad.data() + (s * C + c) * HW;
                    real acc = 0;
                    for (i64 i = 0; i < HW; ++i) acc += g[i];
                    bn->grad[static_cast<std::size_t>(c)] += acc;
                }
        }
    });
}

// x[N,C,H,W] + e[N,C], broadcast over H,W. Carries timestep embeddings into
// feature maps.
inline Tensor add_sample_channel(const Tensor& x, const Tensor& e) {
    check_dims(x.shape().size() == 4, "add_sample_channel: x must be 4-d");
    check_dims(e.shape().size() == 2 && e.dim(0) == x.dim(0) && e.dim(1) == x.dim(1),
               "add_sample_channel: embedding shape mismatch");
    i64 N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<real> out(x.data());
    const auto& ed = e.data();
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            real ev = ed[static_cast<std::size_t>(n * C + c)];
            real* p = out.data() + (n * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) p[i] += ev;
        }
    auto xn = x.node();
    auto en = e.node();
    return detail::make_op(x.shape(), std::move(out), {x, e}, [xn, en, N, C, HW](Tensor::Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (en->requires_grad) {
            en->ensure_grad();
            for (i64 s = 0; s < N; ++s)
                for (i64 c = 0; c < C; ++c) {
                    const real* g = n.grad.data() + (s * C + c) * HW;
                    real acc = 0;
                    for (i64 i = 0; i < HW; ++i) acc += g[i];
                    en->grad[static_cast<std::size_t>(s * C + c)] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor silu(const Tensor& x) {
    std::vector<real> out(x.data().size());
    const auto& xd = x.data();
    parallel_for(0, static_cast<i64>(out.size()), [&](i64 i0, i64 i1) {
        for (i64 i = i0; i < i1; ++i) {
            real s = real{1} / (real{1} + std::exp(-xd[static_cast<std::size_t>(i)]));
            out[static_cast<std::size_t>(i)] = xd[static_cast<std::size_t>(i)] * s;
        }
    });
    auto xn = x.node();
    return detail::make_op(x.shape(), std::move(out), {x}, [xn](Tensor::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        parallel_for(0, static_cast<i64>(n.grad.size()), [&](i64 i0, i64 i1) {
            for (i64 i = i0; i < i1; ++i) {
                real xv = xn->data[static_cast<std::size_t>(i)];
                real s = real{1} / (real{1} + std::exp(-xv));
                xn->grad[static_cast<std::size_t>(i)] += n.grad[static_cast<std::size_t>(i)] * s * (real{1} + xv * (real{1} - s));
            }
        });
    });
}

inline Tensor softplus(const Tensor& x) {
    std::vector<real> out(x.data().size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        real v = xd[i];
        out[i] = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    auto xn = x.node();
    return detail::make_op(x.shape(), std::move(out), {x}, [xn](Tensor::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            real s = real{1} / (real{1} + std::exp(-xn->data[i]));
            xn->grad[i] += n.grad[i] * s;
        }
    });
}

inline Tensor abs(const Tensor& x) {
    std::vector<real> out(x.data().size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(xd[i]);
    auto xn = x.node();
    return detail::make_op(x.shape(), std::move(out), {x}, [xn](Tensor::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            real xv = xn->data[i];
            real s = xv > 0 ? real{1} : (xv < 0 ? real{-1} : real{0});
            xn->grad[i] += n.grad[i] * s;
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    real acc = 0;
    for (real v : x.data()) acc += v;
    auto xn = x.node();
    return detail::make_op({}, {acc}, {x}, [xn](Tensor::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        real g = n.grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
}

inline Tensor mean_all(const Tensor& x) {
    check_dims(x.numel() > 0, "mean_all: empty tensor");
    real inv = real{1} / static_cast<real>(x.numel());
    real acc = 0;
    for (real v : x.data()) acc += v;
    acc *= inv;
    auto xn = x.node();
    return detail::make_op({}, {acc}, {x}, [xn, inv](Tensor::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        real g = n.grad[0] * inv;
        for (auto& gv : xn->grad) gv += g;
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check_dims(a.shape().size() == 2 && b.shape().size() == 2, "matmul: operands must be 2-d");
    check_dims(a.dim(1) == b.dim(0), "matmul: inner dimension mismatch");
    i64 M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<real> out(static_cast<std::size_t>(M * N), real{0});
    detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op({M, N}, std::move(out), {a, b}, [an, bn, M, N, K](Tensor::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::gemm_nt(M, K, N, n.grad.data(), bn->data.data(), an->grad.data());
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::gemm_tn(K, N, M, an->data.data(), n.grad.data(), bn->grad.data());
        }
    });
}

// x[N,K] * w[K,M] + b[M]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    check_dims(b.shape().size() == 1 && b.dim(0) == y.dim(1), "linear: bias size mismatch");
    i64 N = y.dim(0), M = y.dim(1);
    std::vector<real> out(y.data());
    const auto& bd = b.data();
    for (i64 n = 0; n < N; ++n)
        for (i64 m = 0; m < M; ++m) out[static_cast<std::size_t>(n * M + m)] += bd[static_cast<std::size_t>(m)];
    auto yn = y.node();
    auto bn = b.node();
    return detail::make_op(y.shape(), std::move(out), {y, b}, [yn, bn, N, M](Tensor::Node& n) {
        if (yn->requires_grad) {
            yn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) yn->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (i64 s = 0; s < N; ++s)
                for (i64 m = 0; m < M; ++m) bn->grad[static_cast<std::size_t>(m)] += n.grad[static_cast<std::size_t>(s * M + m)];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const real* x, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad,
                   i64 Ho, i64 Wo, real* col) {
    // col[(c*kh + ki)*kw + kj][oi*Wo + oj]
    for (i64 c = 0; c < C; ++c) {
        const real* plane = x + c * H * W;
        for (i64 ki = 0; ki < kh; ++ki) {
            for (i64 kj = 0; kj < kw; ++kj) {
                real* row = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (i64 oi = 0; oi < Ho; ++oi) {
                    i64 ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) {
                        std::memset(row + oi * Wo, 0, static_cast<std::size_t>(Wo) * sizeof(real));
                        continue;
                    }
                    const real* src = plane + ii * W;
                    for (i64 oj = 0; oj < Wo; ++oj) {
                        i64 jj = oj * stride - pad + kj;
                        row[oi * Wo + oj] = (jj >= 0 && jj < W) ? src[jj] : real{0};
                    }
                }
            }
        }
    }
}

inline void col2im_add(const real* col, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad,
                       i64 Ho, i64 Wo, real* x) {
    for (i64 c = 0; c < C; ++c) {
        real* plane = x + c * H * W;
        for (i64 ki = 0; ki < kh; ++ki) {
            for (i64 kj = 0; kj < kw; ++kj) {
                const real* row = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (i64 oi = 0; oi < Ho; ++oi) {
                    i64 ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) continue;
                    real* dst = plane + ii * W;
                    for (i64 oj = 0; oj < Wo; ++oj) {
                        i64 jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < W) dst[jj] += row[oi * Wo + oj];
                    }
                }
            }
        }
    }
}

} // namespace detail

// Cross-correlation with bias, NCHW. Differentiable w.r.t. input, kernel
// and bias. Batch elements are processed in parallel with disjoint outputs
// and a fixed reduction order for the kernel gradient, so results do not
// depend on the worker count.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, i64 stride = 1, i64 pad = 0) {
    check_dims(x.shape().size() == 4, "conv2d: input must be [N,C,H,W]");
    check_dims(w.shape().size() == 4, "conv2d: kernel must be [F,C,kh,kw]");
    check_dims(w.dim(1) == x.dim(1), "conv2d: kernel channel count does not match input channels");
    check_dims(b.shape().size() == 1 && b.dim(0) == w.dim(0), "conv2d: bias size mismatch");
    check(stride >= 1, "conv2d: stride must be >= 1");
    check(pad >= 0, "conv2d: padding must be >= 0");
    i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    i64 F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check_dims(kh <= H + 2 * pad && kw <= W + 2 * pad, "conv2d: kernel larger than padded input");
    i64 Ho = (H + 2 * pad - kh) / stride + 1;
    i64 Wo = (W + 2 * pad - kw) / stride + 1;
    i64 K = C * kh * kw;
    i64 P = Ho * Wo;

    // im2col for the whole batch; kept alive for the backward pass
    auto col_all = std::make_shared<std::vector<real>>(static_cast<std::size_t>(N * K * P));
    std::vector<real> out(static_cast<std::size_t>(N * F * P), real{0});
    const real* xd = x.data().data();
    const real* wd = w.data().data();
    const real* bd = b.data().data();
    parallel_for(0, N, [&](i64 n0, i64 n1) {
        for (i64 n = n0; n < n1; ++n) {
            real* col = col_all->data() + n * K * P;
            detail::im2col(xd + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col);
            real* y = out.data() + n * F * P;
            detail::gemm_nn(F, P, K, wd, col, y);
            for (i64 f = 0; f < F; ++f) {
                real bv = bd[f];
                real* p = y + f * P;
                for (i64 i = 0; i < P; ++i) p[i] += bv;
            }
        }
    });

    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto backward = [xn, wn, bn, col_all, N, C, H, W, F, kh, kw, stride, pad, Ho, Wo, K, P](Tensor::Node& n) {
        bool need_x = xn->requires_grad;
        bool need_w = wn->requires_grad;
        if (need_x) xn->ensure_grad();
        if (need_w) wn->ensure_grad();
        std::vector<real> dw_partial;
        if (need_w) dw_partial.assign(static_cast<std::size_t>(N * F * K), real{0});
        parallel_for(0, N, [&](i64 n0, i64 n1) {
            std::vector<real> colgrad(need_x ? static_cast<std::size_t>(K * P) : 0);
            for (i64 s = n0; s < n1; ++s) {
                const real* gy = n.grad.data() + s * F * P;
                const real* col = col_all->data() + s * K * P;
                if (need_w) detail::gemm_nt(F, K, P, gy, col, dw_partial.data() + s * F * K);
                if (need_x) {
                    std::fill(colgrad.begin(), colgrad.end(), real{0});
                    detail::gemm_tn(K, P, F, wn->data.data(), gy, colgrad.data());
                    detail::col2im_add(colgrad.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                       xn->grad.data() + s * C * H * W);
                }
            }
        });
        if (need_w) {
            // fixed batch-order reduction
            for (i64 s = 0; s < N; ++s) {
                const real* src = dw_partial.data() + s * F * K;
                real* dst = wn->grad.data();
                for (i64 i = 0; i < F * K; ++i) dst[i] += src[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (i64 s = 0; s < N; ++s)
                for (i64 f = 0; f < F; ++f) {
                    const real* g = n.grad.data() + (s * F + f) * P;
                    real acc = 0;
                    for (i64 i = 0; i < P; ++i) acc += g[i];
                    bn->grad[static_cast<std::size_t>(f)] += acc;
                }
        }
    };
    return detail::make_op({N, F, Ho, Wo}, std::move(out), {x, w, b}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// GroupNorm over [N,C,H,W] with per-channel affine.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, i64 groups,
                         real eps = real{1e-5}) {
    check_dims(x.shape().size() == 4, "group_norm: input must be 4-d");
    i64 N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    check_dims(groups >= 1 && C % groups == 0, "group_norm: channels not divisible by groups");
    check_dims(gamma.shape().size() == 1 && gamma.dim(0) == C, "group_norm: gamma size mismatch");
    check_dims(beta.shape().size() == 1 && beta.dim(0) == C, "group_norm: beta size mismatch");
    i64 cpg = C / groups;
    i64 m = cpg * HW;

    std::vector<real> out(x.data().size());
    std::vector<real> mean(static_cast<std::size_t>(N * groups));
    std::vector<real> inv_std(static_cast<std::size_t>(N * groups));
    const auto& xd = x.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    parallel_for(0, N, [&](i64 n0, i64 n1) {
        for (i64 n = n0; n < n1; ++n) {
            for (i64 g = 0; g < groups; ++g) {
                const real* px = xd.data() + (n * C + g * cpg) * HW;
                real mu = 0;
                for (i64 i = 0; i < m; ++i) mu += px[i];
                mu /= static_cast<real>(m);
                real var = 0;
                for (i64 i = 0; i < m; ++i) {
                    real d = px[i] - mu;
                    var += d * d;
                }
                var /= static_cast<real>(m);
                real is = real{1} / std::sqrt(var + eps);
                mean[static_cast<std::size_t>(n * groups + g)] = mu;
                inv_std[static_cast<std::size_t>(n * groups + g)] = is;
                for (i64 c = 0; c < cpg; ++c) {
                    i64 ch = g * cpg + c;
                    const real* src = xd.data() + (n * C + ch) * HW;
                    real* dst = out.data() + (n * C + ch) * HW;
                    real gc = gd[static_cast<std::size_t>(ch)];
                    real bc = bd[static_cast<std::size_t>(ch)];
                    for (i64 i = 0; i < HW; ++i) dst[i] = gc * (src[i] - mu) * is + bc;
                }
            }
        }
    });

    auto xn = x.node();
    auto gn = gamma.node();
    auto btn = beta.node();
    auto backward = [xn, gn, btn, N, C, HW, groups, cpg, m, mean, inv_std](Tensor::Node& n) {
        bool need_x = xn->requires_grad;
        bool need_g = gn->requires_grad;
        bool need_b = btn->requires_grad;
        if (need_x) xn->ensure_grad();
        if (need_g) gn->ensure_grad();
        if (need_b) btn->ensure_grad();
        // per-sample affine-gradient partials, reduced in batch order below
        std::vector<real> dgamma_p((need_g ? static_cast<std::size_t>(N * C) : 0), real{0});
        std::vector<real> dbeta_p((need_b ? static_cast<std::size_t>(N * C) : 0), real{0});
        parallel_for(0, N, [&](i64 s0, i64 s1) {
            std::vector<real> xhat(static_cast<std::size_t>(m));
            std::vector<real> dxhat(static_cast<std::size_t>(m));
            for (i64 s = s0; s < s1; ++s) {
                for (i64 g = 0; g < groups; ++g) {
                    real mu = mean[static_cast<std::size_t>(s * groups + g)];
                    real is = inv_std[static_cast<std::size_t>(s * groups + g)];
                    real sum_dxh = 0, sum_dxh_xh = 0;
                    for (i64 c = 0; c < cpg; ++c) {
                        i64 ch = g * cpg + c;
                        const real* px = xn->data.data() + (s * C + ch) * HW;
                        const real* gy = n.grad.data() + (s * C + ch) * HW;
                        real gc = gn->data[static_cast<std::size_t>(ch)];
                        real dgamma = 0, dbeta = 0;
                        for (i64 i = 0; i < HW; ++i) {
                            real xh = (px[i] - mu) * is;
                            real dxh = gy[i] * gc;
                            xhat[static_cast<std::size_t>(c * HW + i)] = xh;
                            dxhat[static_cast<std::size_t>(c * HW + i)] = dxh;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgamma += gy[i] * xh;
                            dbeta += gy[i];
                        }
                        if (need_g) dgamma_p[static_cast<std::size_t>(s * C + ch)] = dgamma;
                        if (need_b) dbeta_p[static_cast<std::size_t>(s * C + ch)] = dbeta;
                    }
                    if (need_x) {
                        real inv_m = real{1} / static_cast<real>(m);
                        for (i64 c = 0; c < cpg; ++c) {
                            i64 ch = g * cpg + c;
                            real* gx = xn->grad.data() + (s * C + ch) * HW;
                            for (i64 i = 0; i < HW; ++i) {
                                real xh = xhat[static_cast<std::size_t>(c * HW + i)];
                                real dxh = dxhat[static_cast<std::size_t>(c * HW + i)];
                                gx[i] += is * (dxh - inv_m * (sum_dxh + xh * sum_dxh_xh));
                            }
                        }
                    }
                }
            }
        });
        for (i64 s = 0; s < N; ++s) {
            if (need_g)
                for (i64 c = 0; c < C; ++c) gn->grad[static_cast<std::size_t>(c)] += dgamma_p[static_cast<std::size_t>(s * C + c)];
            if (need_b)
                for (i64 c = 0; c < C; ++c) btn->grad[static_cast<std::size_t>(c)] += dbeta_p[static_cast<std::size_t>(s * C + c)];
        }
    };
    return detail::make_op(x.shape(), std::move(out), {x, gamma, beta}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor upsample_nearest2x(const Tensor& x) {
    check_dims(x.shape().size() == 4, "upsample_nearest2x: input must be 4-d");
    i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<real> out(static_cast<std::size_t>(N * C * 4 * H * W));
    const auto& xd = x.data();
    for (i64 nc = 0; nc < N * C; ++nc) {
        const real* src = xd.data() + nc * H * W;
        real* dst = out.data() + nc * 4 * H * W;
        for (i64 i = 0; i < H; ++i)
            for (i64 j = 0; j < W; ++j) {
                real v = src[i * W + j];
                real* d = dst + (2 * i) * (2 * W) + 2 * j;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    auto xn = x.node();
    return detail::make_op({N, C, 2 * H, 2 * W}, std::move(out), {x}, [xn, N, C, H, W](Tensor::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (i64 nc = 0; nc < N * C; ++nc) {
            real* gx = xn->grad.data() + nc * H * W;
            const real* gy = n.grad.data() + nc * 4 * H * W;
            for (i64 i = 0; i < H; ++i)
                for (i64 j = 0; j < W; ++j) {
                    const real* g = gy + (2 * i) * (2 * W) + 2 * j;
                    gx[i * W + j] += g[0] + g[1] + g[2 * W] + g[2 * W + 1];
                }
        }
    });
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_dims(a.shape().size() == 4 && b.shape().size() == 4, "concat_channels: inputs must be 4-d");
    check_dims(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
               "concat_channels: non-channel dims mismatch");
    i64 N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    std::vector<real> out(static_cast<std::size_t>(N * (Ca + Cb) * HW));
    for (i64 n = 0; n < N; ++n) {
        std::memcpy(out.data() + n * (Ca + Cb) * HW, a.data().data() + n * Ca * HW,
                    static_cast<std::size_t>(Ca * HW) * sizeof(real));
        std::memcpy(out.data() + (n * (Ca + Cb) + Ca) * HW, b.data().data() + n * Cb * HW,
                    static_cast<std::size_t>(Cb * HW) * sizeof(real));
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op({N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                           [an, bn, N, Ca, Cb, HW](Tensor::Node& n) {
                               if (an->requires_grad) {
                                   an->ensure_grad();
                                   for (i64 s = 0; s < N; ++s) {
                                       const real* g = n.grad.data() + s * (Ca + Cb) * HW;
                                       real* ga = an->grad.data() + s * Ca * HW;
                                       for (i64 i = 0; i < Ca * HW; ++i) ga[i] += g[i];
                                   }
                               }
                               if (bn->requires_grad) {
                                   bn->ensure_grad();
                                   for (i64 s = 0; s < N; ++s) {
                                       const real* g = n.grad.data() + (s * (Ca + Cb) + Ca) * HW;
                                       real* gb = bn->grad.data() + s * Cb * HW;
                                       for (i64 i = 0; i < Cb * HW; ++i) gb[i] += g[i];
                                   }
                               }
                           });
}

// View of one batch element: [N,C,H,W] -> [1,C,H,W].
inline Tensor select_sample(const Tensor& x, i64 n) {
    check_dims(x.shape().size() == 4, "select_sample: input must be 4-d");
    check_dims(n >= 0 && n < x.dim(0), "select_sample: index out of range");
    i64 per = x.numel() / x.dim(0);
    std::vector<real> out(x.data().begin() + n * per, x.data().begin() + (n + 1) * per);
    auto xn = x.node();
    return detail::make_op({1, x.dim(1), x.dim(2), x.dim(3)}, std::move(out), {x}, [xn, n, per](Tensor::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        real* gx = xn->grad.data() + n * per;
        for (i64 i = 0; i < per; ++i) gx[i] += nd.grad[static_cast<std::size_t>(i)];
    });
}

// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

} // namespace ddl
