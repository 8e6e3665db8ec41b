#include <cstring>

#include "histovit/kernels.hpp"

// NEON (aarch64) variants, mirroring the AVX2 file two lanes at a time.
// Explicit vmulq/vaddq intrinsics are never contracted to fma, so the bitwise
// contract with the scalar reference holds here too.

#if defined(__aarch64__)

#include <arm_neon.h>

namespace histovit::kernels {
namespace {

void gemm_nn_neon(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
    const std::size_t n2 = n & ~std::size_t(1);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            const double* brow = b + kk * n;
            const float64x2_t va = vdupq_n_f64(aik);
            std::size_t j = 0;
            for (; j < n2; j += 2) {
                float64x2_t vc = vld1q_f64(crow + j);
                vc = vaddq_f64(vc, vmulq_f64(va, vld1q_f64(brow + j)));
                vst1q_f64(crow + j, vc);
            }
            for (; j < n; ++j) {
                double prod = aik * brow[j];
                crow[j] = crow[j] + prod;
            }
        }
    }
}

void add_neon(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_neon(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_neon(const double* a, double s, double* out, std::size_t n) {
    const float64x2_t vs = vdupq_n_f64(s);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] * s;
}

void axpy_neon(double alpha, const double* x, double* y, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t vy = vld1q_f64(y + i);
        vy = vaddq_f64(vy, vmulq_f64(va, vld1q_f64(x + i)));
        vst1q_f64(y + i, vy);
    }
    for (; i < n; ++i) {
        double prod = alpha * x[i];
        y[i] = y[i] + prod;
    }
}

void adamw_neon(double* param, const double* grad, double* m, double* v, std::size_t n, double lr,
                double beta1, double beta2, double eps, double weight_decay, double inv_bias_corr1,
                double inv_bias_corr2) {
    const double decay = lr * weight_decay;
    const float64x2_t vdecay = vdupq_n_f64(decay);
    const float64x2_t vb1 = vdupq_n_f64(beta1);
    const float64x2_t vb2 = vdupq_n_f64(beta2);
    const float64x2_t vomb1 = vdupq_n_f64(1.0 - beta1);
    const float64x2_t vomb2 = vdupq_n_f64(1.0 - beta2);
    const float64x2_t vic1 = vdupq_n_f64(inv_bias_corr1);
    const float64x2_t vic2 = vdupq_n_f64(inv_bias_corr2);
    const float64x2_t veps = vdupq_n_f64(eps);
    const float64x2_t vlr = vdupq_n_f64(lr);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t p = vld1q_f64(param + i);
        const float64x2_t g = vld1q_f64(grad + i);
        p = vsubq_f64(p, vmulq_f64(vdecay, p));
        const float64x2_t mi = vaddq_f64(vmulq_f64(vb1, vld1q_f64(m + i)), vmulq_f64(vomb1, g));
        const float64x2_t vi =
            vaddq_f64(vmulq_f64(vb2, vld1q_f64(v + i)), vmulq_f64(vomb2, vmulq_f64(g, g)));
        vst1q_f64(m + i, mi);
        vst1q_f64(v + i, vi);
        const float64x2_t mhat = vmulq_f64(mi, vic1);
        const float64x2_t vhat = vmulq_f64(vi, vic2);
        const float64x2_t denom = vaddq_f64(vsqrtq_f64(vhat), veps);
        p = vsubq_f64(p, vmulq_f64(vlr, vdivq_f64(mhat, denom)));
        vst1q_f64(param + i, p);
    }
    const double one_minus_b1 = 1.0 - beta1;
    const double one_minus_b2 = 1.0 - beta2;
    for (; i < n; ++i) {
        double p = param[i];
        const double g = grad[i];
        double dp = decay * p;
        p = p - dp;
        double b1m = beta1 * m[i];
        double og = one_minus_b1 * g;
        const double mi = b1m + og;
        double gg = g * g;
        double b2v = beta2 * v[i];
        double ogg = one_minus_b2 * gg;
        const double vi = b2v + ogg;
        m[i] = mi;
        v[i] = vi;
        const double mhat = mi * inv_bias_corr1;
        const double vhat = vi * inv_bias_corr2;
        const double denom = __builtin_sqrt(vhat) + eps;
        double frac = mhat / denom;
        double step = lr * frac;
        param[i] = p - step;
    }
}

}  // namespace

const Ops* neon() {
    static const Ops ops{
        "neon",   gemm_nn_neon, scalar().transpose, add_neon,
        mul_neon, scale_neon,   axpy_neon,          adamw_neon,
    };
    return &ops;
}

}  // namespace histovit::kernels

#else

namespace histovit::kernels {
const Ops* neon() { return nullptr; }
}  // namespace histovit::kernels

#endif
