#include <cstring>

#include "histovit/kernels.hpp"

// AVX2 variants. Bitwise equality with the scalar reference is part of the
// contract: the reduction order matches gemm_nn_scalar (k advances outside the
// column vector loop), and the target list deliberately excludes fma so the
// compiler cannot contract mul+add.

#if defined(__x86_64__) && defined(__GNUC__)

#include <immintrin.h>

#define HISTOVIT_TARGET_AVX2 __attribute__((target("avx2")))

namespace histovit::kernels {
namespace {

HISTOVIT_TARGET_AVX2
void gemm_nn_avx2(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n, bool accumulate) {
    // Register-blocked over 16 output columns. Every c element still
    // accumulates its k terms in ascending order with separate mul and add,
    // so results stay bitwise equal to the scalar reference.
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        std::size_t j = 0;
        for (; j + 16 <= n; j += 16) {
            __m256d acc0, acc1, acc2, acc3;
            if (accumulate) {
                acc0 = _mm256_loadu_pd(crow + j);
                acc1 = _mm256_loadu_pd(crow + j + 4);
                acc2 = _mm256_loadu_pd(crow + j + 8);
                acc3 = _mm256_loadu_pd(crow + j + 12);
            } else {
                acc0 = acc1 = acc2 = acc3 = _mm256_setzero_pd();
            }
            for (std::size_t kk = 0; kk < k; ++kk) {
                const __m256d va = _mm256_set1_pd(arow[kk]);
                const double* brow = b + kk * n + j;
                acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(va, _mm256_loadu_pd(brow)));
                acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(va, _mm256_loadu_pd(brow + 4)));
                acc2 = _mm256_add_pd(acc2, _mm256_mul_pd(va, _mm256_loadu_pd(brow + 8)));
                acc3 = _mm256_add_pd(acc3, _mm256_mul_pd(va, _mm256_loadu_pd(brow + 12)));
            }
            _mm256_storeu_pd(crow + j, acc0);
            _mm256_storeu_pd(crow + j + 4, acc1);
            _mm256_storeu_pd(crow + j + 8, acc2);
            _mm256_storeu_pd(crow + j + 12, acc3);
        }
        for (; j + 4 <= n; j += 4) {
            __m256d acc = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
            for (std::size_t kk = 0; kk < k; ++kk) {
                const __m256d va = _mm256_set1_pd(arow[kk]);
                acc = _mm256_add_pd(acc, _mm256_mul_pd(va, _mm256_loadu_pd(b + kk * n + j)));
            }
            _mm256_storeu_pd(crow + j, acc);
        }
        for (; j < n; ++j) {
            double acc = accumulate ? crow[j] : 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double prod = arow[kk] * b[kk * n + j];
                acc = acc + prod;
            }
            crow[j] = acc;
        }
    }
}

HISTOVIT_TARGET_AVX2
void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

HISTOVIT_TARGET_AVX2
void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

HISTOVIT_TARGET_AVX2
void scale_avx2(const double* a, double s, double* out, std::size_t n) {
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
    }
    for (; i < n; ++i) out[i] = a[i] * s;
}

HISTOVIT_TARGET_AVX2
void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

HISTOVIT_TARGET_AVX2
void adamw_avx2(double* param, const double* grad, double* m, double* v, std::size_t n, double lr,
                double beta1, double beta2, double eps, double weight_decay, double inv_bias_corr1,
                double inv_bias_corr2) {
    const double decay = lr * weight_decay;
    const __m256d vdecay = _mm256_set1_pd(decay);
    const __m256d vb1 = _mm256_set1_pd(beta1);
    const __m256d vb2 = _mm256_set1_pd(beta2);
    const __m256d vomb1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d vomb2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d vic1 = _mm256_set1_pd(inv_bias_corr1);
    const __m256d vic2 = _mm256_set1_pd(inv_bias_corr2);
    const __m256d veps = _mm256_set1_pd(eps);
    const __m256d vlr = _mm256_set1_pd(lr);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d p = _mm256_loadu_pd(param + i);
        const __m256d g = _mm256_loadu_pd(grad + i);
        p = _mm256_sub_pd(p, _mm256_mul_pd(vdecay, p));
        const __m256d mi =
            _mm256_add_pd(_mm256_mul_pd(vb1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(vomb1, g));
        const __m256d vi = _mm256_add_pd(_mm256_mul_pd(vb2, _mm256_loadu_pd(v + i)),
                                         _mm256_mul_pd(vomb2, _mm256_mul_pd(g, g)));
        _mm256_storeu_pd(m + i, mi);
        _mm256_storeu_pd(v + i, vi);
        const __m256d mhat = _mm256_mul_pd(mi, vic1);
        const __m256d vhat = _mm256_mul_pd(vi, vic2);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), veps);
        p = _mm256_sub_pd(p, _mm256_mul_pd(vlr, _mm256_div_pd(mhat, denom)));
        _mm256_storeu_pd(param + i, p);
    }
    if (i < n) {
        // Same element-wise expression chain as the vector body.
        const double one_minus_b1 = 1.0 - beta1;
        const double one_minus_b2 = 1.0 - beta2;
        for (; i < n; ++i) {
            double p = param[i];
            const double g = grad[i];
            p = p - decay * p;
            const double mi = beta1 * m[i] + one_minus_b1 * g;
            const double vi = beta2 * v[i] + one_minus_b2 * (g * g);
            m[i] = mi;
            v[i] = vi;
            const double mhat = mi * inv_bias_corr1;
            const double vhat = vi * inv_bias_corr2;
            const double denom = __builtin_sqrt(vhat) + eps;
            param[i] = p - lr * (mhat / denom);
        }
    }
}

bool host_has_avx2() { return __builtin_cpu_supports("avx2"); }

}  // namespace

const Ops* avx2() {
    static const Ops ops{
        "avx2",   gemm_nn_avx2, scalar().transpose,  // pure data movement, no vector win
        add_avx2, mul_avx2,     scale_avx2,          axpy_avx2, adamw_avx2,
    };
    static const bool supported = host_has_avx2();
    return supported ? &ops : nullptr;
}

}  // namespace histovit::kernels

#else  // non-x86 or non-GNU toolchain

namespace histovit::kernels {
const Ops* avx2() { return nullptr; }
}  // namespace histovit::kernels

#endif
