#include <cmath>
#include <cstring>

#include "histovit/kernels.hpp"

// Reference kernels. The loop orders here define the numerics of the whole
// project; SIMD variants must replicate them operation for operation.

namespace histovit::kernels {
namespace {

void gemm_nn_scalar(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

void transpose_scalar(const double* a, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

void add_scalar_impl(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar_impl(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar_impl(const double* a, double s, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

void axpy_scalar_impl(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void adamw_scalar_impl(double* param, const double* grad, double* m, double* v, std::size_t n,
                       double lr, double beta1, double beta2, double eps, double weight_decay,
                       double inv_bias_corr1, double inv_bias_corr2) {
    const double decay = lr * weight_decay;
    const double one_minus_b1 = 1.0 - beta1;
    const double one_minus_b2 = 1.0 - beta2;
    for (std::size_t i = 0; i < n; ++i) {
        double p = param[i];
        const double g = grad[i];
        p = p - decay * p;
        const double mi = beta1 * m[i] + one_minus_b1 * g;
        const double vi = beta2 * v[i] + one_minus_b2 * (g * g);
        m[i] = mi;
        v[i] = vi;
        const double mhat = mi * inv_bias_corr1;
        const double vhat = vi * inv_bias_corr2;
        const double denom = std::sqrt(vhat) + eps;
        param[i] = p - lr * (mhat / denom);
    }
}

}  // namespace

const Ops& scalar() {
    static const Ops ops{
        "scalar",         gemm_nn_scalar,   transpose_scalar, add_scalar_impl,
        mul_scalar_impl,  scale_scalar_impl, axpy_scalar_impl, adamw_scalar_impl,
    };
    return ops;
}

}  // namespace histovit::kernels
