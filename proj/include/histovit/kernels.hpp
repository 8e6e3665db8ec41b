#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace histovit::kernels {

// Double-precision compute kernels behind the tensor ops and the optimizer.
// Every entry has a scalar reference implementation; the SIMD variants are
// required to produce bitwise-identical results. That holds because each
// variant keeps the scalar accumulation order (gemm vectorizes across output
// columns, never across the reduction axis) and uses only correctly rounded
// instructions (mul/add/sub/div/sqrt, no fma). Dispatch therefore never
// changes numerics, and the equivalence tests assert exact equality.
//
// Transcendental row ops (exp/erf paths in softmax, gelu, layer norm) stay in
// the tensor layer as plain scalar code: libm calls have no exact vector twin.
struct Ops {
    std::string_view name;

    // c[m x n] = a[m x k] * b[k x n], or += when accumulate is set.
    void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate);
    // out[cols x rows] = transpose of a[rows x cols]
    void (*transpose)(const double* a, double* out, std::size_t rows, std::size_t cols);
    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    void (*scale)(const double* a, double s, double* out, std::size_t n);
    // y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // Decoupled-weight-decay Adam update, one tensor at a time. Callers pass
    // the per-step reciprocals 1/(1-beta1^t) and 1/(1-beta2^t).
    void (*adamw_update)(double* param, const double* grad, double* m, double* v, std::size_t n,
                         double lr, double beta1, double beta2, double eps, double weight_decay,
                         double inv_bias_corr1, double inv_bias_corr2);
};

// Reference implementation, always available.
const Ops& scalar();

// Runtime-detected variants; nullptr when the host cannot run them.
const Ops* avx2();
const Ops* neon();

// Best supported variant. HISTOVIT_KERNELS=scalar|avx2|neon forces one
// (requesting an unsupported variant is a config error).
const Ops& active();

// All variants the host can run, scalar first. Test hook.
std::vector<const Ops*> available();

}  // namespace histovit::kernels
