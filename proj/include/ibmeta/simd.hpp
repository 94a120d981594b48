#pragma once

#include <cstddef>

namespace ibmeta::simd {

// Flat kernel table for the arithmetic inner loops. Two implementations
// exist: a scalar reference and an AVX2 variant. The active table is chosen
// once at startup from CPU capabilities (override with IBMETA_KERNELS=scalar
// or force_isa()). Reductions use a fixed summation order within each
// implementation, so results are reproducible run to run on the same build
// and selection. Transcendentals (exp, log, tanh, softplus) evaluate
// lane-wise through libm in both variants and agree bit for bit; the
// vectorized entries (dot, sum, axpy, ...) agree to rounding and are
// equivalence-tested against the scalar reference.
struct Kernels {
    const char* name;
    double (*dot)(const double* x, const double* y, std::size_t n);
    double (*sum)(const double* x, std::size_t n);
    void (*axpy)(double a, const double* x, double* y, std::size_t n);  // y += a*x
    void (*scale)(double a, double* x, std::size_t n);                  // x *= a
    void (*add)(const double* x, const double* y, double* out, std::size_t n);
    void (*sub)(const double* x, const double* y, double* out, std::size_t n);
    void (*mul)(const double* x, const double* y, double* out, std::size_t n);
    void (*mul_add)(const double* x, const double* y, double* acc, std::size_t n);  // acc += x*y
    void (*relu)(const double* x, double* out, std::size_t n);
    // acc += g on coordinates where x > 0 (backward of relu)
    void (*relu_mask_add)(const double* x, const double* g, double* acc, std::size_t n);
    void (*clamp)(const double* x, double lo, double hi, double* out, std::size_t n);
    void (*exp)(const double* x, double* out, std::size_t n);
    void (*log)(const double* x, double* out, std::size_t n);
    void (*tanh)(const double* x, double* out, std::size_t n);
    void (*softplus)(const double* x, double* out, std::size_t n);
};

enum class Isa { Auto, Scalar, Avx2 };

const Kernels& scalar_kernels();
bool avx2_available();
const Kernels& avx2_kernels();  // valid to call only when avx2_available()

// Runtime-selected table. Honors IBMETA_KERNELS (scalar|avx2|auto) on first
// use; force_isa() overrides afterwards (used by the equivalence tests).
const Kernels& active();
void force_isa(Isa isa);

}  // namespace ibmeta::simd
