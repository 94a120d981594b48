#include "ibmeta/simd.hpp"

#include <algorithm>
#include <cmath>

namespace ibmeta::simd {
namespace {

double dot_scalar(const double* x, const double* y, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

double sum_scalar(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale_scalar(double a, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

void add_scalar(const double* x, const double* y, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub_scalar(const double* x, const double* y, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void mul_scalar(const double* x, const double* y, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void mul_add_scalar(const double* x, const double* y, double* acc, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) acc[i] += x[i] * y[i];
}

void relu_scalar(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_mask_add_scalar(const double* x, const double* g, double* acc, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (x[i] > 0.0) acc[i] += g[i];
}

void clamp_scalar(const double* x, double lo, double hi, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::min(std::max(x[i], lo), hi);
}

void exp_scalar(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
}

void log_scalar(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::log(x[i]);
}

void tanh_scalar(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
}

void softplus_scalar(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        out[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-std::fabs(x[i])));
}

}  // namespace

const Kernels& scalar_kernels() {
    static const Kernels k = {
        "scalar",          dot_scalar,      sum_scalar,   axpy_scalar,
        scale_scalar,      add_scalar,      sub_scalar,   mul_scalar,
        mul_add_scalar,    relu_scalar,     relu_mask_add_scalar, clamp_scalar,
        exp_scalar,        log_scalar,      tanh_scalar,  softplus_scalar,
    };
    return k;
}

}  // namespace ibmeta::simd
