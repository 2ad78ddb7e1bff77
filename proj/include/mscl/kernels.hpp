#pragma once

#include <cstddef>

// Dense f64 compute kernels behind the tensor engine. Every kernel has a
// scalar reference implementation and an AVX2 variant; the lane is selected
// once at runtime from CPUID (override with force_scalar() or the
// MSCL_FORCE_SCALAR=1 environment variable). Elementwise kernels and the
// GEMM family are bit-identical across lanes (no FMA contraction, per-element
// independence); reductions (dot, sum) may differ in the last ulps because
// the vector lanes accumulate in a different order.
namespace mscl::kernels {

// Lane control / introspection.
void force_scalar(bool on);
bool avx2_available();
const char* active_lane();  // "avx2" or "scalar"

// Elementwise, all length-n contiguous f64.
void add(const double* a, const double* b, double* y, std::size_t n);   // y = a + b
void sub(const double* a, const double* b, double* y, std::size_t n);   // y = a - b
void mul(const double* a, const double* b, double* y, std::size_t n);   // y = a * b
void scale(const double* x, double c, double* y, std::size_t n);        // y = c * x
void axpy(double c, const double* x, double* y, std::size_t n);         // y += c * x
void mul_add(const double* a, const double* b, double* y, std::size_t n);  // y += a * b
void div_add(const double* a, const double* b, double* y, std::size_t n);  // y += a / b
void relu(const double* x, double* y, std::size_t n);                   // y = max(x, 0)
void relu_grad(const double* x, const double* gy, double* gx, std::size_t n);  // gx += gy * (x > 0)

// Reductions.
double dot(const double* a, const double* b, std::size_t n);
double sum(const double* x, std::size_t n);
double vmax(const double* x, std::size_t n);  // n >= 1

// GEMM family, row-major, accumulating into C (caller zeroes C if needed).
//   gemm_nn: C(m x n) += A(m x k) * B(k x n)
//   gemm_nt: C(m x n) += A(m x k) * B(n x k)^T
//   gemm_tn: C(m x n) += A(k x m)^T * B(k x n)
void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             const double* a, const double* b, double* c);

}  // namespace mscl::kernels
