#include "mscl/kernels.hpp"

#include <atomic>
#include <cstdlib>

#include "kernels_table.hpp"

namespace mscl::kernels {

namespace detail {

KernelTable make_scalar_table();
#if defined(__x86_64__) || defined(__i386__)
KernelTable make_avx2_table();
#endif

namespace {

std::atomic<bool> g_force_scalar{false};

bool detect_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

bool env_forces_scalar() {
    const char* v = std::getenv("MSCL_FORCE_SCALAR");
    return v != nullptr && v[0] == '1';
}

const KernelTable& scalar_table() {
    static const KernelTable t = make_scalar_table();
    return t;
}

#if defined(__x86_64__) || defined(__i386__)
const KernelTable& avx2_table() {
    static const KernelTable t = make_avx2_table();
    return t;
}
#endif

}  // namespace

const KernelTable& active_table() {
    static const bool has_avx2 = detect_avx2();
    static const bool env_scalar = env_forces_scalar();
    if (g_force_scalar.load(std::memory_order_relaxed) || env_scalar || !has_avx2) {
        return scalar_table();
    }
#if defined(__x86_64__) || defined(__i386__)
    return avx2_table();
#else
    return scalar_table();
#endif
}

}  // namespace detail

void force_scalar(bool on) { detail::g_force_scalar.store(on, std::memory_order_relaxed); }

bool avx2_available() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

const char* active_lane() { return detail::active_table().name; }

void add(const double* a, const double* b, double* y, std::size_t n) {
    detail::active_table().add(a, b, y, n);
}
void sub(const double* a, const double* b, double* y, std::size_t n) {
    detail::active_table().sub(a, b, y, n);
}
void mul(const double* a, const double* b, double* y, std::size_t n) {
    detail::active_table().mul(a, b, y, n);
}
void scale(const double* x, double c, double* y, std::size_t n) {
    detail::active_table().scale(x, c, y, n);
}
void axpy(double c, const double* x, double* y, std::size_t n) {
    detail::active_table().axpy(c, x, y, n);
}
void mul_add(const double* a, const double* b, double* y, std::size_t n) {
    detail::active_table().mul_add(a, b, y, n);
}
void div_add(const double* a, const double* b, double* y, std::size_t n) {
    detail::active_table().div_add(a, b, y, n);
}
void relu(const double* x, double* y, std::size_t n) {
    detail::active_table().relu(x, y, n);
}
void relu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
    detail::active_table().relu_grad(x, gy, gx, n);
}
double dot(const double* a, const double* b, std::size_t n) {
    return detail::active_table().dot(a, b, n);
}
double sum(const double* x, std::size_t n) { return detail::active_table().sum(x, n); }
double vmax(const double* x, std::size_t n) { return detail::active_table().vmax(x, n); }

// GEMMs resolve the lane once and run tight loops over the row kernels.
void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             const double* a, const double* b, double* c) {
    const auto& t = detail::active_table();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            t.axpy(arow[p], b + p * n, crow, n);
        }
    }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             const double* a, const double* b, double* c) {
    const auto& t = detail::active_table();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            crow[j] += t.dot(arow, b + j * k, k);
        }
    }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             const double* a, const double* b, double* c) {
    const auto& t = detail::active_table();
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            t.axpy(arow[i], brow, c + i * n, n);
        }
    }
}

}  // namespace mscl::kernels
