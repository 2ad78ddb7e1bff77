#pragma once

#include <cstddef>

// Internal lane table shared by the dispatch layer and the lane TUs.
namespace mscl::kernels::detail {

struct KernelTable {
    const char* name;
    void (*add)(const double*, const double*, double*, std::size_t);
    void (*sub)(const double*, const double*, double*, std::size_t);
    void (*mul)(const double*, const double*, double*, std::size_t);
    void (*scale)(const double*, double, double*, std::size_t);
    void (*axpy)(double, const double*, double*, std::size_t);
    void (*mul_add)(const double*, const double*, double*, std::size_t);
    void (*div_add)(const double*, const double*, double*, std::size_t);
    void (*relu)(const double*, double*, std::size_t);
    void (*relu_grad)(const double*, const double*, double*, std::size_t);
    double (*dot)(const double*, const double*, std::size_t);
    double (*sum)(const double*, std::size_t);
    double (*vmax)(const double*, std::size_t);
};

const KernelTable& active_table();

}  // namespace mscl::kernels::detail
