#pragma once

#include <cstddef>

namespace cguard::kernels {

// Dense and 3x3 convolution compute kernels. Each has an OpenMP-parallel
// implementation (the production path) and a plain serial reference used
// by tests and the kernel benchmark. Parallel loops only split work
// across independent output elements, so results do not depend on the
// thread count; the optimized inner loops may reassociate reductions, so
// reference comparisons use a tight tolerance rather than bit equality.

// y[b,out] = x[b,in] · W[in,out] + bias
void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::size_t b, std::size_t in, std::size_t out);
void dense_forward_serial(const double* x, const double* w, const double* bias, double* y,
                          std::size_t b, std::size_t in, std::size_t out);

// dx[b,in] = g[b,out] · Wᵀ
void dense_backward_input(const double* g, const double* w, double* dx,
                          std::size_t b, std::size_t in, std::size_t out);
void dense_backward_input_serial(const double* g, const double* w, double* dx,
                                 std::size_t b, std::size_t in, std::size_t out);

// dW[in,out] = xᵀ · g ; dbias[out] = column sums of g
void dense_backward_params(const double* x, const double* g, double* dw, double* dbias,
                           std::size_t b, std::size_t in, std::size_t out);
void dense_backward_params_serial(const double* x, const double* g, double* dw, double* dbias,
                                  std::size_t b, std::size_t in, std::size_t out);

// 3x3 convolution, stride 1, zero padding 1: y[b,oc,h,w].
void conv3x3_forward(const double* x, const double* w, const double* bias, double* y,
                     std::size_t b, std::size_t in_ch, std::size_t out_ch,
                     std::size_t h, std::size_t wd);
void conv3x3_forward_serial(const double* x, const double* w, const double* bias, double* y,
                            std::size_t b, std::size_t in_ch, std::size_t out_ch,
                            std::size_t h, std::size_t wd);

void conv3x3_backward_input(const double* g, const double* w, double* dx,
                            std::size_t b, std::size_t in_ch, std::size_t out_ch,
                            std::size_t h, std::size_t wd);
void conv3x3_backward_input_serial(const double* g, const double* w, double* dx,
                                   std::size_t b, std::size_t in_ch, std::size_t out_ch,
                                   std::size_t h, std::size_t wd);

void conv3x3_backward_params(const double* x, const double* g, double* dw, double* dbias,
                             std::size_t b, std::size_t in_ch, std::size_t out_ch,
                             std::size_t h, std::size_t wd);
void conv3x3_backward_params_serial(const double* x, const double* g, double* dw, double* dbias,
                                    std::size_t b, std::size_t in_ch, std::size_t out_ch,
                                    std::size_t h, std::size_t wd);

}  // namespace cguard::kernels
