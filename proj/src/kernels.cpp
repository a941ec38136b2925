#include "cguard/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace cguard::kernels {

namespace {

using idx = std::ptrdiff_t;

inline void row_axpy(double a, const double* x, double* y, idx n) {
#pragma omp simd
  for (idx i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double row_dot(const double* a, const double* b, idx n) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (idx i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::size_t b, std::size_t in, std::size_t out) {
  const idx bi = static_cast<idx>(b), ni = static_cast<idx>(in), oi = static_cast<idx>(out);
  // Sample blocks reuse each streamed weight row; per-output accumulation
  // order stays i-ascending.
  constexpr idx kBlock = 8;
  const idx blocks = (bi + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static)
  for (idx blk = 0; blk < blocks; ++blk) {
    const idx s0 = blk * kBlock;
    const idx s1 = std::min(bi, s0 + kBlock);
    for (idx s = s0; s < s1; ++s) std::memcpy(y + s * oi, bias, sizeof(double) * out);
    for (idx i = 0; i < ni; ++i) {
      const double* wrow = w + i * oi;
      for (idx s = s0; s < s1; ++s) {
        row_axpy(x[s * ni + i], wrow, y + s * oi, oi);
      }
    }
  }
}

void dense_forward_serial(const double* x, const double* w, const double* bias, double* y,
                          std::size_t b, std::size_t in, std::size_t out) {
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[s * in + i] * w[i * out + o];
      y[s * out + o] = acc;
    }
  }
}

void dense_backward_input(const double* g, const double* w, double* dx,
                          std::size_t b, std::size_t in, std::size_t out) {
  const idx bi = static_cast<idx>(b), ni = static_cast<idx>(in), oi = static_cast<idx>(out);
  // dx = g·Wᵀ as tiled AXPYs over a transposed weight copy; per-element
  // accumulation order is o-ascending either way.
  std::vector<double> wt(static_cast<std::size_t>(ni * oi));
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (idx o = 0; o < oi; ++o) {
      double* row = wt.data() + o * ni;
      for (idx i = 0; i < ni; ++i) row[i] = w[i * oi + o];
    }

    constexpr idx kBlock = 8;
    constexpr idx kChunk = 512;
    const idx blocks = (bi + kBlock - 1) / kBlock;
#pragma omp for schedule(static) collapse(2)
    for (idx blk = 0; blk < blocks; ++blk) {
      for (idx c0 = 0; c0 < ni; c0 += kChunk) {
        const idx s0 = blk * kBlock;
        const idx s1 = std::min(bi, s0 + kBlock);
        const idx c1 = std::min(ni, c0 + kChunk);
        for (idx s = s0; s < s1; ++s) {
          std::memset(dx + s * ni + c0, 0, sizeof(double) * static_cast<std::size_t>(c1 - c0));
        }
        for (idx o = 0; o < oi; ++o) {
          const double* wrow = wt.data() + o * ni + c0;
          for (idx s = s0; s < s1; ++s) {
            row_axpy(g[s * oi + o], wrow, dx + s * ni + c0, c1 - c0);
          }
        }
      }
    }
  }
}

void dense_backward_input_serial(const double* g, const double* w, double* dx,
                                 std::size_t b, std::size_t in, std::size_t out) {
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) acc += g[s * out + o] * w[i * out + o];
      dx[s * in + i] = acc;
    }
  }
}

void dense_backward_params(const double* x, const double* g, double* dw, double* dbias,
                           std::size_t b, std::size_t in, std::size_t out) {
  const idx bi = static_cast<idx>(b), ni = static_cast<idx>(in), oi = static_cast<idx>(out);
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < ni; ++i) {
    double* dwr = dw + i * oi;
    std::memset(dwr, 0, sizeof(double) * out);
    for (idx s = 0; s < bi; ++s) {
      row_axpy(x[s * ni + i], g + s * oi, dwr, oi);
    }
  }
  std::memset(dbias, 0, sizeof(double) * out);
  for (idx s = 0; s < bi; ++s) {
    row_axpy(1.0, g + s * oi, dbias, oi);
  }
}

void dense_backward_params_serial(const double* x, const double* g, double* dw, double* dbias,
                                  std::size_t b, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t s = 0; s < b; ++s) acc += x[s * in + i] * g[s * out + o];
      dw[i * out + o] = acc;
    }
  }
  for (std::size_t o = 0; o < out; ++o) {
    double acc = 0.0;
    for (std::size_t s = 0; s < b; ++s) acc += g[s * out + o];
    dbias[o] = acc;
  }
}

void conv3x3_forward(const double* x, const double* w, const double* bias, double* y,
                     std::size_t b, std::size_t in_ch, std::size_t out_ch,
                     std::size_t h, std::size_t wd) {
  const idx bi = static_cast<idx>(b), ci = static_cast<idx>(in_ch), oc = static_cast<idx>(out_ch);
  const idx hi = static_cast<idx>(h), wi = static_cast<idx>(wd);
  const idx map = hi * wi;
#pragma omp parallel for collapse(2) schedule(static)
  for (idx s = 0; s < bi; ++s) {
    for (idx o = 0; o < oc; ++o) {
      double* out = y + (s * oc + o) * map;
      const double bv = bias[o];
      for (idx p = 0; p < map; ++p) out[p] = bv;
      for (idx ic = 0; ic < ci; ++ic) {
        const double* xin = x + (s * ci + ic) * map;
        const double* wk = w + (o * ci + ic) * 9;
        for (idx kh = 0; kh < 3; ++kh) {
          const double w0 = wk[kh * 3 + 0], w1 = wk[kh * 3 + 1], w2 = wk[kh * 3 + 2];
          for (idx hh = 0; hh < hi; ++hh) {
            const idx ih = hh + kh - 1;
            if (ih < 0 || ih >= hi) continue;
            const double* xr = xin + ih * wi;
            double* orow = out + hh * wi;
            if (wi < 2) {
              orow[0] += w1 * xr[0];
              continue;
            }
            // All three taps of one kernel row in a single pass.
            orow[0] += w1 * xr[0] + w2 * xr[1];
#pragma omp simd
            for (idx ww = 1; ww < wi - 1; ++ww) {
              orow[ww] += w0 * xr[ww - 1] + w1 * xr[ww] + w2 * xr[ww + 1];
            }
            orow[wi - 1] += w0 * xr[wi - 2] + w1 * xr[wi - 1];
          }
        }
      }
    }
  }
}

void conv3x3_forward_serial(const double* x, const double* w, const double* bias, double* y,
                            std::size_t b, std::size_t in_ch, std::size_t out_ch,
                            std::size_t h, std::size_t wd) {
  const idx ci = static_cast<idx>(in_ch);
  const idx hi = static_cast<idx>(h), wi = static_cast<idx>(wd);
  const idx map = hi * wi;
  for (idx s = 0; s < static_cast<idx>(b); ++s) {
    for (idx o = 0; o < static_cast<idx>(out_ch); ++o) {
      for (idx hh = 0; hh < hi; ++hh) {
        for (idx ww = 0; ww < wi; ++ww) {
          double acc = bias[o];
          for (idx ic = 0; ic < ci; ++ic) {
            for (idx kh = 0; kh < 3; ++kh) {
              for (idx kw = 0; kw < 3; ++kw) {
                const idx ih = hh + kh - 1;
                const idx iw = ww + kw - 1;
                if (ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
                acc += w[((o * ci + ic) * 3 + kh) * 3 + kw] * x[(s * ci + ic) * map + ih * wi + iw];
              }
            }
          }
          y[(s * static_cast<idx>(out_ch) + o) * map + hh * wi + ww] = acc;
        }
      }
    }
  }
}

void conv3x3_backward_input(const double* g, const double* w, double* dx,
                            std::size_t b, std::size_t in_ch, std::size_t out_ch,
                            std::size_t h, std::size_t wd) {
  const idx bi = static_cast<idx>(b), ci = static_cast<idx>(in_ch), oc = static_cast<idx>(out_ch);
  const idx hi = static_cast<idx>(h), wi = static_cast<idx>(wd);
  const idx map = hi * wi;
#pragma omp parallel for collapse(2) schedule(static)
  for (idx s = 0; s < bi; ++s) {
    for (idx ic = 0; ic < ci; ++ic) {
      double* dxm = dx + (s * ci + ic) * map;
      std::memset(dxm, 0, sizeof(double) * static_cast<std::size_t>(map));
      for (idx o = 0; o < oc; ++o) {
        const double* gm = g + (s * oc + o) * map;
        const double* wk = w + (o * ci + ic) * 9;
        for (idx kh = 0; kh < 3; ++kh) {
          // y[oh,ow] consumed x[oh+kh-1, ow+kw-1]; invert the offset.
          const double w0 = wk[kh * 3 + 0], w1 = wk[kh * 3 + 1], w2 = wk[kh * 3 + 2];
          for (idx ih = 0; ih < hi; ++ih) {
            const idx oh = ih - kh + 1;
            if (oh < 0 || oh >= hi) continue;
            const double* gr = gm + oh * wi;
            double* dxr = dxm + ih * wi;
            if (wi < 2) {
              dxr[0] += w1 * gr[0];
              continue;
            }
            dxr[0] += w1 * gr[0] + w0 * gr[1];
#pragma omp simd
            for (idx iw = 1; iw < wi - 1; ++iw) {
              dxr[iw] += w2 * gr[iw - 1] + w1 * gr[iw] + w0 * gr[iw + 1];
            }
            dxr[wi - 1] += w2 * gr[wi - 2] + w1 * gr[wi - 1];
          }
        }
      }
    }
  }
}

void conv3x3_backward_input_serial(const double* g, const double* w, double* dx,
                                   std::size_t b, std::size_t in_ch, std::size_t out_ch,
                                   std::size_t h, std::size_t wd) {
  const idx ci = static_cast<idx>(in_ch), oc = static_cast<idx>(out_ch);
  const idx hi = static_cast<idx>(h), wi = static_cast<idx>(wd);
  const idx map = hi * wi;
  for (idx s = 0; s < static_cast<idx>(b); ++s) {
    for (idx ic = 0; ic < ci; ++ic) {
      for (idx ih = 0; ih < hi; ++ih) {
        for (idx iw = 0; iw < wi; ++iw) {
          double acc = 0.0;
          for (idx o = 0; o < oc; ++o) {
            for (idx kh = 0; kh < 3; ++kh) {
              for (idx kw = 0; kw < 3; ++kw) {
                const idx oh = ih - kh + 1;
                const idx ow = iw - kw + 1;
                if (oh < 0 || oh >= hi || ow < 0 || ow >= wi) continue;
                acc += w[((o * ci + ic) * 3 + kh) * 3 + kw] * g[(s * oc + o) * map + oh * wi + ow];
              }
            }
          }
          dx[(s * ci + ic) * map + ih * wi + iw] = acc;
        }
      }
    }
  }
}

void conv3x3_backward_params(const double* x, const double* g, double* dw, double* dbias,
                             std::size_t b, std::size_t in_ch, std::size_t out_ch,
                             std::size_t h, std::size_t wd) {
  const idx bi = static_cast<idx>(b), ci = static_cast<idx>(in_ch), oc = static_cast<idx>(out_ch);
  const idx hi = static_cast<idx>(h), wi = static_cast<idx>(wd);
  const idx map = hi * wi;
  const idx kk = ci * 9;
  std::memset(dw, 0, sizeof(double) * static_cast<std::size_t>(oc * kk));
  std::memset(dbias, 0, sizeof(double) * static_cast<std::size_t>(oc));
  // Shifted-input rows staged per sample so every filter tap becomes one
  // long contiguous dot against the output gradient map.
  std::vector<double> col(static_cast<std::size_t>(kk * map));

#pragma omp parallel
  {
    for (idx s = 0; s < bi; ++s) {
#pragma omp for schedule(static)
      for (idx k = 0; k < kk; ++k) {
        const idx ic = k / 9;
        const idx kh = (k % 9) / 3;
        const idx kw = k % 3;
        const double* xm = x + (s * ci + ic) * map;
        double* crow = col.data() + k * map;
        for (idx hh = 0; hh < hi; ++hh) {
          const idx ih = hh + kh - 1;
          double* dst = crow + hh * wi;
          if (ih < 0 || ih >= hi) {
            std::memset(dst, 0, sizeof(double) * static_cast<std::size_t>(wi));
            continue;
          }
          const double* src = xm + ih * wi;
          if (kw == 0) {
            dst[0] = 0.0;
            std::memcpy(dst + 1, src, sizeof(double) * static_cast<std::size_t>(wi - 1));
          } else if (kw == 1) {
            std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(wi));
          } else {
            std::memcpy(dst, src + 1, sizeof(double) * static_cast<std::size_t>(wi - 1));
            dst[wi - 1] = 0.0;
          }
        }
      }
#pragma omp for schedule(static)
      for (idx o = 0; o < oc; ++o) {
        const double* gm = g + (s * oc + o) * map;
        double bacc = 0.0;
#pragma omp simd reduction(+ : bacc)
        for (idx p = 0; p < map; ++p) bacc += gm[p];
        dbias[o] += bacc;
        double* dwo = dw + o * kk;
        for (idx k = 0; k < kk; ++k) {
          dwo[k] += row_dot(gm, col.data() + k * map, map);
        }
      }
    }
  }
}

void conv3x3_backward_params_serial(const double* x, const double* g, double* dw, double* dbias,
                                    std::size_t b, std::size_t in_ch, std::size_t out_ch,
                                    std::size_t h, std::size_t wd) {
  const idx ci = static_cast<idx>(in_ch), oc = static_cast<idx>(out_ch);
  const idx hi = static_cast<idx>(h), wi = static_cast<idx>(wd);
  const idx map = hi * wi;
  for (idx o = 0; o < oc; ++o) {
    for (idx ic = 0; ic < ci; ++ic) {
      for (idx kh = 0; kh < 3; ++kh) {
        for (idx kw = 0; kw < 3; ++kw) {
          double acc = 0.0;
          for (idx s = 0; s < static_cast<idx>(b); ++s) {
            for (idx hh = 0; hh < hi; ++hh) {
              for (idx ww = 0; ww < wi; ++ww) {
                const idx ih = hh + kh - 1;
                const idx iw = ww + kw - 1;
                if (ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
                acc += g[(s * oc + o) * map + hh * wi + ww] * x[(s * ci + ic) * map + ih * wi + iw];
              }
            }
          }
          dw[((o * ci + ic) * 3 + kh) * 3 + kw] = acc;
        }
      }
    }
    double bacc = 0.0;
    for (idx s = 0; s < static_cast<idx>(b); ++s) {
      for (idx p = 0; p < map; ++p) bacc += g[(s * oc + o) * map + p];
    }
    dbias[o] = bacc;
  }
}

}  // namespace cguard::kernels
