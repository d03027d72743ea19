#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "dynrep/core/error.hpp"

namespace dynrep {

using cplx = std::complex<double>;

inline bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey. Forward transform uses e^{-i..};
// the inverse includes the 1/n factor.
inline void fft_inplace(std::vector<cplx>& a, bool inverse) {
  int64_t n = static_cast<int64_t>(a.size());
  if (!is_pow2(n))
    throw Error(ErrCode::value,
                "fft: length " + std::to_string(n) + " is not a power of two");
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[static_cast<size_t>(i)], a[static_cast<size_t>(j)]);
  }
  for (int64_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    cplx wl(std::cos(ang), std::sin(ang));
    for (int64_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (int64_t j = 0; j < len / 2; ++j) {
        cplx u = a[static_cast<size_t>(i + j)];
        cplx v = a[static_cast<size_t>(i + j + len / 2)] * w;
        a[static_cast<size_t>(i + j)] = u + v;
        a[static_cast<size_t>(i + j + len / 2)] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    double inv = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv;
  }
}

// Row-column 2D transform of row-major [h, w] data.
inline void fft2_inplace(std::vector<cplx>& a, int64_t h, int64_t w,
                         bool inverse) {
  if (static_cast<int64_t>(a.size()) != h * w)
    throw Error(ErrCode::shape, "fft2: buffer does not match grid");
  std::vector<cplx> line;
  line.resize(static_cast<size_t>(w));
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c)
      line[static_cast<size_t>(c)] = a[static_cast<size_t>(r * w + c)];
    fft_inplace(line, inverse);
    for (int64_t c = 0; c < w; ++c)
      a[static_cast<size_t>(r * w + c)] = line[static_cast<size_t>(c)];
  }
  line.resize(static_cast<size_t>(h));
  for (int64_t c = 0; c < w; ++c) {
    for (int64_t r = 0; r < h; ++r)
      line[static_cast<size_t>(r)] = a[static_cast<size_t>(r * w + c)];
    fft_inplace(line, inverse);
    for (int64_t r = 0; r < h; ++r)
      a[static_cast<size_t>(r * w + c)] = line[static_cast<size_t>(r)];
  }
}

// Signed integer wavenumber for bin i of an n-point transform.
inline int64_t wavenumber(int64_t i, int64_t n) {
  return i <= n / 2 ? i : i - n;
}

inline std::vector<cplx> to_spectrum(const std::vector<double>& field,
                                     int64_t h, int64_t w) {
  std::vector<cplx> s(field.begin(), field.end());
  fft2_inplace(s, h, w, false);
  return s;
}

inline std::vector<double> to_field(std::vector<cplx> spectrum, int64_t h,
                                    int64_t w) {
  fft2_inplace(spectrum, h, w, true);
  std::vector<double> f(spectrum.size());
  for (size_t i = 0; i < spectrum.size(); ++i) f[i] = spectrum[i].real();
  return f;
}

}  // namespace dynrep
