#pragma once

#include <array>
#include <cmath>

namespace reidlab {

// Orthonormal 8x8 DCT-II. At this size a plain basis-matrix product is
// exact, fast enough, and has no dependency cost.
struct Dct8 {
  static constexpr int N = 8;
  std::array<std::array<double, N>, N> basis{};  // basis[u][x]

  Dct8() {
    const double pi = 3.14159265358979323846;
    for (int u = 0; u < N; ++u) {
      double s = (u == 0) ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
      for (int x = 0; x < N; ++x)
        basis[u][x] = s * std::cos((2 * x + 1) * u * pi / (2.0 * N));
    }
  }

  static const Dct8& instance() {
    static const Dct8 d;
    return d;
  }

  // block and coef are row-major 64-element arrays.
  void forward(const double* block, double* coef) const {
    double tmp[N][N];
    for (int u = 0; u < N; ++u)
      for (int x = 0; x < N; ++x) {
        double acc = 0.0;
        for (int y = 0; y < N; ++y) acc += basis[u][y] * block[y * N + x];
        tmp[u][x] = acc;
      }
    for (int u = 0; u < N; ++u)
      for (int vv = 0; vv < N; ++vv) {
        double acc = 0.0;
        for (int x = 0; x < N; ++x) acc += tmp[u][x] * basis[vv][x];
        coef[u * N + vv] = acc;
      }
  }

  void inverse(const double* coef, double* block) const {
    double tmp[N][N];
    for (int u = 0; u < N; ++u)
      for (int x = 0; x < N; ++x) {
        double acc = 0.0;
        for (int vv = 0; vv < N; ++vv) acc += coef[u * N + vv] * basis[vv][x];
        tmp[u][x] = acc;
      }
    for (int y = 0; y < N; ++y)
      for (int x = 0; x < N; ++x) {
        double acc = 0.0;
        for (int u = 0; u < N; ++u) acc += basis[u][y] * tmp[u][x];
        block[y * N + x] = acc;
      }
  }
};

// Standard diagonal zigzag over the 8x8 grid; zigzag_order()[k] is the
// row-major coefficient index of zigzag position k (position 0 = DC).
inline const std::array<int, 64>& zigzag_order() {
  static const std::array<int, 64> table = [] {
    std::array<int, 64> t{};
    int k = 0, row = 0, col = 0;
    bool up = true;
    while (k < 64) {
      t[k++] = row * 8 + col;
      if (up) {
        if (col == 7) { ++row; up = false; }
        else if (row == 0) { ++col; up = false; }
        else { --row; ++col; }
      } else {
        if (row == 7) { ++col; up = true; }
        else if (col == 0) { ++row; up = true; }
        else { ++row; --col; }
      }
    }
    return t;
  }();
  return table;
}

}  // namespace reidlab
