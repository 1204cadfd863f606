#include "stw/linalg.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stw {

void symmetric_eigen(const Matrix& A, std::vector<double>& values, Matrix& vectors) {
  if (A.rows != A.cols) throw std::invalid_argument("symmetric_eigen: matrix not square");
  const int n = A.rows;
  Matrix M = A;
  Matrix V(n, n, 0.0);
  for (int i = 0; i < n; ++i) V.at(i, i) = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += M.at(p, q) * M.at(p, q);
    if (off < 1e-24) break;

    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = M.at(p, q);
        if (std::abs(apq) < 1e-300) continue;
        double theta = (M.at(q, q) - M.at(p, p)) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int i = 0; i < n; ++i) {
          double mip = M.at(i, p), miq = M.at(i, q);
          M.at(i, p) = c * mip - s * miq;
          M.at(i, q) = s * mip + c * miq;
        }
        for (int j = 0; j < n; ++j) {
          double mpj = M.at(p, j), mqj = M.at(q, j);
          M.at(p, j) = c * mpj - s * mqj;
          M.at(q, j) = s * mpj + c * mqj;
        }
        for (int i = 0; i < n; ++i) {
          double vip = V.at(i, p), viq = V.at(i, q);
          V.at(i, p) = c * vip - s * viq;
          V.at(i, q) = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return M.at(a, a) > M.at(b, b); });

  values.resize(static_cast<size_t>(n));
  vectors = Matrix(n, n, 0.0);
  for (int j = 0; j < n; ++j) {
    values[static_cast<size_t>(j)] = M.at(order[size_t(j)], order[size_t(j)]);
    for (int i = 0; i < n; ++i) vectors.at(i, j) = V.at(i, order[size_t(j)]);
  }
}

}  // namespace stw
