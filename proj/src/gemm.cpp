#include "gemm.hpp"

#include <Eigen/Core>

namespace lamamba::detail {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
}  // namespace

void gemm_acc(const double* a, bool ta, const double* b, bool tb, double* c, std::int64_t m,
              std::int64_t k, std::int64_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  MMap C(c, m, n);
  if (!ta && !tb) C.noalias() += CMap(a, m, k) * CMap(b, k, n);
  else if (!ta && tb) C.noalias() += CMap(a, m, k) * CMap(b, n, k).transpose();
  else if (ta && !tb) C.noalias() += CMap(a, k, m).transpose() * CMap(b, k, n);
  else C.noalias() += CMap(a, k, m).transpose() * CMap(b, n, k).transpose();
}

}  // namespace lamamba::detail
