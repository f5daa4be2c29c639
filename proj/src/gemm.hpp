#pragma once

#include <cstdint>

namespace lamamba::detail {

/// c[m,n] += op(a) op(b), row-major, op = transpose when the flag is set.
/// a is [m,k] (or [k,m] when ta), b is [k,n] (or [n,k] when tb).
void gemm_acc(const double* a, bool ta, const double* b, bool tb, double* c, std::int64_t m,
              std::int64_t k, std::int64_t n);

}  // namespace lamamba::detail
