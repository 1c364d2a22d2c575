// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

namespace vaflow {

// Row-major throughout: token sequences are (rows = positions, cols = dims)
// and batches are stacked along rows, which keeps every matmul a single
// contiguous GEMM.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

}  // namespace vaflow
