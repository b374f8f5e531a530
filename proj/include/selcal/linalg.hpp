#pragma once

#include <Eigen/Core>

namespace selcal {

// Row-major so that data() matches the on-disk order of model and mel files.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace selcal
