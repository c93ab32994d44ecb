#pragma once

#include <Eigen/Dense>

namespace bil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

}  // namespace bil
