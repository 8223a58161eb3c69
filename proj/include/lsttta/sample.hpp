#pragma once

#include <string>

#include "lsttta/grid.hpp"

namespace lsttta {

/// What adaptation may see for one target date: coarse LST at t2 and the
/// index stack at the reference time t1.
struct Observation {
  std::string date;
  Grid x_coarse;
  IndexStack indices;
};

/// An observation plus the hidden fine-scale truth, used only for
/// pretraining on the source domain and for evaluation.
struct TargetSample {
  Observation obs;
  Grid truth_fine;
};

}  // namespace lsttta
