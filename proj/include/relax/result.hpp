#pragma once

#include <optional>

#include "relax/common.hpp"

namespace relax {

/// Outcome of one counterfactual attempt. Distances are in normalized space;
/// `proximity_raw` is the same L1 distance in raw feature units when the
/// normalizer was available.
struct CfResult {
  int instance_id = -1;
  Vec original;
  std::optional<Vec> counterfactual;  // present iff valid
  Vec last_state;                     // final x_t, kept for diagnostics
  bool valid = false;
  double proximity = 0.0;
  std::optional<double> proximity_raw;
  int sparsity = 0;
  double gen_time_s = 0.0;

  /// e_x = x~* - x; empty when invalid.
  Vec explanation() const {
    return counterfactual ? Vec(*counterfactual - original) : Vec();
  }
};

/// Fills proximity/sparsity from `original` and `final_state`.
CfResult make_result(const Vec& original, const Vec& final_state, bool valid);

}  // namespace relax
