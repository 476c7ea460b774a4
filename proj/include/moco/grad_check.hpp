#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moco/graph.hpp"

namespace moco {

// Builds a scalar loss from the bound parameters. Must be deterministic.
using GraphBuilder = std::function<Var(Graph<double>&, std::span<const Var>)>;

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-4;
  // Multiplies the analytic gradient before comparison; != 1 only in
  // mutation tests of the checker itself.
  double analytic_scale = 1.0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose perturbation flipped a relu activation.
  std::size_t skipped_kinks = 0;
  std::string failure;
};

// Central-difference check of every coordinate of every parameter:
// rel = |a - n| / max(|a|, |n|, 1e-6) must stay within tol.
GradCheckReport grad_check(const GraphBuilder& f, std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options = {});

}  // namespace moco
