#pragma once

// Central finite-difference verification of every differentiable op and of
// the composite encoder + loss pipeline.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pointmoment/autodiff.hpp"

namespace pointmoment {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  // Random trials for each elementary op.
  std::size_t op_trials = 100;
  // Random configurations for each composite (moments, losses, model) check.
  std::size_t pipeline_trials = 25;
  double h = 1e-5;
  double tolerance = 1e-5;
};

struct GradCheckResult {
  std::string name;
  std::size_t trials = 0;
  // Draws rejected because the point sat next to a ReLU or max kink, or a
  // standardized column was nearly constant.
  std::size_t redrawn = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

// ||g_autodiff - g_fd|| / max(||g_autodiff||, ||g_fd||, 1e-8) over all leaves.
// `loss_fn` must rebuild the graph from the current leaf values on every call.
double gradient_rel_error(const std::function<ad::Var()>& loss_fn, std::span<const ad::Var> leaves, double h);

// Smallest distance of any ReLU input from 0 and of any max from its runner-up
// in the graph under `root`. Infinity when the graph has neither.
double kink_margin(const ad::Var& root);

// Smallest population std of any column entering a standardize node.
double min_standardized_std(const ad::Var& root);

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options);

std::string format_gradcheck_line(const GradCheckResult& r);

}  // namespace pointmoment
