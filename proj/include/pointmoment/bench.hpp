#pragma once
// Wall-clock timing of the redundancy term.

#include <cstddef>
#include <cstdint>

#include "pointmoment/moments.hpp"

namespace pointmoment {

struct RrTiming {
  std::uint64_t terms = 0;  // mixed moments per view
  std::size_t views = 0;    // 2 for BranchMode::All, 1 for Single
  double wall_seconds = 0.0;  // mean over repeats, forward plus backward
  double terms_per_second() const { return static_cast<double>(terms * views) / wall_seconds; }
};

// Times rr_loss and its backward pass on standard-normal [b, d] batches.
// Throws ConfigError when spec is invalid for d (including the term budget).
RrTiming time_rr_loss(std::size_t b, std::size_t d, const MomentSpec& spec, std::size_t repeats,
                      std::uint64_t seed);

}  // namespace pointmoment
