#include "pointmoment/bench.hpp"

#include <algorithm>
#include <chrono>
#include <vector>

#include "pointmoment/random.hpp"

namespace pointmoment {

RrTiming time_rr_loss(std::size_t b, std::size_t d, const MomentSpec& spec, std::size_t repeats,
                      std::uint64_t seed) {
  spec.validate(d);
  RrTiming out;
  out.terms = count_combinations(d, spec.orders);
  out.views = spec.branch_mode == BranchMode::All ? 2 : 1;
  repeats = std::max<std::size_t>(repeats, 1);

  Rng rng(derive_seed(seed, {0x4245, b, d}));
  std::vector<Tensor> zs;
  for (std::size_t v = 0; v < out.views; ++v) {
    Tensor z({b, d}, Tensor::Uninitialized{});
    for (double& x : z.data()) x = rng.normal();
    zs.push_back(standardize(ad::constant(std::move(z))).z_hat().value());
  }
  double seconds = 0.0;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    // Fresh leaves per repeat so backward runs on a new graph.
    std::vector<StandardizedBatch> views;
    for (const auto& z : zs) views.push_back(StandardizedBatch::wrap(ad::parameter(z)));
    const auto t0 = std::chrono::steady_clock::now();
    const auto loss = rr_loss(views, spec);
    ad::backward(loss.loss);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  out.wall_seconds = seconds / static_cast<double>(repeats);
  return out;
}

}  // namespace pointmoment
