#pragma once

// Adam with decoupled weight decay over two parameter groups: network weights and GP
// parameters. Buffers are never touched.

#include <cstddef>
#include <vector>

#include "ldkl/autodiff.hpp"

namespace ldkl::train {

struct AdamWOptions {
  double lr_nn = 3e-4;
  double lr_gp = 1e-2;
  double weight_decay = 1e-2;  // network group only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamW {
 public:
  AdamW(ad::ParameterStore& store, const AdamWOptions& opts);

  /// Applies one update from the gradients currently held in the store.
  void step();
  std::size_t steps() const { return steps_; }

 private:
  struct Slot {
    ad::Parameter* param;
    Tensor m;
    Tensor v;
    double lr;
    double decay;
  };
  std::vector<Slot> slots_;
  AdamWOptions opts_;
  std::size_t steps_ = 0;
};

}  // namespace ldkl::train
