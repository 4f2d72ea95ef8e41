#include "ldkl/optimizer.hpp"

#include <cmath>

namespace ldkl::train {

AdamW::AdamW(ad::ParameterStore& store, const AdamWOptions& opts) : opts_(opts) {
  for (ad::Parameter& p : store.items()) {
    if (p.group == ad::ParamGroup::Buffer || !p.requires_grad) continue;
    const bool nn = p.group == ad::ParamGroup::Network;
    slots_.push_back({&p, Tensor(p.value.shape()), Tensor(p.value.shape()), nn ? opts.lr_nn : opts.lr_gp,
                      nn ? opts.weight_decay : 0.0});
  }
}

void AdamW::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
  for (Slot& s : slots_) {
    if (s.lr == 0.0) continue;
    auto w = s.param->value.data();
    auto g = s.param->grad.data();
    auto m = s.m.data();
    auto v = s.v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
      w[i] -= s.lr * (update + s.decay * w[i]);
    }
  }
}

}  // namespace ldkl::train
