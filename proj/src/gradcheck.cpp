#include "ldkl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ldkl/error.hpp"

namespace ldkl::ad {

namespace {
double evaluate(const ScalarFn& f) {
  Tape tape;
  return f(tape).item();
}
}  // namespace

GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Parameter*>& params, double h,
                                  const GradCheckOptions& opts) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var root = f(tape);
    tape.backward(root);
  }

  GradCheckReport report;
  for (Parameter* p : params) {
    const std::size_t n = p->value.numel();
    const std::size_t stride =
        opts.max_coords_per_param == 0 ? 1 : std::max<std::size_t>(1, n / opts.max_coords_per_param);
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = evaluate(f);
      p->value[i] = saved - h;
      const double down = evaluate(f);
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      ++report.coordinates_checked;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        report.worst_coordinate = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace ldkl::ad
