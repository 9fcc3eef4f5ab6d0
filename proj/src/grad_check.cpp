#include "stae/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "stae/error.hpp"

namespace stae {

bool GradCheckReport::passed() const {
  return std::none_of(entries.begin(), entries.end(), [](const auto& e) { return e.flagged; });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<NamedParam> params, double h,
                           double tol) {
  if (h < 1e-6 || h > 1e-4) throw ConfigError("grad_check: h must lie in [1e-6, 1e-4]");

  for (auto& p : params) p.tensor.zero_grad();
  const Tensor loss = loss_fn();
  if (loss.numel() != 1) throw ContractError("grad_check: loss must be scalar, got " + shape_str(loss.shape()));
  const double reference = loss.item();
  {
    NoGradGuard no_grad;
    const double again = loss_fn().item();
    if (again != reference) {
      throw ContractError("grad_check: loss function is not deterministic (" + std::to_string(reference) + " vs " +
                          std::to_string(again) + ")");
    }
  }
  backward(loss);

  GradCheckReport report;
  report.h = h;
  report.tol = tol;
  NoGradGuard no_grad;
  for (auto& p : params) {
    GradCheckEntry entry;
    entry.name = p.name;
    entry.size = p.tensor.numel();
    const std::vector<double> analytic =
        p.tensor.has_grad() ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                            : std::vector<double>(entry.size, 0.0);
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < entry.size; ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_fn().item();
      values[i] = saved - h;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    entry.flagged = entry.max_rel_error > tol;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace stae
