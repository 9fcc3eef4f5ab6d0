#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stae/tensor.hpp"

namespace stae {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  double h = 0.0;
  double tol = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double max_rel_error() const;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true gradient is ~0 from dominating through roundoff: a central difference
// with h = 1e-5 on an O(1) loss carries ~1e-11 of noise.
double relative_error(double analytic, double numeric, double floor = 1e-5);

// Compares reverse-mode gradients of the scalar `loss_fn` against central
// differences for every entry of every parameter. `loss_fn` must be
// deterministic; two differing evaluations raise ContractError.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<NamedParam> params,
                           double h = 1e-5, double tol = 1e-4);

}  // namespace stae
