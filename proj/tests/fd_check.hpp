#pragma once

// Central finite-difference gradient oracle. Test-only; independent of the
// tape's backward pass, which it exists to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "smg/tensor.hpp"

namespace smg::testutil {

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

// build records the computation on the given tape from the supplied leaves
// and returns the scalar loss.
using BuildFn = std::function<smg::Var(smg::Tape&, const std::vector<smg::Var>&)>;

inline FdReport fd_check(const std::vector<smg::Tensor>& params, const BuildFn& build,
                         double step = 1e-5) {
  using namespace smg;

  // analytic gradients from one backward pass
  std::vector<Tensor> grads;
  {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(tape.param(p));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    for (Var l : leaves) grads.push_back(tape.grad(l));
  }

  auto eval = [&](const std::vector<Tensor>& ps) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(ps.size());
    for (const Tensor& p : ps) leaves.push_back(tape.constant(p));
    return tape.value(build(tape, leaves)).scalar_value();
  };

  FdReport report;
  std::vector<Tensor> probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].numel(); ++j) {
      const double saved = probe[i].data[j];
      probe[i].data[j] = saved + step;
      const double fp = eval(probe);
      probe[i].data[j] = saved - step;
      const double fm = eval(probe);
      probe[i].data[j] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      report.max_rel_err = std::max(report.max_rel_err, rel_err(grads[i].data[j], numeric));
      ++report.coords_checked;
    }
  }
  return report;
}

}  // namespace smg::testutil
