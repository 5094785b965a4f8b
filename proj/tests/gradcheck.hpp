#pragma once

// Central-finite-difference gradient oracle shared by the unit and
// acceptance suites. Independent of the tape's backward pass: it only
// re-runs forward evaluations.

#include <cmath>
#include <functional>
#include <vector>

#include "uniddg/autodiff.hpp"
#include "uniddg/rng.hpp"
#include "uniddg/tensor.hpp"

namespace uniddg::testing {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

// forward: given a tape and the bound parameter leaves (same order as
// `params`), build the graph and return the scalar loss Var.
using ForwardFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

inline GradCheckReport gradcheck(const ForwardFn& forward, std::vector<Tensor>& params,
                                 RandomStream& rng, int samples_per_param, double h = 1e-3) {
  // analytic gradients
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vs;
    vs.reserve(params.size());
    for (auto& p : params) vs.push_back(tape.param(p));
    Var loss = forward(tape, vs);
    tape.backward(loss);
    for (auto& v : vs) analytic.push_back(tape.grad(v));
  }

  auto eval = [&](const std::vector<Tensor>& ps) {
    Tape tape;
    std::vector<Var> vs;
    vs.reserve(ps.size());
    for (auto& p : ps) vs.push_back(tape.input(p));
    return tape.value(forward(tape, vs))[0];
  };

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const std::int64_t n = params[pi].numel();
    const int samples = static_cast<int>(std::min<std::int64_t>(samples_per_param, n));
    for (int s = 0; s < samples; ++s) {
      const std::int64_t j = rng.index(n);
      const double orig = params[pi][j];
      params[pi][j] = orig + h;
      const double fp = eval(params);
      params[pi][j] = orig - h;
      const double fm = eval(params);
      params[pi][j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[pi][j], numeric));
      ++report.coords_checked;
    }
  }
  return report;
}

inline Tensor random_tensor(std::vector<int> shape, RandomStream& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace uniddg::testing
