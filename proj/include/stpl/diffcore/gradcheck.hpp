#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stpl/diffcore/ops.hpp"

namespace stpl {

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  std::size_t elements_checked = 0;
  std::string message;
};

/// Builds the function under test on a fresh tape from leaves bound to the inputs.
using GradCheckFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

namespace detail {

/// Non-scalar outputs are contracted against fixed pseudo-random weights so
/// every output element contributes to the checked scalar.
inline Var<double> to_scalar(Tape<double>& tape, const Var<double>& out) {
  if (out.value().size() == 1) return reshape(out, Shape{1});
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  Tensor<double> w(out.shape());
  for (auto& v : w.data()) v = u(rng);
  return sum(mul(out, tape.constant(std::move(w))));
}

inline double evaluate(const GradCheckFn& fn, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape(false);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  return to_scalar(tape, fn(tape, vars)).value()[0];
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences for every
/// element of every input in `check_inputs` (all inputs when empty).
/// Relative error is |a - n| / max(|a|, |n|, 1e-3).
inline GradCheckReport grad_check(const GradCheckFn& fn, const std::vector<Tensor<double>>& inputs,
                                  double epsilon = 1e-5, double tolerance = 1e-4,
                                  std::vector<std::size_t> check_inputs = {}) {
  if (check_inputs.empty()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) check_inputs.push_back(i);
  }
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.leaf(inputs[i], true));
  auto loss = detail::to_scalar(tape, fn(tape, vars));
  tape.backward(loss);

  GradCheckReport report;
  std::vector<Tensor<double>> work = inputs;
  for (auto which : check_inputs) {
    const auto analytic = vars[which].grad();
    for (std::size_t e = 0; e < work[which].size(); ++e) {
      const double orig = work[which][e];
      work[which][e] = orig + epsilon;
      const double fp = detail::evaluate(fn, work);
      work[which][e] = orig - epsilon;
      const double fm = detail::evaluate(fn, work);
      work[which][e] = orig;
      ++report.elements_checked;
      if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[e])) {
        std::ostringstream os;
        os << "non-finite value at input " << which << " element " << e;
        report.passed = false;
        report.message = os.str();
        report.worst_input = which;
        report.worst_element = e;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double denom = std::max({std::abs(analytic[e]), std::abs(numeric), 1e-3});
      const double rel = std::abs(analytic[e] - numeric) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = which;
        report.worst_element = e;
      }
    }
  }
  report.passed = report.max_rel_error < tolerance;
  if (!report.passed) {
    std::ostringstream os;
    os << "max relative error " << report.max_rel_error << " at input " << report.worst_input
       << " element " << report.worst_element;
    report.message = os.str();
  }
  return report;
}

}  // namespace stpl
