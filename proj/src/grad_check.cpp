#include "moco/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moco {

namespace {

struct Evaluation {
  double loss;
  std::uint64_t relu_signature;
};

Evaluation evaluate(const GraphBuilder& f, std::vector<Tensor<double>>& params) {
  Graph<double> g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (auto& p : params) vars.push_back(g.constant(p));
  const Var out = f(g, vars);
  if (g.value(out).numel() != 1) {
    throw ContractError("grad_check: builder must return a scalar");
  }
  return {g.value(out).item(), g.relu_signature()};
}

}  // namespace

GradCheckReport grad_check(const GraphBuilder& f, std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;

  std::vector<Vector<double>> analytic;
  std::uint64_t base_signature = 0;
  {
    Graph<double> g;
    std::vector<Var> vars;
    for (auto& p : params) {
      p.grad.reset();
      vars.push_back(g.leaf(p));
    }
    const Var out = f(g, vars);
    base_signature = g.relu_signature();
    g.backward(out);
    for (auto& p : params) analytic.push_back(*p.grad * options.analytic_scale);
  }

  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Index i = 0; i < params[t].numel(); ++i) {
      double& coord = params[t].data(i);
      const double saved = coord;
      coord = saved + options.eps;
      const Evaluation plus = evaluate(f, params);
      coord = saved - options.eps;
      const Evaluation minus = evaluate(f, params);
      coord = saved;

      auto where = [&] {
        std::ostringstream os;
        os << "param " << t << " coordinate " << i;
        return os.str();
      };
      if (!std::isfinite(plus.loss) || !std::isfinite(minus.loss)) {
        report.passed = false;
        report.failure = "non-finite loss at " + where();
        return report;
      }
      if (plus.relu_signature != base_signature || minus.relu_signature != base_signature) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * options.eps);
      const double a = analytic[t](i);
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      ++report.checked;
      if (rel > report.max_rel_error) report.max_rel_error = rel;
      if (rel > options.tol && report.passed) {
        report.passed = false;
        std::ostringstream os;
        os << where() << ": analytic " << a << " vs numeric " << numeric
           << " (rel " << rel << ")";
        report.failure = os.str();
      }
    }
  }
  return report;
}

}  // namespace moco
