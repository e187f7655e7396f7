#include "rwtoken/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <string>

namespace rwtoken {

namespace {

constexpr double kResidualTol = 1e-9;
constexpr double kInf = std::numeric_limits<double>::infinity();

void require_square(const Eigen::MatrixXd& p) {
  if (p.rows() != p.cols() || p.rows() == 0) throw InvalidInput("walk matrix must be square and non-empty");
}

void require_target(const Eigen::MatrixXd& p, NodeId target) {
  if (static_cast<Eigen::Index>(target) >= p.rows()) {
    throw InvalidInput("target node " + std::to_string(target) + " out of range");
  }
}

// Sources from which `target` is hit with probability one: those that can
// reach it and cannot wander into a region that never does.
std::vector<bool> almost_sure_sources(const Eigen::MatrixXd& p, Eigen::Index target) {
  const Eigen::Index n = p.rows();
  auto reverse_closure = [&](std::vector<bool> seed, bool skip_target) {
    std::deque<Eigen::Index> frontier;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (seed[k]) frontier.push_back(k);
    }
    while (!frontier.empty()) {
      const Eigen::Index k = frontier.front();
      frontier.pop_front();
      for (Eigen::Index i = 0; i < n; ++i) {
        if (seed[i] || p(i, k) <= 0.0) continue;
        if (skip_target && i == target) continue;
        seed[i] = true;
        frontier.push_back(i);
      }
    }
    return seed;
  };

  std::vector<bool> start(n, false);
  start[target] = true;
  const std::vector<bool> reaches = reverse_closure(start, false);

  std::vector<bool> never(n, false);
  for (Eigen::Index k = 0; k < n; ++k) never[k] = !reaches[k];
  const std::vector<bool> may_escape = reverse_closure(never, true);

  std::vector<bool> sure(n, false);
  for (Eigen::Index k = 0; k < n; ++k) sure[k] = !may_escape[k];
  return sure;
}

}  // namespace

double HittingDistribution::operator()(NodeId source, std::size_t t) const {
  const auto row = static_cast<Eigen::Index>(std::min(t, t_max()));
  return cdf(row, static_cast<Eigen::Index>(source));
}

HittingMatrix hitting_times(const Eigen::MatrixXd& p) {
  require_square(p);
  const Eigen::Index n = p.rows();
  HittingMatrix out;
  out.h = Eigen::MatrixXd::Zero(n, n);
  out.reachable.setConstant(n, n, true);

  for (Eigen::Index j = 0; j < n; ++j) {
    const std::vector<bool> sure = almost_sure_sources(p, j);
    std::vector<Eigen::Index> index;  // unknowns: sure sources other than j
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i == j) continue;
      if (sure[i]) {
        index.push_back(i);
      } else {
        out.h(i, j) = kInf;
        out.reachable(i, j) = false;
      }
    }
    if (index.empty()) continue;

    const auto k = static_cast<Eigen::Index>(index.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(k, k);
    for (Eigen::Index r = 0; r < k; ++r) {
      for (Eigen::Index c = 0; c < k; ++c) a(r, c) -= p(index[r], index[c]);
    }
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(k);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
    const Eigen::VectorXd x = lu.solve(ones);
    const double residual = (a * x - ones).lpNorm<Eigen::Infinity>();
    out.max_residual = std::max(out.max_residual, residual);
    if (!std::isfinite(residual) || residual > kResidualTol * std::max(1.0, x.lpNorm<Eigen::Infinity>())) {
      throw NumericalError("hitting-time system for target " + std::to_string(j) +
                           " is numerically singular");
    }
    for (Eigen::Index r = 0; r < k; ++r) out.h(index[r], j) = x(r);
  }
  return out;
}

HittingMatrix dynamic_hitting_times(const DynamicGraphProcess& process) {
  const GraphDistribution pi = stationary_distribution(process);
  return hitting_times(averaged_transition_matrix(process, pi));
}

HittingDistribution hitting_distribution(const Eigen::MatrixXd& p, NodeId target,
                                         std::size_t t_max) {
  require_square(p);
  require_target(p, target);
  if (t_max < 1) throw InvalidInput("t_max must be at least 1");
  const Eigen::Index n = p.rows();
  const auto j = static_cast<Eigen::Index>(target);

  // survive(i) = P[H_ij > t]; the target column is zeroed so mass entering j stays there.
  Eigen::MatrixXd transient = p;
  transient.col(j).setZero();
  Eigen::VectorXd survive = Eigen::VectorXd::Ones(n);
  survive(j) = 0.0;

  HittingDistribution out;
  out.target = target;
  out.cdf.resize(static_cast<Eigen::Index>(t_max) + 1, n);
  out.cdf.row(0) = (Eigen::VectorXd::Ones(n) - survive).transpose();
  for (std::size_t t = 1; t <= t_max; ++t) {
    survive = transient * survive;
    survive(j) = 0.0;
    out.cdf.row(static_cast<Eigen::Index>(t)) =
        (Eigen::VectorXd::Ones(n) - survive).cwiseMax(0.0).cwiseMin(1.0).transpose();
  }
  return out;
}

Eigen::VectorXd return_distribution(const Eigen::MatrixXd& p, NodeId node, std::size_t t_max) {
  const HittingDistribution f = hitting_distribution(p, node, std::max<std::size_t>(t_max, 1));
  const auto i = static_cast<Eigen::Index>(node);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(t_max) + 1);
  for (std::size_t t = 1; t <= t_max; ++t) {
    // First step to k, then hit i within t - 1 further steps (F_ii = 1).
    const Eigen::VectorXd prev = f.cdf.row(static_cast<Eigen::Index>(t - 1)).transpose();
    out(static_cast<Eigen::Index>(t)) = std::min(1.0, p.row(i).dot(prev));
  }
  return out;
}

Eigen::VectorXd variance_hitting(const Eigen::MatrixXd& p, const HittingMatrix& hm, NodeId target) {
  require_square(p);
  require_target(p, target);
  const Eigen::Index n = p.rows();
  const auto j = static_cast<Eigen::Index>(target);
  if (!hm.reachable.col(j).all()) {
    throw NumericalError("variance system is singular: target " + std::to_string(target) +
                         " is not reached from every node");
  }
  const Eigen::VectorXd h = hm.h.col(j);

  // Row i != j:  sum_l P_il V_l - V_i = h_i^2 - sum_k P_ik (h_k + 1)^2.   Row j: V_j = 0.
  Eigen::MatrixXd m = p;
  Eigen::VectorXd v(n);
  const Eigen::VectorXd shifted_sq = (h.array() + 1.0).square().matrix();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i == j) continue;
    m(i, i) -= 1.0;
    v(i) = h(i) * h(i) - p.row(i).dot(shifted_sq);
  }
  m.row(j).setZero();
  m(j, j) = 1.0;
  v(j) = 0.0;

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  Eigen::VectorXd var = lu.solve(v);
  const double residual = (m * var - v).lpNorm<Eigen::Infinity>();
  const double scale = std::max(1.0, v.lpNorm<Eigen::Infinity>());
  if (!std::isfinite(residual) || residual > kResidualTol * scale) {
    throw NumericalError("variance system for target " + std::to_string(target) + " is singular");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (var(i) < 0.0) {
      if (var(i) < -kResidualTol * scale) {
        throw NumericalError("negative hitting-time variance for target " + std::to_string(target));
      }
      var(i) = 0.0;
    }
  }
  var(j) = 0.0;
  return var;
}

ReturnStats return_stats(const Eigen::MatrixXd& p, const HittingMatrix& hm,
                         const Eigen::MatrixXd& variance) {
  require_square(p);
  const Eigen::Index n = p.rows();
  if (hm.h.rows() != n || variance.rows() != n || variance.cols() != n) {
    throw InvalidInput("dimension mismatch between walk matrix and hitting statistics");
  }
  ReturnStats out;
  out.return_h_first_step.resize(n);
  out.return_variance.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double first_step = 1.0;
    double second_moment = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (p(i, k) == 0.0) continue;
      const double hk = k == i ? 0.0 : hm.h(k, i);
      const double vk = k == i ? 0.0 : variance(k, i);
      first_step += p(i, k) * hk;
      second_moment += p(i, k) * (vk + (hk + 1.0) * (hk + 1.0));
    }
    out.return_h_first_step(i) = first_step;
    out.return_variance(i) = std::max(0.0, second_moment - first_step * first_step);
  }
  out.return_h = out.return_h_first_step;
  return out;
}

ReturnStats return_stats(const StaticGraph& g, const Eigen::MatrixXd& p, const HittingMatrix& hm,
                         const Eigen::MatrixXd& variance) {
  if (!validate_graph(g).connected) throw InvalidInput("return times need a connected graph");
  const auto n = static_cast<Eigen::Index>(g.node_count());
  if (p.rows() != n) throw InvalidInput("dimension mismatch between graph and walk matrix");
  ReturnStats out = return_stats(p, hm, variance);
  const double two_m = 2.0 * static_cast<double>(g.edge_count());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double deg = static_cast<double>(g.degree(static_cast<NodeId>(i)));
    out.return_h(i) = n == 1 ? 1.0 : two_m / deg;
    if (std::abs(out.return_h_first_step(i) - out.return_h(i)) > 1e-9 * std::max(1.0, out.return_h(i))) {
      throw NumericalError("return time of node " + std::to_string(i) +
                           " disagrees between 2m/deg and first-step decomposition");
    }
    const double second_moment = out.return_variance(i) + out.return_h_first_step(i) * out.return_h_first_step(i);
    out.return_variance(i) = std::max(0.0, second_moment - out.return_h(i) * out.return_h(i));
  }
  return out;
}

Eigen::MatrixXd variance_matrix(const Eigen::MatrixXd& p, const HittingMatrix& hm) {
  const auto n = p.rows();
  Eigen::MatrixXd variance(n, n);
  for (Eigen::Index j = 0; j < n; ++j) variance.col(j) = variance_hitting(p, hm, static_cast<NodeId>(j));
  return variance;
}

HittingStats hitting_stats(const StaticGraph& g) {
  if (!validate_graph(g).connected) throw InvalidInput("hitting statistics need a connected graph");
  const Eigen::MatrixXd p = walk_matrix(g);
  const HittingMatrix hm = hitting_times(p);
  const Eigen::MatrixXd variance = variance_matrix(p, hm);
  const ReturnStats rs = return_stats(g, p, hm, variance);
  return HittingStats{hm.h, variance, rs.return_h, rs.return_variance};
}

double chebyshev_return_bound(double return_h, double return_variance, double t) {
  if (t <= return_h) return 0.0;
  const double gap = t - return_h;
  return std::max(0.0, 1.0 - return_variance / (gap * gap));
}

double confidence_wait_time(double return_h, double return_variance, double eps) {
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidInput("epsilon must lie in (0, 1]");
  if (return_variance < 0.0) throw InvalidInput("variance must be non-negative");
  return return_h + std::sqrt(return_variance) / std::sqrt(eps);
}

double lost_probability_bound(double return_variance, double p, double t) {
  if (p == 0.0) throw InvalidInput("token cannot be lost; bound undefined");
  if (!(p > 0.0 && p <= 1.0)) throw InvalidInput("loss probability must lie in (0, 1]");
  if (t < 1.0) throw InvalidInput("elapsed steps must be at least 1");
  if (return_variance < 0.0) throw InvalidInput("variance must be non-negative");

  // V 2^{t+1} (1-p)^{t+1} (1 - (1-p)/2) / ((1-p)^{t+1} t^2 + p t^2 2^{t+1}),
  // with numerator and denominator divided by 2^{t+1}.
  const double log_keep = (t + 1.0) * std::log1p(-p);  // -inf when p == 1
  const double numerator = return_variance * 0.5 * (1.0 + p) * std::exp(log_keep);
  const double denominator = t * t * (std::exp(log_keep - (t + 1.0) * std::numbers::ln2) + p);
  return std::max(0.0, 1.0 - numerator / denominator);
}

TuningCapExceeded::TuningCapExceeded(std::size_t cap, double last_bound)
    : Error("no timeout up to " + std::to_string(cap) + " reaches the requested confidence (bound at cap " +
            std::to_string(last_bound) + ")"),
      last_bound_(last_bound) {}

std::size_t tune_timeout_scan(double return_variance, double p, double eps, std::size_t t_cap) {
  if (!(eps > 0.0 && eps < 1.0)) throw InvalidInput("epsilon must lie in (0, 1)");
  double bound = 0.0;
  for (std::size_t t = 1; t <= t_cap; ++t) {
    bound = lost_probability_bound(return_variance, p, static_cast<double>(t));
    if (bound >= 1.0 - eps) return t;
  }
  throw TuningCapExceeded(t_cap, bound);
}

double tune_timeout_closed_form(double return_variance, double return_h, double p, double eps) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidInput("closed form needs a loss probability in (0, 1)");
  if (!(eps > 0.0 && eps < 1.0)) throw InvalidInput("epsilon must lie in (0, 1)");
  if (!(return_variance > 0.0 && return_h > 0.0)) {
    throw InvalidInput("closed form needs positive variance and return time");
  }
  const double numerator = std::log(return_variance / (return_h * return_h)) +
                           std::log((1.0 - p * p) / (2.0 * p)) - std::log(eps) + 2.0;
  return numerator / -std::log1p(-p);
}

double link_failure_survival(const StaticGraph& g, const HittingDistribution& f, int timeout) {
  const double n = static_cast<double>(g.node_count());
  const double m = static_cast<double>(g.edge_count());
  if (m == 0.0) return 0.0;
  const double factor = std::max(0.0, (m - 2.0 * n + 2.0) / m);

  const int half = (timeout + 1) / 2;  // ceil(T_m / 2)
  const std::size_t t = half > 1 ? static_cast<std::size_t>(half - 1) : 0;
  double worst = 1.0;
  for (NodeId i = 0; i < g.node_count(); ++i) {
    if (i == f.target) continue;
    worst = std::min(worst, f(i, t));
  }
  return factor * worst;
}

}  // namespace rwtoken
