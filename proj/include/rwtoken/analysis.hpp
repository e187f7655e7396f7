#pragma once

#include <Eigen/Dense>

#include <vector>

#include "rwtoken/common.hpp"
#include "rwtoken/graph.hpp"

namespace rwtoken {

/// Expected hitting times h(i, j) of a row-stochastic walk matrix.
/// Entries whose target is not reached almost surely hold +inf and are
/// flagged in `reachable`.
struct HittingMatrix {
  Eigen::MatrixXd h;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> reachable;
  double max_residual = 0.0;

  bool all_reachable() const { return reachable.all(); }
};

/// Hitting-time statistics of a walk: means, variances and first-return moments.
struct HittingStats {
  Eigen::MatrixXd h;         // h(i, j), h(j, j) = 0
  Eigen::MatrixXd variance;  // V[H_ij], V(j, j) = 0
  Eigen::VectorXd return_h;  // h_ii as a return time
  Eigen::VectorXd return_variance;
};

/// P[H_ij <= t] for every source i, t = 0..t_max, one fixed target j.
struct HittingDistribution {
  NodeId target = 0;
  Eigen::MatrixXd cdf;  // rows: t, columns: source

  std::size_t t_max() const { return static_cast<std::size_t>(cdf.rows()) - 1; }
  double operator()(NodeId source, std::size_t t) const;
};

struct ReturnStats {
  Eigen::VectorXd return_h;          // 2m / deg(i)
  Eigen::VectorXd return_h_first_step;  // 1 + sum_k P_ik h_ki
  Eigen::VectorXd return_variance;
};

/// Solves h_ij = 1 + sum_k P_ik h_kj, h_jj = 0 column by column (dense LU).
HittingMatrix hitting_times(const Eigen::MatrixXd& p);

/// Hitting times on a Markov-evolving graph through the averaged chain.
HittingMatrix dynamic_hitting_times(const DynamicGraphProcess& process);

/// Iterates the walk with `target` absorbing.
HittingDistribution hitting_distribution(const Eigen::MatrixXd& p, NodeId target,
                                         std::size_t t_max);

/// P[H_ii <= t], t = 0..t_max, for the first return to `node` (at least one step).
Eigen::VectorXd return_distribution(const Eigen::MatrixXd& p, NodeId node, std::size_t t_max);

/// V[H_.j] from M(j) V = v(j); throws NumericalError if the target is not
/// reached almost surely from every source.
Eigen::VectorXd variance_hitting(const Eigen::MatrixXd& p, const HittingMatrix& h, NodeId target);

/// Return times and their variances. Throws InvalidInput on a disconnected
/// graph and NumericalError if the two return-time routes disagree by > 1e-9.
ReturnStats return_stats(const StaticGraph& g, const Eigen::MatrixXd& p, const HittingMatrix& h,
                         const Eigen::MatrixXd& variance);

/// First-step return times and variances of any walk matrix whose targets are
/// all reached almost surely (used for averaged dynamic chains).
ReturnStats return_stats(const Eigen::MatrixXd& p, const HittingMatrix& h,
                         const Eigen::MatrixXd& variance);

/// Variance columns for every target.
Eigen::MatrixXd variance_matrix(const Eigen::MatrixXd& p, const HittingMatrix& h);

/// Everything above for the simple walk on a connected static graph.
HittingStats hitting_stats(const StaticGraph& g);

/// Lower bound on P[H_ii < t] from Chebyshev: max(0, 1 - V / (t - h)^2); 0 when t <= h.
double chebyshev_return_bound(double return_h, double return_variance, double t);

/// t = h + sigma / sqrt(eps) with P[H_ii < t] >= 1 - eps.
double confidence_wait_time(double return_h, double return_variance, double eps);

/// Lower bound on P[token lost | node unseen for t steps] under per-step loss p.
/// Throws InvalidInput for p == 0 (the token cannot be lost).
double lost_probability_bound(double return_variance, double p, double t);

/// Raised when no t <= cap reaches the requested confidence.
class TuningCapExceeded : public Error {
 public:
  TuningCapExceeded(std::size_t cap, double last_bound);
  double last_bound() const { return last_bound_; }

 private:
  double last_bound_;
};

/// Smallest integer t in 1..t_cap with lost_probability_bound >= 1 - eps.
std::size_t tune_timeout_scan(double return_variance, double p, double eps, std::size_t t_cap);

/// Closed-form timeout (natural logarithm). Conservative; the scan is authoritative.
double tune_timeout_closed_form(double return_variance, double return_h, double p, double eps);

/// max(0, (m - 2n + 2) / m) * min_i F_i(ceil(T_m / 2) - 1), where F is the
/// hitting distribution to the orphaned node.
double link_failure_survival(const StaticGraph& g, const HittingDistribution& f, int timeout);

}  // namespace rwtoken
