#pragma once

#include <array>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace mfam {

enum class FamilyKind { Bernoulli, Poisson, Gaussian, NegBinomial, Gamma };

enum class Link { Identity, Log, Logit };

// Pointwise parametric family in mean-first parameterization:
//   gaussian    (mean, sd)        links (identity, log)
//   bernoulli   (probability)     link  logit
//   poisson     (mean)            link  log
//   negbinomial (mean, size)      links (log, log); Var = mu + mu^2 / size
//   gamma       (mean, shape)     links (log, log); Var = mu^2 / shape
class Family {
 public:
  explicit Family(FamilyKind kind = FamilyKind::Gaussian) : kind_(kind) {}

  static Family from_name(std::string_view name);

  FamilyKind kind() const { return kind_; }
  std::string_view name() const;
  int n_params() const;
  Link link(int r) const;

  bool is_discrete() const;
  bool in_support(double y) const;

  friend bool operator==(const Family&, const Family&) = default;

 private:
  FamilyKind kind_;
};

inline constexpr int kMaxParams = 2;
using ParamTuple = std::array<double, kMaxParams>;

double inverse_link(Link link, double eta);
double link_function(Link link, double theta);

// Log density / mass. Throws DomainError for out-of-support y or an
// invalid parameter tuple.
double logpdf(const Family& family, double y, std::span<const double> theta);

struct PredictorDerivatives {
  double loglik = 0.0;
  ParamTuple score{0.0, 0.0};  // d loglik / d eta_r
  ParamTuple hess{0.0, 0.0};   // d^2 loglik / d eta_r^2
};

// Log-likelihood and per-parameter score/Hessian with respect to the
// additive predictors, theta_r = h_r(eta_r).
PredictorDerivatives predictor_derivatives(const Family& family, double y,
                                           std::span<const double> eta);

// Single-parameter variant used by the samplers; no support validation.
struct ParamDerivative {
  double loglik;
  double score;
  double hess;
};
ParamDerivative param_derivative(const Family& family, double y,
                                 const ParamTuple& eta, int r);

// Log-likelihood at predictor values, no support validation.
double loglik_eta(const Family& family, double y, const ParamTuple& eta);

// Draws one observation given distributional parameters.
double sample_family(const Family& family, const ParamTuple& theta,
                     std::mt19937_64& rng);

// Moment-based starting value of predictor r from the raw responses.
double moment_start(const Family& family, int r, std::span<const double> y);

}  // namespace mfam
