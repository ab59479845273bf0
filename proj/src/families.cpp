#include "mfam/families.hpp"

#include "mfam/error.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <algorithm>

namespace mfam {

namespace {

double log1pexp(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

bool is_nonneg_integer(double y) {
  return y >= 0 && std::floor(y) == y;
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

// Predictors are clamped before exponentiation so that a wild MH proposal
// produces a very low likelihood instead of inf/nan arithmetic.
double safe_exp(double eta) { return std::exp(std::clamp(eta, -700.0, 700.0)); }

}  // namespace

Family Family::from_name(std::string_view name) {
  if (name == "bernoulli" || name == "binomial") return Family(FamilyKind::Bernoulli);
  if (name == "poisson") return Family(FamilyKind::Poisson);
  if (name == "gaussian" || name == "normal") return Family(FamilyKind::Gaussian);
  if (name == "negbinomial" || name == "nbinom") return Family(FamilyKind::NegBinomial);
  if (name == "gamma") return Family(FamilyKind::Gamma);
  throw SchemaError("unknown family '" + std::string(name) + "'");
}

std::string_view Family::name() const {
  switch (kind_) {
    case FamilyKind::Bernoulli: return "bernoulli";
    case FamilyKind::Poisson: return "poisson";
    case FamilyKind::Gaussian: return "gaussian";
    case FamilyKind::NegBinomial: return "negbinomial";
    case FamilyKind::Gamma: return "gamma";
  }
  return "unknown";
}

int Family::n_params() const {
  switch (kind_) {
    case FamilyKind::Bernoulli:
    case FamilyKind::Poisson: return 1;
    default: return 2;
  }
}

Link Family::link(int r) const {
  if (r < 0 || r >= n_params()) throw ArgumentError("parameter index out of range");
  switch (kind_) {
    case FamilyKind::Bernoulli: return Link::Logit;
    case FamilyKind::Gaussian: return r == 0 ? Link::Identity : Link::Log;
    default: return Link::Log;
  }
}

bool Family::is_discrete() const {
  return kind_ == FamilyKind::Bernoulli || kind_ == FamilyKind::Poisson ||
         kind_ == FamilyKind::NegBinomial;
}

bool Family::in_support(double y) const {
  if (!std::isfinite(y)) return false;
  switch (kind_) {
    case FamilyKind::Bernoulli: return y == 0.0 || y == 1.0;
    case FamilyKind::Poisson:
    case FamilyKind::NegBinomial: return is_nonneg_integer(y);
    case FamilyKind::Gaussian: return true;
    case FamilyKind::Gamma: return y > 0;
  }
  return false;
}

double inverse_link(Link link, double eta) {
  switch (link) {
    case Link::Identity: return eta;
    case Link::Log: return safe_exp(eta);
    case Link::Logit: return logistic(eta);
  }
  return eta;
}

double link_function(Link link, double theta) {
  switch (link) {
    case Link::Identity: return theta;
    case Link::Log:
      if (!(theta > 0)) throw DomainError("log link needs a positive parameter");
      return std::log(theta);
    case Link::Logit:
      if (!(theta > 0 && theta < 1)) throw DomainError("logit link needs a probability in (0,1)");
      return std::log(theta / (1 - theta));
  }
  return theta;
}

double logpdf(const Family& family, double y, std::span<const double> theta) {
  if (static_cast<int>(theta.size()) < family.n_params())
    throw ArgumentError("logpdf: parameter tuple too short");
  if (!family.in_support(y))
    throw DomainError("logpdf: y outside the support of " + std::string(family.name()));
  switch (family.kind()) {
    case FamilyKind::Bernoulli: {
      const double p = theta[0];
      if (!(p >= 0 && p <= 1)) throw DomainError("bernoulli probability outside [0,1]");
      if (y == 1.0) return p > 0 ? std::log(p) : -INFINITY;
      return p < 1 ? std::log1p(-p) : -INFINITY;
    }
    case FamilyKind::Poisson: {
      const double mu = theta[0];
      if (!(mu > 0)) throw DomainError("poisson mean must be positive");
      return y * std::log(mu) - mu - std::lgamma(y + 1);
    }
    case FamilyKind::Gaussian: {
      const double mu = theta[0], sd = theta[1];
      if (!(sd > 0) || !std::isfinite(mu)) throw DomainError("invalid gaussian parameters");
      const double z = (y - mu) / sd;
      return -kHalfLog2Pi - std::log(sd) - 0.5 * z * z;
    }
    case FamilyKind::NegBinomial: {
      const double mu = theta[0], size = theta[1];
      if (!(mu > 0) || !(size > 0)) throw DomainError("invalid negative binomial parameters");
      return std::lgamma(y + size) - std::lgamma(size) - std::lgamma(y + 1) +
             size * std::log(size) + y * std::log(mu) - (y + size) * std::log(mu + size);
    }
    case FamilyKind::Gamma: {
      const double mu = theta[0], shape = theta[1];
      if (!(mu > 0) || !(shape > 0)) throw DomainError("invalid gamma parameters");
      return shape * std::log(shape) - shape * std::log(mu) - std::lgamma(shape) +
             (shape - 1) * std::log(y) - shape * y / mu;
    }
  }
  return 0.0;
}

double loglik_eta(const Family& family, double y, const ParamTuple& eta) {
  switch (family.kind()) {
    case FamilyKind::Bernoulli:
      return y * eta[0] - log1pexp(eta[0]);
    case FamilyKind::Poisson:
      return y * eta[0] - safe_exp(eta[0]) - std::lgamma(y + 1);
    case FamilyKind::Gaussian: {
      const double log_sd = std::clamp(eta[1], -700.0, 700.0);
      const double z = (y - eta[0]) * std::exp(-log_sd);
      return -kHalfLog2Pi - log_sd - 0.5 * z * z;
    }
    case FamilyKind::NegBinomial: {
      const double mu = safe_exp(eta[0]), size = safe_exp(eta[1]);
      return std::lgamma(y + size) - std::lgamma(size) - std::lgamma(y + 1) +
             size * std::log(size) + y * std::log(mu) - (y + size) * std::log(mu + size);
    }
    case FamilyKind::Gamma: {
      const double shape = safe_exp(eta[1]);
      const double log_mu = std::clamp(eta[0], -700.0, 700.0);
      return shape * std::log(shape) - shape * log_mu - std::lgamma(shape) +
             (shape - 1) * std::log(y) - shape * y * std::exp(-log_mu);
    }
  }
  return 0.0;
}

ParamDerivative param_derivative(const Family& family, double y,
                                 const ParamTuple& eta, int r) {
  using boost::math::digamma;
  using boost::math::trigamma;
  ParamDerivative d{loglik_eta(family, y, eta), 0.0, 0.0};
  switch (family.kind()) {
    case FamilyKind::Bernoulli: {
      const double p = logistic(eta[0]);
      d.score = y - p;
      d.hess = -p * (1 - p);
      break;
    }
    case FamilyKind::Poisson: {
      const double mu = safe_exp(eta[0]);
      d.score = y - mu;
      d.hess = -mu;
      break;
    }
    case FamilyKind::Gaussian: {
      const double inv_var = std::exp(-2 * std::clamp(eta[1], -350.0, 350.0));
      const double res = y - eta[0];
      if (r == 0) {
        d.score = res * inv_var;
        d.hess = -inv_var;
      } else {
        d.score = -1 + res * res * inv_var;
        d.hess = -2 * res * res * inv_var;
      }
      break;
    }
    case FamilyKind::NegBinomial: {
      const double mu = safe_exp(eta[0]), size = safe_exp(eta[1]);
      const double ms = mu + size;
      if (r == 0) {
        d.score = size * (y - mu) / ms;
        d.hess = -(y + size) * mu * size / (ms * ms);
      } else {
        const double dl = digamma(y + size) - digamma(size) + std::log(size) + 1 -
                          std::log(ms) - (y + size) / ms;
        const double d2l = trigamma(y + size) - trigamma(size) + 1 / size - 2 / ms +
                           (y + size) / (ms * ms);
        d.score = size * dl;
        d.hess = size * dl + size * size * d2l;
      }
      break;
    }
    case FamilyKind::Gamma: {
      const double shape = safe_exp(eta[1]);
      const double y_over_mu = y * std::exp(-std::clamp(eta[0], -700.0, 700.0));
      if (r == 0) {
        d.score = shape * (y_over_mu - 1);
        d.hess = -shape * y_over_mu;
      } else {
        const double dl = std::log(shape) + 1 - eta[0] - digamma(shape) + std::log(y) - y_over_mu;
        const double d2l = 1 / shape - trigamma(shape);
        d.score = shape * dl;
        d.hess = shape * dl + shape * shape * d2l;
      }
      break;
    }
  }
  return d;
}

PredictorDerivatives predictor_derivatives(const Family& family, double y,
                                           std::span<const double> eta) {
  const int R = family.n_params();
  if (static_cast<int>(eta.size()) < R) throw ArgumentError("predictor tuple too short");
  ParamTuple e{0.0, 0.0};
  for (int r = 0; r < R; ++r) {
    if (!std::isfinite(eta[r])) throw DomainError("non-finite additive predictor");
    e[r] = eta[r];
  }
  ParamTuple theta{0.0, 0.0};
  for (int r = 0; r < R; ++r) theta[r] = inverse_link(family.link(r), e[r]);
  PredictorDerivatives out;
  out.loglik = logpdf(family, y, std::span<const double>(theta.data(), R));
  for (int r = 0; r < R; ++r) {
    const auto d = param_derivative(family, y, e, r);
    out.score[r] = d.score;
    out.hess[r] = d.hess;
  }
  return out;
}

double sample_family(const Family& family, const ParamTuple& theta,
                     std::mt19937_64& rng) {
  switch (family.kind()) {
    case FamilyKind::Bernoulli:
      return std::bernoulli_distribution(theta[0])(rng) ? 1.0 : 0.0;
    case FamilyKind::Poisson:
      return static_cast<double>(std::poisson_distribution<long>(theta[0])(rng));
    case FamilyKind::Gaussian:
      return std::normal_distribution<double>(theta[0], theta[1])(rng);
    case FamilyKind::NegBinomial: {
      // Gamma-Poisson mixture: lambda ~ Ga(size, mean/size).
      const double lambda =
          std::gamma_distribution<double>(theta[1], theta[0] / theta[1])(rng);
      return static_cast<double>(std::poisson_distribution<long>(lambda)(rng));
    }
    case FamilyKind::Gamma:
      return std::gamma_distribution<double>(theta[1], theta[0] / theta[1])(rng);
  }
  return 0.0;
}

double moment_start(const Family& f, int r, std::span<const double> y) {
  if (y.empty()) throw ArgumentError("moment_start: no observations");
  const double n = static_cast<double>(y.size());
  double mean = 0.0, var = 0.0;
  for (double v : y) mean += v / n;
  for (double v : y) var += (v - mean) * (v - mean);
  var = n > 1 ? var / (n - 1) : 1.0;
  switch (f.kind()) {
    case FamilyKind::Bernoulli: {
      const double p = std::clamp(mean, 0.01, 0.99);
      return std::log(p / (1 - p));
    }
    case FamilyKind::Poisson: return std::log(std::max(mean, 1e-3));
    case FamilyKind::Gaussian: return r == 0 ? mean : std::log(std::sqrt(std::max(var, 1e-12)));
    case FamilyKind::NegBinomial:
      if (r == 0) return std::log(std::max(mean, 1e-3));
      return std::log(var > mean * 1.01 ? mean * mean / (var - mean) : 100.0);
    case FamilyKind::Gamma:
      if (r == 0) return std::log(std::max(mean, 1e-12));
      return std::log(std::max(mean * mean / std::max(var, 1e-12), 1e-3));
  }
  return 0.0;
}

}  // namespace mfam
