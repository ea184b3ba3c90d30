#pragma once

#include <span>
#include <vector>

#include "psam/autodiff.hpp"

namespace psam {

// Diagonal Gaussian over the latent code, parameterized by log-variance.
struct GaussianDiag {
  std::vector<double> mu;
  std::vector<double> log_var;

  int dim() const { return static_cast<int>(mu.size()); }
  // Throws DimensionError on length mismatch / empty, NumericError on non-finite entries.
  void validate() const;

  friend bool operator==(const GaussianDiag&, const GaussianDiag&) = default;
};

// z = mu + exp(log_var / 2) * noise
std::vector<double> sample_reparam(const GaussianDiag& q, std::span<const double> noise);

// KL(q || p) in closed form.
double kl_diag(const GaussianDiag& q, const GaussianDiag& p);

// Tape versions. mu / log_var are rank-1 variables of equal length.
ad::Var sample_reparam(ad::Var mu, ad::Var log_var, std::span<const double> noise);
ad::Var kl_diag(ad::Var mu_q, ad::Var log_var_q, ad::Var mu_p, ad::Var log_var_p);

}  // namespace psam
