#pragma once

#include "psam/autodiff.hpp"
#include "psam/distributions.hpp"
#include "psam/grid.hpp"

namespace psam {

inline constexpr double kDefaultBeta = 10.0;
inline constexpr double kDiceEps = 1e-6;
inline constexpr double kProbClip = 1e-7;

struct LossOptions {
  double dice_eps = kDiceEps;
  double prob_clip = kProbClip;
  // Negative-control hook for gradient checking: scales the Dice gradient by 1.5.
  bool corrupt_dice_gradient = false;
};

// recon = bce + dice, total = recon + beta * kl.
struct LossBreakdown {
  double bce = 0.0;
  double dice = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double beta = 0.0;
};

double bce_loss(const BinaryMask& y, const ProbMask& yhat, double clip = kProbClip);
double dice_loss(const BinaryMask& y, const ProbMask& yhat, double eps = kDiceEps);

ProbMask sigmoid(const Logits& logits);

LossBreakdown total_loss(const BinaryMask& y, const Logits& logits, const GaussianDiag& q, const GaussianDiag& p,
                         double beta, const LossOptions& opts = {});

// Differentiable form used by training. `logits` is an {H, W} variable.
struct LossTerms {
  ad::Var total;
  LossBreakdown values;
};

LossTerms total_loss(ad::Var logits, const BinaryMask& y, ad::Var mu_q, ad::Var log_var_q, ad::Var mu_p,
                     ad::Var log_var_p, double beta, const LossOptions& opts = {});

// Reconstruction only (dropout baseline training has no latent term).
LossTerms recon_loss(ad::Var logits, const BinaryMask& y, const LossOptions& opts = {});

}  // namespace psam
