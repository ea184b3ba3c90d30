#include "psam/losses.hpp"

#include <algorithm>
#include <cmath>

#include "psam/errors.hpp"

namespace psam {

namespace {

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_match(const BinaryMask& y, std::size_t n, int h, int w, const char* what) {
  if (y.height != h || y.width != w || y.values.size() != n)
    throw DimensionError(std::string(what) + ": mask " + std::to_string(y.height) + "x" + std::to_string(y.width) +
                         " vs prediction " + std::to_string(h) + "x" + std::to_string(w));
}

double bce_from_probs(const std::vector<std::uint8_t>& y, const std::vector<double>& p, double clip) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], clip, 1.0 - clip);
    acc += y[i] ? std::log(q) : std::log(1.0 - q);
  }
  return -acc / static_cast<double>(p.size());
}

struct DiceSums {
  double overlap = 0.0;  // sum y * yhat
  double y = 0.0;
  double yhat = 0.0;
};

DiceSums dice_sums(const std::vector<std::uint8_t>& y, const std::vector<double>& p) {
  DiceSums s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.overlap += y[i] * p[i];
    s.y += y[i];
    s.yhat += p[i];
  }
  return s;
}

double dice_from_sums(const DiceSums& s, double eps) { return 1.0 - (2.0 * s.overlap + eps) / (s.y + s.yhat + eps); }

std::vector<double> probs_of(const Tensor& logits) {
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = logistic(logits[i]);
  return p;
}

ad::Var bce_op(ad::Var logits, const BinaryMask& y, double clip, double& value) {
  std::vector<double> p = probs_of(logits.value());
  value = bce_from_probs(y.values, p, clip);
  Tensor out({1});
  out[0] = value;
  return logits.tape->record(std::move(out), {logits},
                             [logits, yv = y.values, p = std::move(p), clip](ad::Tape& t, const Tensor& dout) {
                               if (!t.requires_grad(logits)) return;
                               Tensor& g = t.grad(logits);
                               const double scale = dout[0] / static_cast<double>(p.size());
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                 // Clipped probabilities carry no gradient.
                                 if (p[i] < clip || p[i] > 1.0 - clip) continue;
                                 // d/dl of -[y log s + (1-y) log(1-s)] = s - y
                                 g[i] += scale * (p[i] - yv[i]);
                               }
                             });
}

ad::Var dice_op(ad::Var logits, const BinaryMask& y, double eps, bool corrupt, double& value) {
  std::vector<double> p = probs_of(logits.value());
  const DiceSums s = dice_sums(y.values, p);
  value = dice_from_sums(s, eps);
  Tensor out({1});
  out[0] = value;
  return logits.tape->record(
      std::move(out), {logits}, [logits, yv = y.values, p = std::move(p), s, eps, corrupt](ad::Tape& t, const Tensor& dout) {
        if (!t.requires_grad(logits)) return;
        Tensor& g = t.grad(logits);
        const double num = 2.0 * s.overlap + eps;
        const double den = s.y + s.yhat + eps;
        const double k = corrupt ? 1.5 : 1.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double d_dp = -(2.0 * yv[i] * den - num) / (den * den);
          g[i] += k * dout[0] * d_dp * p[i] * (1.0 - p[i]);
        }
      });
}

}  // namespace

ProbMask sigmoid(const Logits& logits) {
  ProbMask p(logits.height, logits.width);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = logistic(logits.values[i]);
  return p;
}

double bce_loss(const BinaryMask& y, const ProbMask& yhat, double clip) {
  require_match(y, yhat.values.size(), yhat.height, yhat.width, "bce_loss");
  if (yhat.values.empty()) throw DimensionError("bce_loss: empty mask");
  return bce_from_probs(y.values, yhat.values, clip);
}

double dice_loss(const BinaryMask& y, const ProbMask& yhat, double eps) {
  require_match(y, yhat.values.size(), yhat.height, yhat.width, "dice_loss");
  return dice_from_sums(dice_sums(y.values, yhat.values), eps);
}

LossBreakdown total_loss(const BinaryMask& y, const Logits& logits, const GaussianDiag& q, const GaussianDiag& p,
                         double beta, const LossOptions& opts) {
  if (!(beta >= 0.0)) throw ValidationError("beta must be >= 0");
  const ProbMask probs = sigmoid(logits);
  LossBreakdown out;
  out.beta = beta;
  out.bce = bce_loss(y, probs, opts.prob_clip);
  out.dice = dice_loss(y, probs, opts.dice_eps);
  out.recon = out.bce + out.dice;
  out.kl = kl_diag(q, p);
  out.total = out.recon + beta * out.kl;
  return out;
}

LossTerms recon_loss(ad::Var logits, const BinaryMask& y, const LossOptions& opts) {
  const Tensor& l = logits.value();
  if (l.rank() != 2) throw DimensionError("recon_loss: logits must be {H, W}");
  require_match(y, l.size(), l.dim(0), l.dim(1), "recon_loss");
  LossTerms terms;
  ad::Var bce = bce_op(logits, y, opts.prob_clip, terms.values.bce);
  ad::Var dice = dice_op(logits, y, opts.dice_eps, opts.corrupt_dice_gradient, terms.values.dice);
  terms.total = ad::add(bce, dice);
  terms.values.recon = terms.values.bce + terms.values.dice;
  terms.values.total = terms.values.recon;
  return terms;
}

LossTerms total_loss(ad::Var logits, const BinaryMask& y, ad::Var mu_q, ad::Var log_var_q, ad::Var mu_p,
                     ad::Var log_var_p, double beta, const LossOptions& opts) {
  if (!(beta >= 0.0)) throw ValidationError("beta must be >= 0");
  LossTerms terms = recon_loss(logits, y, opts);
  ad::Var kl = kl_diag(mu_q, log_var_q, mu_p, log_var_p);
  terms.values.kl = kl.value()[0];
  terms.values.beta = beta;
  terms.values.total = terms.values.recon + beta * terms.values.kl;
  terms.total = ad::add(terms.total, ad::scale(kl, beta));
  return terms;
}

}  // namespace psam
