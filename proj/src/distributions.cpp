#include "psam/distributions.hpp"

#include <cmath>
#include <string>

#include "psam/errors.hpp"

namespace psam {

namespace {

void require_len(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw DimensionError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + " contains a non-finite value");
}

double kl_terms(std::span<const double> mq, std::span<const double> lq, std::span<const double> mp,
                std::span<const double> lp) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    const double dm = mq[i] - mp[i];
    acc += std::exp(lq[i] - lp[i]) + dm * dm * std::exp(-lp[i]) - 1.0 + lp[i] - lq[i];
  }
  return 0.5 * acc;
}

}  // namespace

void GaussianDiag::validate() const {
  if (mu.empty()) throw DimensionError("GaussianDiag: latent dimension must be >= 1");
  require_len(mu.size(), log_var.size(), "GaussianDiag mu/log_var");
  require_finite(mu, "GaussianDiag mu");
  require_finite(log_var, "GaussianDiag log_var");
}

std::vector<double> sample_reparam(const GaussianDiag& q, std::span<const double> noise) {
  require_len(noise.size(), q.mu.size(), "sample_reparam noise");
  require_len(q.log_var.size(), q.mu.size(), "sample_reparam mu/log_var");
  std::vector<double> z(q.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = q.mu[i] + std::exp(0.5 * q.log_var[i]) * noise[i];
  return z;
}

double kl_diag(const GaussianDiag& q, const GaussianDiag& p) {
  require_len(q.mu.size(), p.mu.size(), "kl_diag");
  q.validate();
  p.validate();
  return kl_terms(q.mu, q.log_var, p.mu, p.log_var);
}

ad::Var sample_reparam(ad::Var mu, ad::Var log_var, std::span<const double> noise) {
  const Tensor& m = mu.value();
  const Tensor& lv = log_var.value();
  require_len(m.size(), lv.size(), "sample_reparam mu/log_var");
  require_len(noise.size(), m.size(), "sample_reparam noise");
  Tensor eps(m.shape(), std::vector<double>(noise.begin(), noise.end()));
  Tensor z(m.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = m[i] + std::exp(0.5 * lv[i]) * eps[i];
  return mu.tape->record(std::move(z), {mu, log_var}, [mu, log_var, eps](ad::Tape& t, const Tensor& dz) {
    ad::accumulate(t, mu, dz);
    if (!t.requires_grad(log_var)) return;
    const Tensor& lv = t.value(log_var);
    Tensor& g = t.grad(log_var);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dz[i] * 0.5 * std::exp(0.5 * lv[i]) * eps[i];
  });
}

ad::Var kl_diag(ad::Var mu_q, ad::Var log_var_q, ad::Var mu_p, ad::Var log_var_p) {
  const Tensor& mq = mu_q.value();
  const Tensor& lq = log_var_q.value();
  const Tensor& mp = mu_p.value();
  const Tensor& lp = log_var_p.value();
  require_len(mq.size(), lq.size(), "kl_diag q");
  require_len(mp.size(), lp.size(), "kl_diag p");
  require_len(mq.size(), mp.size(), "kl_diag");
  for (const Tensor* t : {&mq, &lq, &mp, &lp}) require_finite(t->values(), "kl_diag input");
  Tensor out({1});
  out[0] = kl_terms(mq.values(), lq.values(), mp.values(), lp.values());
  return mu_q.tape->record(std::move(out), {mu_q, log_var_q, mu_p, log_var_p},
                           [=](ad::Tape& t, const Tensor& dout) {
                             const double g = dout[0];
                             const Tensor& mq = t.value(mu_q);
                             const Tensor& lq = t.value(log_var_q);
                             const Tensor& mp = t.value(mu_p);
                             const Tensor& lp = t.value(log_var_p);
                             for (std::size_t i = 0; i < mq.size(); ++i) {
                               const double dm = mq[i] - mp[i];
                               const double inv_vp = std::exp(-lp[i]);
                               const double ratio = std::exp(lq[i] - lp[i]);
                               if (t.requires_grad(mu_q)) t.grad(mu_q)[i] += g * dm * inv_vp;
                               if (t.requires_grad(mu_p)) t.grad(mu_p)[i] -= g * dm * inv_vp;
                               if (t.requires_grad(log_var_q)) t.grad(log_var_q)[i] += g * 0.5 * (ratio - 1.0);
                               if (t.requires_grad(log_var_p))
                                 t.grad(log_var_p)[i] += g * 0.5 * (1.0 - ratio - dm * dm * inv_vp);
                             }
                           });
}

}  // namespace psam
