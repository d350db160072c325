#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "evifed/errors.hpp"
#include "evifed/graph.hpp"
#include "evifed/special_functions.hpp"
#include "evifed/tensor.hpp"

namespace evifed {

/// Subjective-logic view of one prediction: evidence e, Dirichlet parameters
/// alpha = e + 1, strength S = sum(alpha), belief masses b = e/S and the
/// leftover uncertainty u = 1 - sum(b) (= J/S).
struct EvidentialOutput {
  std::vector<double> evidence;
  std::vector<double> alpha;
  std::vector<double> belief;
  double strength = 0.0;
  double uncertainty = 0.0;

  std::size_t classes() const { return evidence.size(); }

  std::size_t predicted() const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < belief.size(); ++j) {
      if (belief[j] > belief[best]) best = j;
    }
    return best;
  }
};

inline EvidentialOutput evidential_output(const std::vector<double>& logits,
                                          double ceiling = kEvidenceCeiling) {
  if (logits.empty()) throw value_error("evidential_output: empty logits");
  for (double v : logits) {
    if (!std::isfinite(v)) {
      throw value_error("evidential_output: non-finite logit");
    }
  }
  EvidentialOutput out;
  const std::size_t j = logits.size();
  out.evidence.resize(j);
  out.alpha.resize(j);
  out.belief.resize(j);
  for (std::size_t i = 0; i < j; ++i) {
    out.evidence[i] = std::exp(std::min(logits[i], ceiling));
    out.alpha[i] = out.evidence[i] + 1.0;
    out.strength += out.alpha[i];
  }
  double belief_total = 0.0;
  for (std::size_t i = 0; i < j; ++i) {
    out.belief[i] = out.evidence[i] / out.strength;
    belief_total += out.belief[i];
  }
  out.uncertainty = 1.0 - belief_total;
  return out;
}

inline EvidentialOutput evidential_output(const Tensor& logits,
                                          double ceiling = kEvidenceCeiling) {
  return evidential_output(logits.values(), ceiling);
}

namespace detail {

inline void require_one_hot(const std::vector<double>& y, std::size_t n,
                            const char* fn) {
  if (y.size() != n) {
    throw value_error(std::string(fn) + ": label length " + std::to_string(y.size()) +
                      " vs " + std::to_string(n) + " classes");
  }
  std::size_t ones = 0;
  for (double v : y) {
    if (v == 1.0) {
      ++ones;
    } else if (v != 0.0) {
      throw value_error(std::string(fn) + ": label is not one-hot");
    }
  }
  if (ones != 1) throw value_error(std::string(fn) + ": label is not one-hot");
}

inline void require_alpha_at_least(const Tensor& alpha, double lo, const char* fn) {
  for (double v : alpha.values()) {
    if (!(v >= lo)) {
      throw std::domain_error(std::string(fn) + ": alpha entry " + std::to_string(v) +
                              " below " + std::to_string(lo));
    }
  }
}

}  // namespace detail

/// alpha = exp(clamped logits) + 1, on the graph.
inline Tensor alpha_from_logits(Graph& g, const Tensor& logits,
                                double ceiling = kEvidenceCeiling) {
  return g.add_scalar(g.exp_activation(logits, ceiling), 1.0);
}

/// Expected cross-entropy under Dir(alpha): sum_j y_j (psi(S) - psi(alpha_j)).
inline Tensor unc_loss(Graph& g, const Tensor& alpha, const std::vector<double>& y) {
  detail::require_one_hot(y, alpha.size(), "unc_loss");
  detail::require_alpha_at_least(alpha, 1.0, "unc_loss");
  Tensor psi_strength = g.digamma(g.sum(alpha));
  Tensor psi_true = g.weighted_sum(g.digamma(alpha), y);
  return g.sub(psi_strength, psi_true);
}

/// The correct class's parameter pinned to one, everything else untouched:
/// alpha_hat = y + (1 - y) ⊙ alpha.
inline Tensor alpha_hat(Graph& g, const Tensor& alpha, const std::vector<double>& y) {
  detail::require_one_hot(y, alpha.size(), "alpha_hat");
  std::vector<double> keep(y.size()), add(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    keep[i] = 1.0 - y[i];
    add[i] = y[i];
  }
  return g.add_const(g.mul_const(alpha, std::move(keep)), std::move(add));
}

/// KL[Dir(alpha_hat) || Dir(1)]; zero iff alpha_hat is all ones.
inline Tensor kl_regularizer(Graph& g, const Tensor& alpha_hat_t) {
  detail::require_alpha_at_least(alpha_hat_t, 1.0, "kl_regularizer");
  const std::size_t j = alpha_hat_t.size();
  Tensor total = g.sum(alpha_hat_t);
  Tensor log_gamma_total = g.lgamma(total);
  Tensor log_gamma_terms = g.sum(g.lgamma(alpha_hat_t));
  Tensor digamma_gap = g.sub_broadcast(g.digamma(alpha_hat_t), g.digamma(total));
  Tensor weighted = g.sum(g.mul(g.add_scalar(alpha_hat_t, -1.0), digamma_gap));
  Tensor kl = g.add(g.sub(log_gamma_total, log_gamma_terms), weighted);
  return g.add_scalar(kl, -lgamma_pos(static_cast<double>(j)));
}

struct LossConfig {
  double lambda = 0.1;
  std::size_t lambda_ramp = 0;  // 0 disables the ramp

  void validate() const {
    if (lambda < 0.0) {
      throw config_error("loss: lambda must be nonnegative, got " +
                         std::to_string(lambda));
    }
  }

  /// Linear ramp 0 -> lambda over the first `lambda_ramp` epochs.
  double effective_lambda(std::size_t epoch) const {
    if (lambda_ramp == 0) return lambda;
    const double f = static_cast<double>(epoch) / static_cast<double>(lambda_ramp);
    return lambda * std::min(1.0, f);
  }
};

/// unc_loss + lambda_eff * KL(alpha_hat). With lambda_eff == 0 this is
/// unc_loss exactly (same tensor, not a zero-added copy).
inline Tensor total_loss(Graph& g, const Tensor& alpha, const std::vector<double>& y,
                         const LossConfig& cfg, std::size_t epoch = 0) {
  cfg.validate();
  Tensor unc = unc_loss(g, alpha, y);
  const double lam = cfg.effective_lambda(epoch);
  if (lam == 0.0) return unc;
  Tensor kl = kl_regularizer(g, alpha_hat(g, alpha, y));
  return g.add(unc, g.scale(kl, lam));
}

}  // namespace evifed
