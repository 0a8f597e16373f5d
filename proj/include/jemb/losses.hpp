#pragma once

#include "jemb/tensor.hpp"

namespace jemb {

/// Weights of the auxiliary terms in the total objective. A zero weight
/// switches the term off.
struct LossWeights {
    double lambda_con = 0.02;
    double lambda_anti = 0.0005;
    double lambda_kl = 5e-5;
    double tau = 0.1;
    /// Standard InfoNCE keeps the positive pair in the denominator; the default
    /// sums over the other batch members only.
    bool include_positive_in_denominator = false;

    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

/// Unweighted component values plus the weighted total.
struct LossReport {
    double total = 0.0;
    double rec = 0.0;
    double con = 0.0;
    double anti = 0.0;
    double kl = 0.0;
};

/// Batched cross-modal contrastive loss between structure codes of the two
/// modalities. Rows are L2-normalized first, then
///   -sum_i [ za_i.zb_i / tau - log sum_{j != i} exp(za_i.zb_j / tau) ].
/// Requires B >= 2 and tau > 0.
Tensor contrastive_loss(const Tensor& za, const Tensor& zb, double tau, bool include_positive_in_denominator = false);

/// (1/(2B)) sum_i cos^2(za_i, zs_i). Throws DomainError on zero rows.
Tensor anticontrastive_loss(const Tensor& za, const Tensor& zs);

/// (1/(2Bd)) sum (mu^2 + exp(logvar) - logvar - 1): KL to the unit normal,
/// averaged over batch and latent dimensions.
Tensor kl_loss(const Tensor& mu, const Tensor& logvar);

/// (1/(2B)) sum over batch and pixels of (x - xhat)^2.
Tensor recon_loss(const Tensor& x, const Tensor& xhat);

/// Weighted total from already evaluated components. Throws on a non-finite term.
LossReport total_loss(double rec, double con, double anti, double kl, const LossWeights& weights);

}  // namespace jemb
