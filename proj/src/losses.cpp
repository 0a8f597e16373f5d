#include "jemb/losses.hpp"

#include <cmath>
#include <string>

#include "jemb/error.hpp"
#include "jemb/ops.hpp"

namespace jemb {

void LossWeights::validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss weights: tau must be positive");
    if (!(lambda_con >= 0.0) || !(lambda_anti >= 0.0) || !(lambda_kl >= 0.0)) {
        throw ConfigError("loss weights: lambdas must be non-negative");
    }
}

namespace {

void require_pair(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": expected two (B,d) batches, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
}

}  // namespace

Tensor contrastive_loss(const Tensor& za, const Tensor& zb, double tau, bool include_positive_in_denominator) {
    require_pair("contrastive_loss", za, zb);
    if (!(tau > 0.0)) throw DomainError("contrastive_loss: tau must be positive");
    const std::size_t batch = za.dim(0);
    if (batch < 2) throw ShapeError("contrastive_loss: needs at least 2 rows, got " + std::to_string(batch));

    const Tensor ua = ops::l2_normalize_rows(za);
    const Tensor ub = ops::l2_normalize_rows(zb);
    const Tensor logits = ops::scale(ops::matmul(ua, ops::transpose(ub)), 1.0 / tau);
    const Tensor positives = ops::scale(ops::batched_dot(ua, ub), 1.0 / tau);
    std::vector<std::uint8_t> mask(batch * batch, 1);
    if (!include_positive_in_denominator) {
        for (std::size_t i = 0; i < batch; ++i) mask[i * batch + i] = 0;
    }
    const Tensor denominators = ops::logsumexp_rows(logits, mask);
    return ops::sum(ops::sub(denominators, positives));
}

Tensor anticontrastive_loss(const Tensor& za, const Tensor& zs) {
    require_pair("anticontrastive_loss", za, zs);
    const std::size_t batch = za.dim(0);
    const Tensor cosines = ops::batched_dot(ops::l2_normalize_rows(za), ops::l2_normalize_rows(zs));
    return ops::scale(ops::sum(ops::square(cosines)), 1.0 / (2.0 * static_cast<double>(batch)));
}

Tensor kl_loss(const Tensor& mu, const Tensor& logvar) {
    require_pair("kl_loss", mu, logvar);
    const double count = static_cast<double>(mu.numel());
    const Tensor terms = ops::sub(ops::add(ops::square(mu), ops::exp(logvar)), logvar);
    return ops::scale(ops::add_scalar(ops::sum(terms), -count), 1.0 / (2.0 * count));
}

Tensor recon_loss(const Tensor& x, const Tensor& xhat) {
    if (x.shape() != xhat.shape() || x.rank() == 0) {
        throw ShapeError("recon_loss: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(xhat.shape()));
    }
    const double batch = static_cast<double>(x.dim(0));
    return ops::scale(ops::sum(ops::square(ops::sub(x, xhat))), 1.0 / (2.0 * batch));
}

LossReport total_loss(double rec, double con, double anti, double kl, const LossWeights& weights) {
    const std::pair<const char*, double> terms[] = {{"rec", rec}, {"con", con}, {"anti", anti}, {"kl", kl}};
    for (const auto& [name, value] : terms) {
        if (!std::isfinite(value)) throw DomainError(std::string("total_loss: non-finite ") + name + " term");
    }
    LossReport r;
    r.rec = rec;
    r.con = con;
    r.anti = anti;
    r.kl = kl;
    r.total = rec + weights.lambda_con * con + weights.lambda_anti * anti + weights.lambda_kl * kl;
    return r;
}

}  // namespace jemb
