#pragma once

// Training objectives: bilateral-weighted field smoothness, L1
// reconstruction over both composition flows, the conditional adversarial
// pair, and the weighted total.

#include <array>
#include <optional>
#include <utility>

#include <torch/torch.h>

#include "commreg/core.hpp"

namespace commreg {

struct SmoothnessConfig {
  /// Bilateral sharpness; weights are exp(-alpha * |I(u) - I(v)|).
  double alpha = 1.0;
  bool bilateral_enabled = true;
};

struct LossWeights {
  double lambda_R = 100.0;
  double lambda_S = 200.0;
};

/// Clamp used before every log in the adversarial terms.
inline constexpr double kLogEpsilon = 1e-7;

/// Offsets of the 3x3 neighborhood, center excluded.
inline constexpr std::array<std::pair<int, int>, 8> kNeighborOffsets = {
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

/// Mean over pixels of sum_{u in N(v)} B(u,v) * |field(u) - field(v)|_2.
///
/// `field` is [N,2,H,W]; `deformed` is [N,C,H,W] and only feeds the
/// bilateral weights, which are computed from a detached copy so no gradient
/// ever reaches the image. Neighborhoods are clipped at the border.
inline torch::Tensor smoothness_loss(const torch::Tensor& field, const torch::Tensor& deformed,
                                     const SmoothnessConfig& cfg = {}) {
  detail::require(field.dim() == 4 && field.size(1) == 2,
                  "smoothness_loss expects field [N,2,H,W], got " + detail::shape_string(field));
  detail::require(deformed.dim() == 4 && deformed.size(0) == field.size(0) &&
                      deformed.size(2) == field.size(2) && deformed.size(3) == field.size(3),
                  "smoothness_loss: deformed image " + detail::shape_string(deformed) +
                      " does not match field " + detail::shape_string(field));
  detail::require(cfg.alpha >= 0.0, "smoothness_loss: alpha must be non-negative");

  const int64_t h = field.size(2), w = field.size(3);
  using torch::indexing::Slice;
  const auto image = deformed.detach().to(field.scalar_type());
  auto per_pixel = torch::zeros({field.size(0), 1, h, w}, field.options());

  for (const auto& [oy, ox] : kNeighborOffsets) {
    // v ranges over pixels whose neighbor u = v + (oy, ox) is in-bounds.
    const auto v_rows = Slice(std::max(0, -oy), h - std::max(0, oy));
    const auto v_cols = Slice(std::max(0, -ox), w - std::max(0, ox));
    const auto u_rows = Slice(std::max(0, oy), h - std::max(0, -oy));
    const auto u_cols = Slice(std::max(0, ox), w - std::max(0, -ox));
    if (h - std::abs(oy) <= 0 || w - std::abs(ox) <= 0) continue;

    auto diff = field.index({Slice(), Slice(), u_rows, u_cols}) -
                field.index({Slice(), Slice(), v_rows, v_cols});
    auto term = torch::linalg_vector_norm(diff, 2, {1}, /*keepdim=*/true);
    if (cfg.bilateral_enabled) {
      auto photometric = image.index({Slice(), Slice(), u_rows, u_cols}) -
                         image.index({Slice(), Slice(), v_rows, v_cols});
      term = term * torch::exp(-cfg.alpha * torch::linalg_vector_norm(photometric, 2, {1}, true));
    }
    auto padded = torch::zeros_like(per_pixel);
    padded.index_put_({Slice(), Slice(), v_rows, v_cols}, term);
    per_pixel = per_pixel + padded;
  }
  return per_pixel.mean();
}

/// Mean absolute error of one composition output against the target.
inline torch::Tensor reconstruction_term(const torch::Tensor& fake, const torch::Tensor& target) {
  detail::require(fake.sizes() == target.sizes(),
                  "reconstruction: shape " + detail::shape_string(fake) + " vs target " +
                      detail::shape_string(target));
  return (fake - target).abs().mean();
}

/// mean|o_rt - target| + mean|o_tr - target|.
inline torch::Tensor reconstruction_loss(const torch::Tensor& o_rt, const torch::Tensor& o_tr,
                                         const torch::Tensor& target) {
  return reconstruction_term(o_rt, target) + reconstruction_term(o_tr, target);
}

namespace detail {

inline torch::Tensor checked_scores(const torch::Tensor& scores, const char* name) {
  const bool in_domain = torch::logical_and(scores >= 0.0, scores <= 1.0).all().item<bool>();
  if (!in_domain) {
    throw NumericError(std::string("adversarial loss: ") + name +
                       " scores leave [0,1] (or are NaN); expected squashed probabilities");
  }
  return scores.clamp(kLogEpsilon, 1.0 - kLogEpsilon);
}

}  // namespace detail

/// Discriminator objective with balanced real/fake supervision: the real
/// term has weight 1 and each present fake term weight 1/2. An absent fake
/// (single-flow ablation) is simply dropped.
inline torch::Tensor discriminator_loss(const torch::Tensor& d_real,
                                        const std::optional<torch::Tensor>& d_fake_rt,
                                        const std::optional<torch::Tensor>& d_fake_tr) {
  auto loss = -torch::log(detail::checked_scores(d_real, "real")).mean();
  for (const auto* fake : {&d_fake_rt, &d_fake_tr}) {
    if (fake->has_value()) {
      loss = loss - 0.5 * torch::log(1.0 - detail::checked_scores(**fake, "fake")).mean();
    }
  }
  return loss;
}

/// Non-saturating generator objective, 1/2 per present fake term.
inline torch::Tensor generator_loss(const std::optional<torch::Tensor>& d_fake_rt,
                                    const std::optional<torch::Tensor>& d_fake_tr) {
  detail::require(d_fake_rt.has_value() || d_fake_tr.has_value(),
                  "generator_loss needs at least one fake score map");
  torch::Tensor loss;
  for (const auto* fake : {&d_fake_rt, &d_fake_tr}) {
    if (!fake->has_value()) continue;
    auto term = -0.5 * torch::log(detail::checked_scores(**fake, "fake")).mean();
    loss = loss.defined() ? loss + term : term;
  }
  return loss;
}

struct AdversarialLosses {
  torch::Tensor generator;
  torch::Tensor discriminator;
};

inline AdversarialLosses adversarial_losses(const torch::Tensor& d_real, const torch::Tensor& d_fake_rt,
                                            const torch::Tensor& d_fake_tr) {
  detail::require(d_real.sizes() == d_fake_rt.sizes() && d_real.sizes() == d_fake_tr.sizes(),
                  "adversarial_losses: score maps differ in shape");
  return {generator_loss(d_fake_rt, d_fake_tr), discriminator_loss(d_real, d_fake_rt, d_fake_tr)};
}

/// adv + lambda_R * recon + lambda_S * smooth. Works for plain
/// doubles and for tensors.
template <typename Scalar>
Scalar total_loss(const Scalar& adv_g, const Scalar& recon, const Scalar& smooth,
                  const LossWeights& w = {}) {
  return adv_g + w.lambda_R * recon + w.lambda_S * smooth;
}

}  // namespace commreg
