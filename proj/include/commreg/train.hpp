#pragma once

// Two-flow joint training of the field generator, translator and
// discriminator, with ablation switches for flow composition, loss routing
// and bilateral weighting. Also hosts the R-only baselines trained with a
// cross-modality similarity measure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "commreg/core.hpp"
#include "commreg/eval.hpp"
#include "commreg/field.hpp"
#include "commreg/losses.hpp"
#include "commreg/models.hpp"
#include "commreg/synthdata.hpp"

namespace commreg {

enum class FlowMode { Both, RegisterFirstOnly, TranslateFirstOnly };

/// What R is trained against.
enum class Objective { Commutative, Ncc, SsimOnEdges, NccOnEdges };

NLOHMANN_JSON_SERIALIZE_ENUM(FlowMode, {{FlowMode::Both, "both"},
                                        {FlowMode::RegisterFirstOnly, "register_first_only"},
                                        {FlowMode::TranslateFirstOnly, "translate_first_only"}})

NLOHMANN_JSON_SERIALIZE_ENUM(Objective, {{Objective::Commutative, "commutative"},
                                         {Objective::Ncc, "ncc"},
                                         {Objective::SsimOnEdges, "ssim_on_edges"},
                                         {Objective::NccOnEdges, "ncc_on_edges"}})

/// Which generator modules receive gradients from which loss term.
struct LossRouting {
  bool adversarial_to_R = true;
  bool adversarial_to_T = true;
  bool reconstruction_to_R = true;
  bool reconstruction_to_T = true;

  bool full() const { return adversarial_to_R && adversarial_to_T && reconstruction_to_R && reconstruction_to_T; }
  friend bool operator==(const LossRouting&, const LossRouting&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossRouting, adversarial_to_R, adversarial_to_T, reconstruction_to_R,
                                                reconstruction_to_T)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SmoothnessConfig, alpha, bilateral_enabled)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lambda_R, lambda_S)

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, lr, beta1, beta2)

struct TrainConfig {
  FlowMode flow_mode = FlowMode::Both;
  LossRouting loss_routing;
  SmoothnessConfig smoothness;
  LossWeights weights;
  OptimizerConfig optimizer;
  int64_t batch_size = 12;
  int64_t epochs = 200;
  /// Last epoch at the base rate; linear decay reaches 0 at `epochs`.
  int64_t decay_start_epoch = 100;
  uint64_t seed = 0;
  int64_t checkpoint_every = 10;
  bool deterministic = true;
  Objective objective = Objective::Commutative;
  ArchitectureDescriptor arch;

  void validate() const {
    detail::require(batch_size >= 1, "batch_size must be positive");
    detail::require(epochs >= 1, "epochs must be positive");
    detail::require(decay_start_epoch >= 0 && decay_start_epoch <= epochs,
                    "decay_start_epoch must lie in [0, epochs]");
    detail::require(optimizer.lr >= 0.0, "learning rate must be non-negative");
    detail::require(weights.lambda_R >= 0.0 && weights.lambda_S >= 0.0, "loss weights must be non-negative");
    detail::require(smoothness.alpha >= 0.0, "smoothness alpha must be non-negative");
    detail::require(checkpoint_every >= 1, "checkpoint_every must be positive");
  }

  /// The configuration used by the acceptance experiments.
  static TrainConfig desk() {
    TrainConfig c;
    c.epochs = 60;
    c.decay_start_epoch = 30;
    c.checkpoint_every = 20;
    c.arch.r_width = 8;
    c.arch.t_width = 8;
    c.arch.d_width = 8;
    return c;
  }

  static TrainConfig full() { return TrainConfig{}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, flow_mode, loss_routing, smoothness, weights, optimizer,
                                                batch_size, epochs, decay_start_epoch, seed, checkpoint_every,
                                                deterministic, objective, arch)

/// Learning rate for a 1-based epoch: constant through decay_start_epoch,
/// then linear to zero at the final epoch.
inline double lr_at(int64_t epoch, const TrainConfig& cfg) {
  detail::require(epoch >= 1 && epoch <= cfg.epochs,
                  "lr_at: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(cfg.epochs) + "]");
  const double base = cfg.optimizer.lr;
  if (epoch <= cfg.decay_start_epoch) return base;
  const auto span = static_cast<double>(cfg.epochs - cfg.decay_start_epoch);
  return base * static_cast<double>(cfg.epochs - epoch) / span;
}

struct LossReport {
  double adv_g = 0.0;
  double adv_d = 0.0;
  double recon = 0.0;
  double recon_rt = 0.0;  // translate-first component
  double recon_tr = 0.0;  // register-first component
  double smooth = 0.0;
  double total = 0.0;
};

/// Tensors produced inside one training step, exposed for instrumentation.
struct StepTrace {
  int64_t step = 0;
  torch::Tensor field;            // pixels, [N,2,H,W]
  torch::Tensor field_for_rt;     // field consumed by the translate-first flow
  torch::Tensor field_for_tr;     // field consumed by the register-first flow
  torch::Tensor deformed;         // resample(i_a, field), drives bilateral weights
  torch::Tensor o_rt;
  torch::Tensor o_tr;
  torch::Tensor target;
  torch::Tensor smooth_grad_wrt_image;  // populated when debug checks are on
};

namespace detail {

inline torch::Tensor grayscale(const torch::Tensor& x) { return x.size(1) == 1 ? x : x.mean(1, true); }

inline void check_finite(const torch::Tensor& v, const char* term, int64_t step) {
  if (!std::isfinite(v.item<double>())) {
    throw NumericError(std::string("non-finite ") + term + " loss at step " + std::to_string(step));
  }
}

}  // namespace detail

/// Owns the optimizers and performs single iterations on normalized
/// ([-1,1]) batches.
class Trainer {
 public:
  Trainer(ModelBundle& bundle, TrainConfig cfg)
      : bundle_(bundle),
        cfg_(std::move(cfg)),
        g_opt_(bundle.generator_parameters(), adam_options()),
        d_opt_(bundle.discriminator->parameters(), adam_options()) {
    cfg_.validate();
  }

  void set_lr(double lr) {
    for (auto* opt : {&g_opt_, &d_opt_}) {
      for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
  }

  /// Hook called after every step with the step's intermediate tensors.
  void set_observer(std::function<void(const StepTrace&)> observer) { observer_ = std::move(observer); }

  /// Also computes the gradient of the smoothness term w.r.t. the deformed
  /// image and stores it in the trace.
  void set_debug_checks(bool on) { debug_checks_ = on; }

  const TrainConfig& config() const { return cfg_; }
  int64_t steps_taken() const { return step_; }

  /// `edges_a` / `edges_b` are required by the edge-based baselines only.
  LossReport step(const torch::Tensor& i_a, const torch::Tensor& i_b, const torch::Tensor& edges_a = {},
                  const torch::Tensor& edges_b = {}) {
    ++step_;
    bundle_.train(true);
    try {
      if (cfg_.objective != Objective::Commutative) return baseline_step(i_a, i_b, edges_a, edges_b);
      return commutative_step(i_a, i_b);
    } catch (const NumericError& e) {
      const std::string what = e.what();
      if (what.find(" at step ") != std::string::npos) throw;
      throw NumericError(what + " at step " + std::to_string(step_));
    }
  }

  void save(torch::serialize::OutputArchive& archive) const {
    torch::serialize::OutputArchive g, d;
    g_opt_.save(g);
    d_opt_.save(d);
    archive.write("optimizer_g", g);
    archive.write("optimizer_d", d);
    archive.write("step", c10::IValue(step_));
  }

  void load(torch::serialize::InputArchive& archive) {
    torch::serialize::InputArchive g, d;
    archive.read("optimizer_g", g);
    archive.read("optimizer_d", d);
    g_opt_.load(g);
    d_opt_.load(d);
    c10::IValue s;
    archive.read("step", s);
    step_ = s.toInt();
  }

 private:
  torch::optim::AdamOptions adam_options() const {
    return torch::optim::AdamOptions(cfg_.optimizer.lr).betas({cfg_.optimizer.beta1, cfg_.optimizer.beta2});
  }

  LossReport commutative_step(const torch::Tensor& i_a, const torch::Tensor& i_b) {
    const bool use_tr = cfg_.flow_mode != FlowMode::TranslateFirstOnly;
    const bool use_rt = cfg_.flow_mode != FlowMode::RegisterFirstOnly;

    auto field_norm = bundle_.r_phi->forward_normalized(i_a, i_b);
    // The one field both flows consume.
    const auto phi = FieldGeneratorImpl::normalized_to_pixels(field_norm);

    auto deformed = resample(i_a, phi);
    torch::Tensor o_tr, o_rt;
    if (use_tr) o_tr = bundle_.translator->forward(deformed);
    if (use_rt) o_rt = resample(bundle_.translator->forward(i_a), phi);

    // Discriminator update on detached fakes.
    auto d_real = bundle_.discriminator->forward(i_b, i_a);
    std::optional<torch::Tensor> d_fake_rt, d_fake_tr;
    if (use_rt) d_fake_rt = bundle_.discriminator->forward(o_rt.detach(), i_a);
    if (use_tr) d_fake_tr = bundle_.discriminator->forward(o_tr.detach(), i_a);
    auto loss_d = discriminator_loss(d_real, d_fake_rt, d_fake_tr);
    detail::check_finite(loss_d, "discriminator adversarial", step_);
    d_opt_.zero_grad();
    loss_d.backward();
    d_opt_.step();

    // Generator update with the discriminator frozen.
    set_requires_grad(*bundle_.discriminator, false);
    std::optional<torch::Tensor> g_fake_rt, g_fake_tr;
    if (use_rt) g_fake_rt = bundle_.discriminator->forward(o_rt, i_a);
    if (use_tr) g_fake_tr = bundle_.discriminator->forward(o_tr, i_a);
    torch::Tensor adv_g;
    try {
      adv_g = generator_loss(g_fake_rt, g_fake_tr);
    } catch (...) {
      set_requires_grad(*bundle_.discriminator, true);
      throw;
    }
    set_requires_grad(*bundle_.discriminator, true);

    auto zero = torch::zeros({}, i_a.options());
    auto recon_rt = use_rt ? reconstruction_term(o_rt, i_b) : zero;
    auto recon_tr = use_tr ? reconstruction_term(o_tr, i_b) : zero;
    auto recon = recon_rt + recon_tr;
    auto smooth = smoothness_term(field_norm, deformed);

    detail::check_finite(adv_g, "generator adversarial", step_);
    detail::check_finite(recon, "reconstruction", step_);
    detail::check_finite(smooth, "smoothness", step_);

    auto total = total_loss(adv_g, recon, smooth, cfg_.weights);
    g_opt_.zero_grad();
    if (cfg_.loss_routing.full()) {
      total.backward();
    } else {
      routed_backward(adv_g, recon, smooth);
    }
    g_opt_.step();

    if (observer_ || debug_checks_) {
      StepTrace trace;
      trace.step = step_;
      trace.field = phi.detach();
      // Tensors handed to each flow's resampler, not copies.
      if (use_rt) trace.field_for_rt = phi;
      if (use_tr) trace.field_for_tr = phi;
      trace.deformed = deformed.detach();
      if (use_rt) trace.o_rt = o_rt.detach();
      if (use_tr) trace.o_tr = o_tr.detach();
      trace.target = i_b;
      if (debug_checks_) {
        trace.smooth_grad_wrt_image = smoothness_image_gradient(field_norm.detach(), deformed.detach());
        if (trace.smooth_grad_wrt_image.abs().max().item<double>() != 0.0) {
          throw NumericError("smoothness loss leaked gradient into the deformed image at step " +
                             std::to_string(step_));
        }
      }
      if (observer_) observer_(trace);
    }

    return {adv_g.item<double>(),    loss_d.item<double>(),   recon.item<double>(), recon_rt.item<double>(),
            recon_tr.item<double>(), smooth.item<double>(), total.item<double>()};
  }

  static void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) p.set_requires_grad(on);
  }

  /// Smoothness on the field in normalized grid units; bilateral weights
  /// from the [0,1] form of the register-first deformed image.
  torch::Tensor smoothness_term(const torch::Tensor& field_norm, const torch::Tensor& deformed) const {
    return smoothness_loss(field_norm, (deformed + 1.0) * 0.5, cfg_.smoothness);
  }

  torch::Tensor smoothness_image_gradient(const torch::Tensor& field_norm, const torch::Tensor& deformed) const {
    auto image = deformed.clone().set_requires_grad(true);
    auto f = field_norm.clone().set_requires_grad(true);
    auto loss = smoothness_term(f, image);
    auto grads = torch::autograd::grad({loss}, {image}, {}, false, false, /*allow_unused=*/true);
    return grads[0].defined() ? grads[0] : torch::zeros_like(image);
  }

  /// Per-module gradients with masked loss terms. A masked module still
  /// took part in the forward pass; it just does not see that term.
  void routed_backward(const torch::Tensor& adv, const torch::Tensor& recon, const torch::Tensor& smooth) {
    const auto& r = cfg_.loss_routing;
    const auto& w = cfg_.weights;
    auto r_params = bundle_.r_phi->parameters();
    auto t_params = bundle_.translator->parameters();

    auto for_r = w.lambda_S * smooth;
    if (r.adversarial_to_R) for_r = for_r + adv;
    if (r.reconstruction_to_R) for_r = for_r + w.lambda_R * recon;
    torch::Tensor for_t;
    if (r.adversarial_to_T) for_t = adv;
    if (r.reconstruction_to_T) for_t = for_t.defined() ? for_t + w.lambda_R * recon : w.lambda_R * recon;

    auto assign = [](std::vector<torch::Tensor>& params, const torch::Tensor& loss, bool retain) {
      auto grads = torch::autograd::grad({loss}, params, {}, retain, false, /*allow_unused=*/true);
      for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].mutable_grad() = grads[i].defined() ? grads[i] : torch::zeros_like(params[i]);
      }
    };
    assign(r_params, for_r, /*retain=*/for_t.defined());
    if (for_t.defined()) {
      assign(t_params, for_t, false);
    } else {
      for (auto& p : t_params) p.mutable_grad() = torch::zeros_like(p);
    }
  }

  /// R-only training against a cross-modality similarity measure.
  LossReport baseline_step(const torch::Tensor& i_a, const torch::Tensor& i_b, const torch::Tensor& edges_a,
                           const torch::Tensor& edges_b) {
    auto field_norm = bundle_.r_phi->forward_normalized(i_a, i_b);
    auto field = FieldGeneratorImpl::normalized_to_pixels(field_norm);
    auto deformed = resample(i_a, field);
    torch::Tensor dissimilarity;
    switch (cfg_.objective) {
      case Objective::Ncc:
        dissimilarity = 1.0 - ncc(detail::grayscale(deformed), i_b).mean();
        break;
      case Objective::NccOnEdges:
        detail::require(edges_a.defined() && edges_b.defined(), "edge baselines need edge maps");
        dissimilarity = 1.0 - ncc(resample(edges_a, field), edges_b).mean();
        break;
      case Objective::SsimOnEdges:
        detail::require(edges_a.defined() && edges_b.defined(), "edge baselines need edge maps");
        dissimilarity = 1.0 - ssim(resample(edges_a, field), edges_b).mean();
        break;
      case Objective::Commutative:
        break;
    }
    auto smooth = smoothness_term(field_norm, deformed);
    detail::check_finite(dissimilarity, "similarity", step_);
    detail::check_finite(smooth, "smoothness", step_);
    auto total = cfg_.weights.lambda_R * dissimilarity + cfg_.weights.lambda_S * smooth;
    g_opt_.zero_grad();
    total.backward();
    g_opt_.step();
    LossReport rep;
    rep.recon = dissimilarity.item<double>();
    rep.smooth = smooth.item<double>();
    rep.total = total.item<double>();
    return rep;
  }

  ModelBundle& bundle_;
  TrainConfig cfg_;
  torch::optim::Adam g_opt_;
  torch::optim::Adam d_opt_;
  std::function<void(const StepTrace&)> observer_;
  bool debug_checks_ = false;
  int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Batching.

/// Dataset packed as network-ready tensors.
struct TensorSet {
  torch::Tensor i_a;      // [N,Ca,H,W] in [-1,1]
  torch::Tensor i_b;      // [N,Cb,H,W] in [-1,1]
  torch::Tensor edges_a;  // [N,1,H,W] in [0,1], baselines only
  torch::Tensor edges_b;

  static TensorSet from(const Dataset& data, bool with_edges) {
    std::vector<torch::Tensor> a, b, ea, eb;
    for (const auto& s : data.samples) {
      a.push_back(s.i_a.to_network());
      b.push_back(s.i_b.to_network());
      if (with_edges) {
        ea.push_back(soft_edges(s.i_a).tensor().unsqueeze(0).to(torch::kFloat32));
        eb.push_back(soft_edges(s.i_b).tensor().unsqueeze(0).to(torch::kFloat32));
      }
    }
    TensorSet t{torch::cat(a), torch::cat(b), {}, {}};
    if (with_edges) {
      t.edges_a = torch::cat(ea);
      t.edges_b = torch::cat(eb);
    }
    return t;
  }
};

inline std::vector<int64_t> epoch_order(std::size_t n, uint64_t seed, int64_t epoch) {
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    0xba7c4u};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw keeps the order library-independent.
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

// ---------------------------------------------------------------------------
// Evaluation of a bundle on a dataset.

inline std::vector<DeformationField> predict_fields(ModelBundle& bundle, const Dataset& data, int64_t batch = 16) {
  torch::NoGradGuard no_grad;
  bundle.r_phi->eval();
  std::vector<DeformationField> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const auto end = std::min(data.size(), start + static_cast<std::size_t>(batch));
    std::vector<torch::Tensor> a, b;
    for (auto i = start; i < end; ++i) {
      a.push_back(data.samples[i].i_a.to_network());
      b.push_back(data.samples[i].i_b.to_network());
    }
    auto fields = bundle.r_phi->forward(torch::cat(a), torch::cat(b)).to(torch::kFloat64);
    for (int64_t k = 0; k < fields.size(0); ++k) out.emplace_back(fields[k]);
  }
  bundle.r_phi->train();
  return out;
}

inline AccuracyReport evaluate_bundle(ModelBundle& bundle, const Dataset& data, std::string method = "R + T") {
  AccuracyReport rep{std::move(method), {}};
  const auto fields = predict_fields(bundle, data);
  for (std::size_t i = 0; i < data.size(); ++i) rep.samples.push_back(evaluate_sample(fields[i], data.samples[i]));
  return rep;
}

/// Identity-warp baseline ("unregistered").
inline AccuracyReport evaluate_identity(const Dataset& data) {
  AccuracyReport rep{"Unregistered", {}};
  for (const auto& s : data.samples) {
    rep.samples.push_back(evaluate_sample(DeformationField::zeros(s.i_a.height(), s.i_a.width()), s));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Full runs.

struct EpochMetrics {
  int64_t epoch = 0;
  double lr = 0.0;
  LossReport losses;  // epoch means
  std::optional<double> acc_salient;
  std::optional<double> acc_full;
  std::optional<double> epe;
};

inline constexpr const char* kMetricsHeader =
    "epoch,lr,loss_adv_g,loss_adv_d,loss_recon,loss_smooth,acc_salient,acc_full,loss_recon_rt,loss_recon_tr,epe";

inline std::string metrics_row(const EpochMetrics& m) {
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return std::string(buf);
  };
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,", static_cast<long long>(m.epoch), m.lr,
                m.losses.adv_g, m.losses.adv_d, m.losses.recon, m.losses.smooth);
  std::string row = buf;
  row += opt(m.acc_salient) + "," + opt(m.acc_full) + ",";
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,", m.losses.recon_rt, m.losses.recon_tr);
  return row + buf + opt(m.epe);
}

struct RunOptions {
  /// Run directory for checkpoints and metrics.csv; empty disables disk output.
  std::filesystem::path run_dir;
  bool resume = false;
  /// Stop after this many optimizer steps (0 = no limit). For smoke tests.
  int64_t max_steps = 0;
  bool verbose = false;
  std::function<void(const StepTrace&)> observer;
  std::function<void(int64_t, const LossReport&)> on_step;
  bool debug_checks = false;
};

struct TrainResult {
  ModelBundle bundle;
  std::vector<EpochMetrics> history;
};

namespace detail {

inline void write_metrics(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << kMetricsHeader << '\n';
  for (const auto& m : history) os << metrics_row(m) << '\n';
}

inline std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path, int64_t up_to_epoch) {
  std::vector<EpochMetrics> out;
  std::ifstream is(path);
  std::string line;
  if (!is || !std::getline(is, line)) return out;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 11) cells.emplace_back();
    auto num = [](const std::string& s) { return std::stod(s); };
    auto opt = [](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    EpochMetrics m;
    m.epoch = std::stoll(cells[0]);
    if (m.epoch > up_to_epoch) break;
    m.lr = num(cells[1]);
    m.losses.adv_g = num(cells[2]);
    m.losses.adv_d = num(cells[3]);
    m.losses.recon = num(cells[4]);
    m.losses.smooth = num(cells[5]);
    m.acc_salient = opt(cells[6]);
    m.acc_full = opt(cells[7]);
    m.losses.recon_rt = cells[8].empty() ? 0.0 : num(cells[8]);
    m.losses.recon_tr = cells[9].empty() ? 0.0 : num(cells[9]);
    m.epe = opt(cells[10]);
    out.push_back(m);
  }
  return out;
}

}  // namespace detail

/// Trains from scratch (or resumes from run_dir/checkpoints/latest.pt) and
/// records per-epoch metrics; `eval_data` (optional) feeds the accuracy
/// columns.
inline TrainResult train_run(const TrainConfig& cfg, const Dataset& train_data, const Dataset* eval_data = nullptr,
                             const RunOptions& opts = {}) {
  cfg.validate();
  detail::require(train_data.size() > 0, "train_run: empty dataset");
  if (cfg.deterministic) at::globalContext().setDeterministicAlgorithms(true, false);
  torch::manual_seed(cfg.seed);

  TrainResult result{ModelBundle(cfg.arch), {}};
  auto& bundle = result.bundle;
  init_kaiming(bundle, cfg.seed);
  Trainer trainer(bundle, cfg);
  if (opts.observer) trainer.set_observer(opts.observer);
  trainer.set_debug_checks(opts.debug_checks);

  namespace fs = std::filesystem;
  const bool on_disk = !opts.run_dir.empty();
  const auto ckpt_dir = opts.run_dir / "checkpoints";
  if (on_disk) fs::create_directories(ckpt_dir);

  int64_t start_epoch = 1;
  int64_t completed_epoch = 0;
  CheckpointExtras extras{
      [&](torch::serialize::OutputArchive& a) {
        trainer.save(a);
        a.write("epoch", c10::IValue(completed_epoch));
        a.write("train_config", c10::IValue(nlohmann::json(cfg).dump()));
      },
      [&](torch::serialize::InputArchive& a) {
        trainer.load(a);
        c10::IValue e;
        a.read("epoch", e);
        completed_epoch = e.toInt();
      }};
  if (opts.resume && on_disk && fs::exists(ckpt_dir / "latest.pt")) {
    load_checkpoint(ckpt_dir / "latest.pt", bundle, extras);
    start_epoch = completed_epoch + 1;
    result.history = detail::read_metrics(opts.run_dir / "metrics.csv", completed_epoch);
  }

  const bool with_edges = cfg.objective == Objective::SsimOnEdges || cfg.objective == Objective::NccOnEdges;
  const auto tensors = TensorSet::from(train_data, with_edges);
  const auto n = static_cast<int64_t>(train_data.size());

  for (int64_t epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    trainer.set_lr(lr);
    const auto order = epoch_order(train_data.size(), cfg.seed, epoch);
    LossReport sum;
    int64_t batches = 0;
    bool stop = false;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const auto end = std::min(n, start + cfg.batch_size);
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + end), torch::kLong);
      auto ea = with_edges ? tensors.edges_a.index_select(0, idx) : torch::Tensor{};
      auto eb = with_edges ? tensors.edges_b.index_select(0, idx) : torch::Tensor{};
      const auto rep = trainer.step(tensors.i_a.index_select(0, idx), tensors.i_b.index_select(0, idx), ea, eb);
      if (opts.on_step) opts.on_step(trainer.steps_taken(), rep);
      sum.adv_g += rep.adv_g;
      sum.adv_d += rep.adv_d;
      sum.recon += rep.recon;
      sum.recon_rt += rep.recon_rt;
      sum.recon_tr += rep.recon_tr;
      sum.smooth += rep.smooth;
      sum.total += rep.total;
      ++batches;
      if (opts.max_steps > 0 && trainer.steps_taken() >= opts.max_steps) {
        stop = true;
        break;
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    const auto nb = static_cast<double>(batches);
    m.losses = {sum.adv_g / nb, sum.adv_d / nb, sum.recon / nb, sum.recon_rt / nb, sum.recon_tr / nb, sum.smooth / nb,
                sum.total / nb};
    if (eval_data != nullptr) {
      const auto rep = evaluate_bundle(bundle, *eval_data);
      m.acc_salient = rep.mean_salient();
      m.acc_full = rep.mean_full();
      m.epe = rep.mean_epe();
    }
    result.history.push_back(m);
    completed_epoch = epoch;
    if (opts.verbose) {
      std::cerr << "epoch " << epoch << " lr " << lr << " adv_g " << m.losses.adv_g << " adv_d " << m.losses.adv_d
                << " recon " << m.losses.recon << " smooth " << m.losses.smooth;
      if (m.acc_full) std::cerr << " acc_full " << *m.acc_full;
      if (m.epe) std::cerr << " epe " << *m.epe;
      std::cerr << std::endl;
    }
    if (on_disk) {
      detail::write_metrics(opts.run_dir / "metrics.csv", result.history);
      const bool last = epoch == cfg.epochs || stop;
      if (epoch % cfg.checkpoint_every == 0 || last) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04lld.pt", static_cast<long long>(epoch));
        save_checkpoint(ckpt_dir / name, bundle, extras);
        save_checkpoint(ckpt_dir / "latest.pt", bundle, extras);
      }
    }
    if (stop) break;
  }
  return result;
}

/// Trains R alone against a cross-modality measure plus smoothness, then
/// evaluates landmark accuracy on `test_data`.
inline AccuracyReport baseline_train_eval(Objective metric, const Dataset& train_data, const Dataset& test_data,
                                          TrainConfig cfg, const RunOptions& opts = {}) {
  detail::require(metric != Objective::Commutative, "baseline_train_eval expects a similarity-measure objective");
  cfg.objective = metric;
  auto result = train_run(cfg, train_data, nullptr, opts);
  return evaluate_bundle(result.bundle, test_data, "R + " + nlohmann::json(metric).get<std::string>());
}

}  // namespace commreg
