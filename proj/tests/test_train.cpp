#include <fstream>

#include <gtest/gtest.h>

#include "commreg/train.hpp"
#include "test_util.hpp"

using namespace commreg;
namespace fs = std::filesystem;

namespace {

ArchitectureDescriptor tiny_arch() {
  ArchitectureDescriptor a;
  a.r_width = 4;
  a.t_width = 4;
  a.d_width = 4;
  a.t_blocks = 1;
  return a;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.arch = tiny_arch();
  c.batch_size = 4;
  c.epochs = 2;
  c.decay_start_epoch = 1;
  c.checkpoint_every = 1;
  return c;
}

SyntheticSceneConfig scene32(double max_disp = 4.0) {
  SyntheticSceneConfig s;
  s.height = s.width = 32;
  s.max_displacement = max_disp;
  s.seed = 3;
  return s;
}

Dataset make_dataset(std::size_t n, const SyntheticSceneConfig& cfg, std::size_t first = 0) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(cfg, first + i));
  return d;
}

std::pair<torch::Tensor, torch::Tensor> batch(const Dataset& d) {
  auto t = TensorSet::from(d, false);
  return {t.i_a, t.i_b};
}

std::vector<torch::Tensor> grads(torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (auto& p : m.parameters()) out.push_back(p.grad().defined() ? p.grad().clone() : torch::zeros_like(p));
  return out;
}

bool all_close(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b, double rtol = 1e-5,
               double atol = 1e-8) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!torch::allclose(a[i], b[i], rtol, atol)) return false;
  return true;
}

}  // namespace

TEST(Schedule, LinearDecayToZero) {
  const auto cfg = TrainConfig::full();
  EXPECT_EQ(lr_at(1, cfg), 1e-4);
  EXPECT_EQ(lr_at(50, cfg), 1e-4);
  EXPECT_EQ(lr_at(100, cfg), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(150, cfg), 5e-5);
  EXPECT_EQ(lr_at(200, cfg), 0.0);
  EXPECT_THROW(lr_at(0, cfg), InputError);
  EXPECT_THROW(lr_at(201, cfg), InputError);
  for (int64_t e = 1; e <= cfg.epochs; ++e) EXPECT_GE(lr_at(e, cfg), 0.0);
}

TEST(Config, JsonKeysMirrorFieldNames) {
  auto cfg = TrainConfig::full();
  cfg.flow_mode = FlowMode::RegisterFirstOnly;
  cfg.loss_routing.reconstruction_to_R = false;
  const nlohmann::json j = cfg;
  EXPECT_EQ(j.at("flow_mode"), "register_first_only");
  EXPECT_EQ(j.at("weights").at("lambda_R"), 100.0);
  EXPECT_EQ(j.at("weights").at("lambda_S"), 200.0);
  EXPECT_EQ(j.at("smoothness").at("alpha"), 1.0);
  EXPECT_EQ(j.at("optimizer").at("beta1"), 0.5);
  EXPECT_EQ(j.at("batch_size"), 12);
  EXPECT_EQ(j.at("loss_routing").at("reconstruction_to_R"), false);
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(back.flow_mode, FlowMode::RegisterFirstOnly);
  EXPECT_EQ(back.loss_routing, cfg.loss_routing);

  // Partial documents fill in defaults.
  const auto partial = nlohmann::json{{"epochs", 7}, {"flow_mode", "translate_first_only"}}.get<TrainConfig>();
  EXPECT_EQ(partial.epochs, 7);
  EXPECT_EQ(partial.batch_size, 12);
  EXPECT_EQ(partial.flow_mode, FlowMode::TranslateFirstOnly);
}

TEST(Config, Validation) {
  auto cfg = tiny_config();
  cfg.decay_start_epoch = 5;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = tiny_config();
  cfg.optimizer.lr = -1;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = tiny_config();
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), InputError);
}

TEST(TrainStep, DefaultsGiveFiniteLosses) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 0);
  Trainer trainer(bundle, tiny_config());
  const auto rep = trainer.step(a, b);
  for (double v : {rep.adv_g, rep.adv_d, rep.recon, rep.smooth, rep.total}) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(rep.smooth, 0.0);
  EXPECT_NEAR(rep.recon, rep.recon_rt + rep.recon_tr, 1e-6);
  EXPECT_NEAR(rep.total, rep.adv_g + 100 * rep.recon + 200 * rep.smooth, 1e-4 * std::abs(rep.total));
}

TEST(TrainStep, RegisterFirstOnlyReportsSingleTerm) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 1);
  auto cfg = tiny_config();
  cfg.flow_mode = FlowMode::RegisterFirstOnly;
  Trainer trainer(bundle, cfg);
  std::optional<StepTrace> seen;
  trainer.set_observer([&](const StepTrace& t) { seen = t; });
  const auto rep = trainer.step(a, b);
  ASSERT_TRUE(seen);
  EXPECT_FALSE(seen->o_rt.defined());
  EXPECT_EQ(rep.recon_rt, 0.0);
  const double outside = (seen->o_tr - seen->target).abs().mean().item<double>();
  EXPECT_NEAR(rep.recon, outside, 1e-6);
  EXPECT_NEAR(rep.recon_tr, outside, 1e-6);
}

TEST(TrainStep, TranslateFirstOnlyReportsSingleTerm) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 1);
  auto cfg = tiny_config();
  cfg.flow_mode = FlowMode::TranslateFirstOnly;
  Trainer trainer(bundle, cfg);
  std::optional<StepTrace> seen;
  trainer.set_observer([&](const StepTrace& t) { seen = t; });
  const auto rep = trainer.step(a, b);
  EXPECT_EQ(rep.recon_tr, 0.0);
  EXPECT_NEAR(rep.recon, (seen->o_rt - seen->target).abs().mean().item<double>(), 1e-6);
}

TEST(TrainStep, SameFieldFeedsBothFlows) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 2);
  Trainer trainer(bundle, tiny_config());
  int checked = 0;
  trainer.set_observer([&](const StepTrace& t) {
    ASSERT_TRUE(t.field_for_rt.defined() && t.field_for_tr.defined());
    EXPECT_TRUE(t.field_for_rt.is_same(t.field_for_tr));
    EXPECT_TRUE(torch::equal(t.field_for_rt, t.field_for_tr));
    ++checked;
  });
  trainer.step(a, b);
  trainer.step(a, b);
  EXPECT_EQ(checked, 2);
}

TEST(TrainStep, SmoothnessNeverReachesImage) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 3);
  Trainer trainer(bundle, tiny_config());
  trainer.set_debug_checks(true);
  std::optional<StepTrace> seen;
  trainer.set_observer([&](const StepTrace& t) { seen = t; });
  trainer.step(a, b);
  trainer.step(a, b);
  ASSERT_TRUE(seen && seen->smooth_grad_wrt_image.defined());
  EXPECT_EQ(seen->smooth_grad_wrt_image.abs().max().item<double>(), 0.0);
}

TEST(TrainStep, RepeatedRunsAreIdentical) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  std::vector<std::vector<double>> traces(2);
  for (auto& trace : traces) {
    ModelBundle bundle(tiny_arch());
    init_kaiming(bundle, 4);
    Trainer trainer(bundle, tiny_config());
    for (int k = 0; k < 3; ++k) {
      const auto r = trainer.step(a, b);
      trace.insert(trace.end(), {r.adv_g, r.adv_d, r.recon, r.smooth});
    }
  }
  for (std::size_t i = 0; i < traces[0].size(); ++i) {
    EXPECT_NEAR(traces[0][i], traces[1][i], 1e-6 * std::abs(traces[1][i]));
  }
}

TEST(TrainStep, ReconstructionMaskForRLeavesTGradient) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  auto run = [&](LossRouting routing, std::vector<torch::Tensor>& g_r, std::vector<torch::Tensor>& g_t) {
    ModelBundle bundle(tiny_arch());
    init_kaiming(bundle, 5);
    auto cfg = tiny_config();
    cfg.loss_routing = routing;
    cfg.optimizer.lr = 0.0;  // gradients only; parameters stay put
    Trainer trainer(bundle, cfg);
    trainer.step(a, b);
    g_r = grads(*bundle.r_phi);
    g_t = grads(*bundle.translator);
  };
  std::vector<torch::Tensor> full_r, full_t, masked_r, masked_t;
  run(LossRouting{}, full_r, full_t);
  LossRouting masked;
  masked.reconstruction_to_R = false;
  run(masked, masked_r, masked_t);
  EXPECT_TRUE(all_close(full_t, masked_t));
  EXPECT_FALSE(all_close(full_r, masked_r));
}

TEST(TrainStep, AdversarialMaskForTLeavesRGradient) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  std::vector<torch::Tensor> g_r[2], g_t[2];
  for (int k = 0; k < 2; ++k) {
    ModelBundle bundle(tiny_arch());
    init_kaiming(bundle, 6);
    auto cfg = tiny_config();
    cfg.optimizer.lr = 0.0;
    if (k == 1) cfg.loss_routing.adversarial_to_T = false;
    Trainer trainer(bundle, cfg);
    trainer.step(a, b);
    g_r[k] = grads(*bundle.r_phi);
    g_t[k] = grads(*bundle.translator);
  }
  EXPECT_TRUE(all_close(g_r[0], g_r[1]));
  EXPECT_FALSE(all_close(g_t[0], g_t[1]));
}

TEST(TrainStep, NonFiniteInputAbortsWithStep) {
  const auto data = make_dataset(4, scene32());
  auto [a, b] = batch(data);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 7);
  Trainer trainer(bundle, tiny_config());
  trainer.step(a, b);
  auto bad = a.clone();
  bad[0][0][3][3] = std::numeric_limits<float>::quiet_NaN();
  try {
    trainer.step(bad, b);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("adversarial"), std::string::npos) << msg;
  }
}

TEST(TrainRun, SmokeRunBookkeeping) {
  const auto data = make_dataset(24, scene32());
  const auto test = make_dataset(4, scene32(), 100);
  test_util::TempDir dir;
  RunOptions opts;
  opts.run_dir = dir.path();
  auto cfg = tiny_config();
  cfg.batch_size = 12;
  const auto result = train_run(cfg, data, &test, opts);
  ASSERT_EQ(result.history.size(), 2u);
  EXPECT_TRUE(result.history[0].acc_full.has_value());
  EXPECT_TRUE(fs::exists(dir.path() / "checkpoints" / "latest.pt"));
  EXPECT_TRUE(fs::exists(dir.path() / "checkpoints" / "epoch_0001.pt"));

  std::ifstream is(dir.path() / "metrics.csv");
  std::string header, line;
  std::getline(is, header);
  EXPECT_EQ(header.rfind("epoch,lr,loss_adv_g,loss_adv_d,loss_recon,loss_smooth,acc_salient,acc_full", 0), 0u);
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 2);
}

TEST(TrainRun, PartialLastBatchAndShuffle) {
  const auto a = epoch_order(10, 1, 1), b = epoch_order(10, 1, 2), c = epoch_order(10, 1, 1);
  EXPECT_EQ(a, c);
  EXPECT_NE(a, b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int64_t i = 0; i < 10; ++i) EXPECT_EQ(sorted[i], i);

  const auto data = make_dataset(5, scene32());
  auto cfg = tiny_config();
  cfg.batch_size = 2;
  cfg.epochs = 1;
  cfg.decay_start_epoch = 1;
  int64_t steps = 0;
  RunOptions opts;
  opts.on_step = [&](int64_t, const LossReport&) { ++steps; };
  train_run(cfg, data, nullptr, opts);
  EXPECT_EQ(steps, 3);
}

TEST(TrainRun, ResumeMatchesUninterruptedRun) {
  const auto data = make_dataset(8, scene32());
  auto cfg = tiny_config();
  cfg.epochs = 3;
  cfg.decay_start_epoch = 1;
  cfg.batch_size = 4;

  test_util::TempDir straight_dir, resumed_dir;
  RunOptions straight;
  straight.run_dir = straight_dir.path();
  const auto full = train_run(cfg, data, nullptr, straight);

  RunOptions first;
  first.run_dir = resumed_dir.path();
  first.max_steps = 4;  // two epochs
  train_run(cfg, data, nullptr, first);
  RunOptions second;
  second.run_dir = resumed_dir.path();
  second.resume = true;
  const auto resumed = train_run(cfg, data, nullptr, second);

  ASSERT_EQ(resumed.history.size(), 3u);
  EXPECT_NEAR(resumed.history[2].losses.recon, full.history[2].losses.recon, 1e-6);
  auto pa = full.bundle.r_phi->parameters(), pb = resumed.bundle.r_phi->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::allclose(pa[i], pb[i], 1e-6, 1e-8));
}

TEST(Baselines, RunWithFiniteLossesAndTrainOnlyR) {
  const auto data = make_dataset(4, scene32());
  auto sets = TensorSet::from(data, true);
  for (auto metric : {Objective::Ncc, Objective::SsimOnEdges, Objective::NccOnEdges}) {
    ModelBundle bundle(tiny_arch());
    init_kaiming(bundle, 8);
    auto before = bundle.translator->parameters()[0].clone();
    auto cfg = tiny_config();
    cfg.objective = metric;
    Trainer trainer(bundle, cfg);
    for (int k = 0; k < 2; ++k) {
      const auto r = trainer.step(sets.i_a, sets.i_b, sets.edges_a, sets.edges_b);
      EXPECT_TRUE(std::isfinite(r.total));
      EXPECT_TRUE(std::isfinite(r.recon));
    }
    EXPECT_TRUE(torch::equal(before, bundle.translator->parameters()[0]));
  }
}

TEST(Baselines, IdentityWarpDataStaysRegistered) {
  const auto data = make_dataset(8, scene32(0.0));
  auto cfg = tiny_config();
  cfg.batch_size = 4;
  const auto rep = baseline_train_eval(Objective::Ncc, data, data, cfg);
  EXPECT_EQ(rep.method, "R + ncc");
  EXPECT_LE(*rep.mean_full(), 1.0);
  EXPECT_THROW(baseline_train_eval(Objective::Commutative, data, data, cfg), InputError);
}

TEST(Evaluate, IdentityReportEqualsUnregisteredError) {
  const auto data = make_dataset(3, scene32());
  const auto rep = evaluate_identity(data);
  double sum = 0.0;
  for (const auto& s : data.samples) sum += registration_accuracy(DeformationField::zeros(32, 32), *s.landmarks);
  EXPECT_NEAR(*rep.mean_full(), sum / 3.0, 1e-12);
  ModelBundle bundle(tiny_arch());
  init_kaiming(bundle, 9);
  // Zero head: the untrained network is the identity warp.
  EXPECT_NEAR(*evaluate_bundle(bundle, data).mean_full(), *rep.mean_full(), 1e-12);
}

TEST(TrainRun, TranslatorLearnsAlignedModality) {
  // Identity warps: T alone has to explain the photometric map.
  const auto data = make_dataset(96, scene32(0.0));
  const auto held_out = make_dataset(12, scene32(0.0), 500);
  TrainConfig cfg;
  cfg.arch.r_width = cfg.arch.t_width = cfg.arch.d_width = 8;
  cfg.epochs = 60;
  cfg.decay_start_epoch = 30;
  auto result = train_run(cfg, data);
  double l1 = 0.0;
  for (const auto& s : held_out.samples)
    l1 += (t_forward(result.bundle, s.i_a).tensor() - s.i_b.tensor()).abs().mean().item<double>();
  EXPECT_LT(l1 / static_cast<double>(held_out.size()), 0.1);
}
