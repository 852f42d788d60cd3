#pragma once

// The three learnable networks: deformation generator (U-Net with residual
// blocks), geometry-preserving translator (residual encoder-decoder) and a
// conditional patch discriminator. Plus Kaiming initialization and the
// checkpoint container.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "commreg/core.hpp"

namespace commreg {

struct ArchitectureDescriptor {
  int64_t channels_a = 3;
  int64_t channels_b = 1;
  int64_t r_depth = 4;
  int64_t r_width = 32;
  int64_t t_width = 32;
  int64_t t_blocks = 4;
  int64_t d_width = 32;
  int64_t d_layers = 3;
  std::string norm = "instance";

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;

  /// Spatial sizes must be divisible by this.
  int64_t size_divisor() const { return int64_t{1} << std::max<int64_t>(r_depth, 2); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ArchitectureDescriptor, channels_a, channels_b, r_depth,
                                                r_width, t_width, t_blocks, d_width, d_layers, norm)

namespace detail {

inline torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

inline torch::nn::InstanceNorm2d instance_norm(int64_t channels) {
  return torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(channels).affine(true));
}

inline void require_divisible(const torch::Tensor& x, int64_t divisor, const char* who) {
  require(x.dim() == 4, std::string(who) + ": expected a [N,C,H,W] batch, got " + shape_string(x));
  require(x.size(2) % divisor == 0 && x.size(3) % divisor == 0,
          std::string(who) + ": spatial size " + std::to_string(x.size(2)) + "x" +
              std::to_string(x.size(3)) + " is not divisible by " + std::to_string(divisor));
}

}  // namespace detail

/// conv-IN-ReLU-conv-IN with an identity skip.
struct ResidualBlockImpl : torch::nn::Module {
  explicit ResidualBlockImpl(int64_t channels)
      : conv1(register_module("conv1", detail::conv(channels, channels, 3, 1, 1))),
        norm1(register_module("norm1", detail::instance_norm(channels))),
        conv2(register_module("conv2", detail::conv(channels, channels, 3, 1, 1))),
        norm2(register_module("norm2", detail::instance_norm(channels))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    return x + norm2(conv2(torch::relu(norm1(conv1(x)))));
  }

  torch::nn::Conv2d conv1;
  torch::nn::InstanceNorm2d norm1;
  torch::nn::Conv2d conv2;
  torch::nn::InstanceNorm2d norm2;
};
TORCH_MODULE(ResidualBlock);

/// U-Net producing a dense 2-channel field. Residual blocks sit on the
/// encoder path and on the full-resolution output path.
///
/// The head emits offsets in normalized grid units (the full raster spans
/// [-1,1]); forward() rescales them to pixels.
struct FieldGeneratorImpl : torch::nn::Module {
  explicit FieldGeneratorImpl(const ArchitectureDescriptor& arch) : depth(arch.r_depth) {
    const int64_t w = arch.r_width;
    auto width_at = [&](int64_t level) { return w << std::min<int64_t>(level, 3); };
    stem = register_module("stem", detail::conv(arch.channels_a + arch.channels_b, w, 3, 1, 1));
    for (int64_t k = 0; k < depth; ++k) {
      encoders->push_back(ResidualBlock(width_at(k)));
      downs->push_back(detail::conv(width_at(k), width_at(k + 1), 3, 2, 1));
    }
    register_module("encoders", encoders);
    register_module("downs", downs);
    bottleneck = register_module("bottleneck", ResidualBlock(width_at(depth)));
    for (int64_t k = depth - 1; k >= 0; --k) {
      ups->push_back(detail::conv(width_at(k + 1) + width_at(k), width_at(k), 3, 1, 1));
    }
    register_module("ups", ups);
    output_block = register_module("output_block", ResidualBlock(w));
    head = register_module("head", detail::conv(w, 2, 3, 1, 1));
  }

  /// Field in normalized grid units, [N,2,H,W].
  torch::Tensor forward_normalized(const torch::Tensor& i_a, const torch::Tensor& i_b) {
    auto x = torch::leaky_relu(stem(torch::cat({i_a, i_b}, 1)), 0.2);
    std::vector<torch::Tensor> skips;
    for (int64_t k = 0; k < depth; ++k) {
      x = encoders[k]->as<ResidualBlock>()->forward(x);
      skips.push_back(x);
      x = torch::leaky_relu(downs[k]->as<torch::nn::Conv2d>()->forward(x), 0.2);
    }
    x = bottleneck(x);
    for (int64_t k = 0; k < depth; ++k) {
      x = torch::upsample_nearest2d(x, std::vector<int64_t>{skips.back().size(2), skips.back().size(3)});
      x = torch::cat({x, skips.back()}, 1);
      skips.pop_back();
      x = torch::leaky_relu(ups[k]->as<torch::nn::Conv2d>()->forward(x), 0.2);
    }
    return head(output_block(x));
  }

  /// Field in pixels (dy, dx), [N,2,H,W].
  torch::Tensor forward(const torch::Tensor& i_a, const torch::Tensor& i_b) {
    return normalized_to_pixels(forward_normalized(i_a, i_b));
  }

  static torch::Tensor pixel_scale(int64_t height, int64_t width, const torch::TensorOptions& opts) {
    return torch::tensor({(static_cast<double>(height) - 1.0) / 2.0, (static_cast<double>(width) - 1.0) / 2.0},
                         opts)
        .view({1, 2, 1, 1});
  }

  static torch::Tensor normalized_to_pixels(const torch::Tensor& field) {
    return field * pixel_scale(field.size(2), field.size(3), field.options());
  }

  static torch::Tensor pixels_to_normalized(const torch::Tensor& field) {
    return field / pixel_scale(field.size(2), field.size(3), field.options());
  }

  int64_t depth;
  torch::nn::Conv2d stem{nullptr};
  torch::nn::ModuleList encoders;
  torch::nn::ModuleList downs;
  ResidualBlock bottleneck{nullptr};
  torch::nn::ModuleList ups;
  ResidualBlock output_block{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(FieldGenerator);

/// Residual encoder-decoder: two stride-2 downsamplings, residual blocks,
/// two transposed-conv upsamplings, tanh output in [-1,1].
struct TranslatorImpl : torch::nn::Module {
  explicit TranslatorImpl(const ArchitectureDescriptor& arch) {
    const int64_t w = arch.t_width;
    body->push_back(detail::conv(arch.channels_a, w, 7, 1, 3));
    body->push_back(detail::instance_norm(w));
    body->push_back(torch::nn::ReLU());
    body->push_back(detail::conv(w, 2 * w, 3, 2, 1));
    body->push_back(detail::instance_norm(2 * w));
    body->push_back(torch::nn::ReLU());
    body->push_back(detail::conv(2 * w, 4 * w, 3, 2, 1));
    body->push_back(detail::instance_norm(4 * w));
    body->push_back(torch::nn::ReLU());
    for (int64_t i = 0; i < arch.t_blocks; ++i) body->push_back(ResidualBlock(4 * w));
    body->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(4 * w, 2 * w, 4).stride(2).padding(1)));
    body->push_back(detail::instance_norm(2 * w));
    body->push_back(torch::nn::ReLU());
    body->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(2 * w, w, 4).stride(2).padding(1)));
    body->push_back(detail::instance_norm(w));
    body->push_back(torch::nn::ReLU());
    body->push_back(detail::conv(w, arch.channels_b, 7, 1, 3));
    body->push_back(torch::nn::Tanh());
    register_module("body", body);
  }

  torch::Tensor forward(const torch::Tensor& x) { return body->forward(x); }

  torch::nn::Sequential body;
};
TORCH_MODULE(Translator);

/// Conditional patch discriminator: candidate and condition are stacked on
/// the channel axis; `d_layers` stride-2 convolutions, one stride-1
/// widening convolution, then a 1-channel sigmoid head.
struct PatchDiscriminatorImpl : torch::nn::Module {
  explicit PatchDiscriminatorImpl(const ArchitectureDescriptor& arch) {
    int64_t in = arch.channels_b + arch.channels_a;
    int64_t out = arch.d_width;
    for (int64_t i = 0; i < arch.d_layers; ++i) {
      body->push_back(detail::conv(in, out, 4, 2, 1));
      if (i > 0) body->push_back(detail::instance_norm(out));
      body->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
      in = out;
      out = std::min(out * 2, arch.d_width * 8);
    }
    body->push_back(detail::conv(in, out, 4, 1, 1));
    body->push_back(detail::instance_norm(out));
    body->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    body->push_back(detail::conv(out, 1, 4, 1, 1));
    body->push_back(torch::nn::Sigmoid());
    register_module("body", body);
  }

  torch::Tensor forward(const torch::Tensor& candidate, const torch::Tensor& condition) {
    detail::require(candidate.dim() == 4 && condition.dim() == 4 && candidate.size(0) == condition.size(0) &&
                        candidate.size(2) == condition.size(2) && candidate.size(3) == condition.size(3),
                    "discriminator: candidate " + detail::shape_string(candidate) + " and condition " +
                        detail::shape_string(condition) + " do not stack");
    return body->forward(torch::cat({candidate, condition}, 1));
  }

  torch::nn::Sequential body;
};
TORCH_MODULE(PatchDiscriminator);

struct ModelBundle {
  explicit ModelBundle(ArchitectureDescriptor a = {})
      : arch(std::move(a)), r_phi(arch), translator(arch), discriminator(arch) {
    detail::require(arch.norm == "instance", "unsupported normalization kind '" + arch.norm + "'");
    detail::require(arch.r_depth >= 1 && arch.r_width > 0 && arch.t_width > 0 && arch.d_width > 0 &&
                        arch.d_layers >= 1 && arch.t_blocks >= 0,
                    "invalid architecture descriptor");
  }

  std::vector<torch::Tensor> generator_parameters() const {
    auto p = r_phi->parameters();
    auto t = translator->parameters();
    p.insert(p.end(), t.begin(), t.end());
    return p;
  }

  void train(bool on = true) {
    r_phi->train(on);
    translator->train(on);
    discriminator->train(on);
  }

  ArchitectureDescriptor arch;
  FieldGenerator r_phi;
  Translator translator;
  PatchDiscriminator discriminator;
};

inline int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

/// Kaiming fan-in normal weights (variance 2/fan_in), zero biases, unit
/// normalization scales. The field head is zeroed so training starts from
/// the identity warp. Deterministic for a given seed.
inline void init_kaiming(ModelBundle& bundle, uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto init_module = [&](torch::nn::Module& root) {
    for (auto& item : root.named_modules()) {
      auto& m = *item.value();
      if (auto* c = m.as<torch::nn::Conv2d>()) {
        const auto fan_in = static_cast<double>(c->weight.size(1) * c->weight.size(2) * c->weight.size(3));
        c->weight.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
        if (c->bias.defined()) c->bias.zero_();
      } else if (auto* t = m.as<torch::nn::ConvTranspose2d>()) {
        // weight is [in, out, k, k]; each output sums over in*k*k inputs.
        const auto fan_in = static_cast<double>(t->weight.size(0) * t->weight.size(2) * t->weight.size(3));
        t->weight.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
        if (t->bias.defined()) t->bias.zero_();
      } else if (auto* n = m.as<torch::nn::InstanceNorm2d>()) {
        if (n->weight.defined()) n->weight.fill_(1.0);
        if (n->bias.defined()) n->bias.zero_();
      }
    }
  };
  init_module(*bundle.r_phi);
  init_module(*bundle.translator);
  init_module(*bundle.discriminator);
  bundle.r_phi->head->weight.zero_();
  bundle.r_phi->head->bias.zero_();
}

// ---------------------------------------------------------------------------
// Typed single-image entry points (evaluation mode, no autograd).

inline DeformationField r_phi_forward(ModelBundle& bundle, const Image& i_a, const Image& i_b) {
  detail::require(i_a.height() == i_b.height() && i_a.width() == i_b.width(),
                  "r_phi_forward: inputs differ in spatial size");
  torch::NoGradGuard no_grad;
  auto a = i_a.to_network();
  detail::require_divisible(a, bundle.arch.size_divisor(), "r_phi_forward");
  bundle.r_phi->eval();
  auto field = bundle.r_phi->forward(a, i_b.to_network());
  return DeformationField(field.squeeze(0));
}

inline Image t_forward(ModelBundle& bundle, const Image& i_a) {
  torch::NoGradGuard no_grad;
  auto a = i_a.to_network();
  detail::require_divisible(a, 4, "t_forward");
  bundle.translator->eval();
  return Image::from_network(bundle.translator->forward(a));
}

// ---------------------------------------------------------------------------
// Checkpoints: a torch archive carrying a format version, the architecture
// descriptor as JSON, named parameter tensors and optional extra sections.

inline constexpr int64_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_module(torch::serialize::OutputArchive& archive, const std::string& prefix,
                         const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters()) archive.write(prefix + "." + p.key(), p.value());
  for (const auto& b : m.named_buffers()) archive.write(prefix + "." + b.key(), b.value(), true);
}

inline void read_module(torch::serialize::InputArchive& archive, const std::string& prefix,
                        torch::nn::Module& m) {
  torch::NoGradGuard no_grad;
  for (auto& p : m.named_parameters()) {
    torch::Tensor t;
    archive.read(prefix + "." + p.key(), t);
    if (t.sizes() != p.value().sizes()) {
      throw CheckpointError("checkpoint tensor " + prefix + "." + p.key() + " has shape " + shape_string(t) +
                            ", expected " + shape_string(p.value()));
    }
    p.value().copy_(t);
  }
}

}  // namespace detail

/// Extra sections hooked into a checkpoint (optimizer state, epoch, ...).
struct CheckpointExtras {
  std::function<void(torch::serialize::OutputArchive&)> save;
  std::function<void(torch::serialize::InputArchive&)> load;
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle,
                            const CheckpointExtras& extras = {}) {
  torch::serialize::OutputArchive archive;
  archive.write("format_version", c10::IValue(kCheckpointVersion));
  archive.write("descriptor", c10::IValue(nlohmann::json(bundle.arch).dump()));
  detail::write_module(archive, "r_phi", *bundle.r_phi);
  detail::write_module(archive, "translator", *bundle.translator);
  detail::write_module(archive, "discriminator", *bundle.discriminator);
  if (extras.save) extras.save(archive);
  const auto tmp = path.string() + ".tmp";
  archive.save_to(tmp);
  std::filesystem::rename(tmp, path);
}

/// Reads only the descriptor of a checkpoint.
inline ArchitectureDescriptor read_checkpoint_descriptor(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    c10::IValue version, descriptor;
    archive.read("format_version", version);
    archive.read("descriptor", descriptor);
    if (!version.isInt() || version.toInt() != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version in " + path.string());
    }
    return nlohmann::json::parse(descriptor.toStringRef()).get<ArchitectureDescriptor>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() +
                          ": cannot read architecture descriptor (descriptor mismatch)");
  }
}

/// Loads parameters into `bundle`; throws when the stored descriptor does not
/// equal bundle.arch.
inline void load_checkpoint(const std::filesystem::path& path, ModelBundle& bundle,
                            const CheckpointExtras& extras = {}) {
  const auto stored = read_checkpoint_descriptor(path);
  if (!(stored == bundle.arch)) {
    throw CheckpointError("checkpoint descriptor mismatch: file has " + nlohmann::json(stored).dump() +
                          ", expected " + nlohmann::json(bundle.arch).dump());
  }
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    detail::read_module(archive, "r_phi", *bundle.r_phi);
    detail::read_module(archive, "translator", *bundle.translator);
    detail::read_module(archive, "discriminator", *bundle.discriminator);
    if (extras.load) extras.load(archive);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

/// Fresh bundle with the checkpoint's own descriptor.
inline ModelBundle load_bundle(const std::filesystem::path& path) {
  ModelBundle bundle(read_checkpoint_descriptor(path));
  load_checkpoint(path, bundle);
  return bundle;
}

}  // namespace commreg
