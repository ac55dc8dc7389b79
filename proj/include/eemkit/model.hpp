#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "eemkit/digest.hpp"
#include "eemkit/nn.hpp"
#include "eemkit/preprocess.hpp"

namespace eemkit {

// --- Backbone contract --------------------------------------------------------

enum class BackboneKind { pretrained_mobilenet_v2, compact_test_cnn };

inline std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::pretrained_mobilenet_v2 ? "pretrained_mobilenet_v2" : "compact_test_cnn";
}

inline BackboneKind backbone_kind_from_string(const std::string& name) {
  if (name == "pretrained_mobilenet_v2" || name == "pretrained") return BackboneKind::pretrained_mobilenet_v2;
  if (name == "compact_test_cnn" || name == "test") return BackboneKind::compact_test_cnn;
  throw Error("unknown backbone '" + name + "' (expected pretrained|test)");
}

inline constexpr int kMobileNetV2LayerCount = 154;
inline constexpr int kMobileNetV2FeatureWidth = 1280;
inline constexpr int kMobileNetV2DefaultFrozenPrefix = 100;
inline constexpr const char* kMobileNetWeightsEnvVar = "EEMKIT_MOBILENETV2_WEIGHTS";

// Compact trainable-from-scratch backbone for desk-scale runs:
// five stride-reducing conv blocks, 32-wide feature vector.
inline constexpr int kCompactLayerCount = 10;  // conv/relu pairs in the canonical layer list
inline constexpr int kCompactFeatureWidth = 32;
inline constexpr int kCompactDefaultFrozenPrefix = 4;  // freeze conv1+conv2 during fine-tuning

struct BackboneSpec {
  BackboneKind kind = BackboneKind::compact_test_cnn;
  int n_layers = kCompactLayerCount;
  std::string pretrained_source = "random";  // "imagenet" or "random"

  static BackboneSpec pretrained() {
    return BackboneSpec{BackboneKind::pretrained_mobilenet_v2, kMobileNetV2LayerCount, "imagenet"};
  }
  static BackboneSpec compact() { return BackboneSpec{BackboneKind::compact_test_cnn, kCompactLayerCount, "random"}; }
};

// Regression head, fixed: global average pooling -> dropout(0.2) ->
// dense 32 (relu) -> dense 16 (relu) -> dense 8 (relu) -> dense 1 (identity).
struct HeadSpec {
  static constexpr double kDropoutRate = 0.2;
  static constexpr int kWidths[4] = {32, 16, 8, 1};

  static std::size_t param_count(int feature_width) {
    std::size_t total = 0;
    int in = feature_width;
    for (int w : kWidths) {
      total += static_cast<std::size_t>(in) * w + w;
      in = w;
    }
    return total;
  }
};

enum class PolicyMode { head_only, partial_unfreeze };

struct TrainablePolicy {
  PolicyMode mode = PolicyMode::head_only;
  int frozen_prefix_layers = 0;  // meaningful for partial_unfreeze

  static TrainablePolicy head_only() { return TrainablePolicy{PolicyMode::head_only, 0}; }
  static TrainablePolicy partial_unfreeze(int frozen_prefix) {
    return TrainablePolicy{PolicyMode::partial_unfreeze, frozen_prefix};
  }
};

inline std::string to_string(const TrainablePolicy& p) {
  return p.mode == PolicyMode::head_only ? std::string("head_only")
                                         : "partial_unfreeze(" + std::to_string(p.frozen_prefix_layers) + ")";
}

struct LayerInfo {
  std::string name;
  std::size_t param_count = 0;
};

struct TrainableCensus {
  std::size_t n_trainable = 0;
  std::size_t n_frozen = 0;
};

// Per-layer trainability for a canonical sequential backbone layer list.
// partial_unfreeze(p) freezes layers [0, p) and trains the rest.
inline std::vector<bool> trainable_mask(const std::vector<LayerInfo>& backbone_layers, const TrainablePolicy& policy) {
  const int n = static_cast<int>(backbone_layers.size());
  if (policy.mode == PolicyMode::head_only) return std::vector<bool>(backbone_layers.size(), false);
  if (policy.frozen_prefix_layers < 0 || policy.frozen_prefix_layers > n)
    throw Error("frozen_prefix_layers " + std::to_string(policy.frozen_prefix_layers) + " outside [0, " +
                std::to_string(n) + "]");
  std::vector<bool> mask(backbone_layers.size(), false);
  for (int i = policy.frozen_prefix_layers; i < n; ++i) mask[static_cast<std::size_t>(i)] = true;
  return mask;
}

// Parameter census: head parameters are always trainable.
inline TrainableCensus census_for_policy(const std::vector<LayerInfo>& backbone_layers, std::size_t head_params,
                                         const TrainablePolicy& policy) {
  auto mask = trainable_mask(backbone_layers, policy);
  TrainableCensus census;
  census.n_trainable = head_params;
  for (std::size_t i = 0; i < backbone_layers.size(); ++i) {
    if (mask[i])
      census.n_trainable += backbone_layers[i].param_count;
    else
      census.n_frozen += backbone_layers[i].param_count;
  }
  return census;
}

// --- Predictor interface -------------------------------------------------------

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual double predict(const PreprocessedImage& image) const = 0;

  virtual std::vector<double> predict_batch(const std::vector<const PreprocessedImage*>& images) const {
    std::vector<double> out;
    out.reserve(images.size());
    for (const auto* img : images) {
      if (img == nullptr) throw Error("null image in batch");
      out.push_back(predict(*img));
    }
    return out;
  }
};

// --- Compact CNN + head ---------------------------------------------------------

namespace detail {

struct ConvShape {
  int in_c, out_c, k, stride, pad;
};

// conv1 160->40, then 40->20->10->5, final 3x3 keeps 5x5.
inline const std::vector<ConvShape>& compact_conv_shapes() {
  static const std::vector<ConvShape> shapes = {
      {3, 8, 5, 4, 2}, {8, 16, 3, 2, 1}, {16, 24, 3, 2, 1}, {24, 32, 3, 2, 1}, {32, 32, 3, 1, 1},
  };
  return shapes;
}

inline Tensor3 image_to_tensor(const PreprocessedImage& img) {
  validate_image(img);
  Tensor3 t;
  t.resize(kImageChannels, kImageSize, kImageSize);
  for (Eigen::Index i = 0; i < t.v.size(); ++i) t.v[i] = static_cast<float>(img.pixels[static_cast<std::size_t>(i)]) / 255.0f;
  return t;
}

struct ForwardCache {
  Tensor3 input;
  std::vector<MatF> patches;      // per conv
  std::vector<Tensor3> conv_out;  // pre-relu
  std::vector<Tensor3> relu_out;  // post-relu
  VecF features;                  // after GAP
  VecF dropout_mask;              // empty in inference mode
  VecF dropped;                   // features after dropout
  std::vector<VecF> dense_pre;    // pre-activation per dense layer
  std::vector<VecF> dense_post;   // post-activation (input to next layer)
};

}  // namespace detail

// Regression model: backbone behind the BackboneSpec contract plus the fixed
// dense head. Only the compact test backbone has a runtime in this build; the
// pretrained MobileNetV2 path requires an exported weights archive and fails
// construction with acquisition instructions when it is absent.
class PredictorModel : public Predictor {
 public:
  PredictorModel() = default;

  const BackboneSpec& backbone_spec() const { return spec_; }
  const TrainablePolicy& policy() const { return policy_; }
  const std::vector<LayerInfo>& backbone_layers() const { return layer_table_; }
  int feature_width() const { return kCompactFeatureWidth; }
  std::uint64_t build_seed() const { return seed_; }

  std::size_t head_param_count() const {
    return dense_[0].param_count() + dense_[1].param_count() + dense_[2].param_count() + dense_[3].param_count();
  }

  TrainableCensus census() const { return census_for_policy(layer_table_, head_param_count(), policy_); }

  void set_trainable(const TrainablePolicy& policy) {
    trainable_mask(layer_table_, policy);  // validates the range
    policy_ = policy;
    // A policy change starts a fresh optimisation phase.
    adam_clock_ = 0;
    for (auto& conv : convs_) {
      conv.aW.reset();
      conv.ab.reset();
    }
    for (auto& d : dense_) {
      d.aW.reset();
      d.ab.reset();
    }
  }

  double predict(const PreprocessedImage& image) const override {
    detail::ForwardCache cache;
    return forward(image, cache, /*train_mode=*/false, nullptr);
  }

  // Backbone features for one image; used to cache features while the
  // backbone is fully frozen.
  VecF extract_features(const PreprocessedImage& image) const {
    detail::ForwardCache cache;
    backbone_forward(detail::image_to_tensor(image), cache);
    return cache.features;
  }

  bool backbone_frozen() const {
    auto mask = trainable_mask(layer_table_, policy_);
    for (bool t : mask)
      if (t) return false;
    return true;
  }

  // One optimiser step on a mini-batch; returns the batch MSE computed from
  // the forward pass used for the gradients.
  double train_batch(const std::vector<const PreprocessedImage*>& images, const std::vector<double>& targets,
                     std::mt19937_64& dropout_rng, const AdamHyper& hp) {
    if (images.empty() || images.size() != targets.size()) throw Error("train_batch needs matching images/targets");
    zero_grads();
    const double inv_n = 1.0 / static_cast<double>(images.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      detail::ForwardCache cache;
      double pred = forward(*images[i], cache, /*train_mode=*/true, &dropout_rng);
      double err = pred - targets[i];
      loss += err * err * inv_n;
      backward(cache, static_cast<float>(2.0 * err * inv_n));
    }
    apply_adam(hp);
    return loss;
  }

  // Same step with precomputed backbone features (frozen-backbone fast path).
  double train_batch_on_features(const MatF& features, const std::vector<double>& targets,
                                 std::mt19937_64& dropout_rng, const AdamHyper& hp) {
    if (features.cols() != static_cast<Eigen::Index>(targets.size())) throw Error("features/targets size mismatch");
    if (!backbone_frozen()) throw Error("feature-cached training requires a fully frozen backbone");
    zero_grads();
    const double inv_n = 1.0 / static_cast<double>(targets.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      detail::ForwardCache cache;
      cache.features = features.col(static_cast<Eigen::Index>(i));
      double pred = head_forward(cache, /*train_mode=*/true, &dropout_rng);
      double err = pred - targets[i];
      loss += err * err * inv_n;
      head_backward(cache, static_cast<float>(2.0 * err * inv_n));
    }
    apply_adam(hp);
    return loss;
  }

  double mse_on_features(const MatF& features, const std::vector<double>& targets) const {
    double loss = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      detail::ForwardCache cache;
      cache.features = features.col(static_cast<Eigen::Index>(i));
      double pred = head_forward(cache, /*train_mode=*/false, nullptr);
      double err = pred - targets[i];
      loss += err * err / static_cast<double>(targets.size());
    }
    return loss;
  }

  // Visits every parameter tensor in a stable order (serialization, digests).
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      fn("backbone.conv" + std::to_string(i + 1) + ".W", convs_[i].W);
      fn("backbone.conv" + std::to_string(i + 1) + ".b", convs_[i].b);
    }
    for (std::size_t i = 0; i < dense_.size(); ++i) {
      fn("head.dense" + std::to_string(i + 1) + ".W", dense_[i].W);
      fn("head.dense" + std::to_string(i + 1) + ".b", dense_[i].b);
    }
  }

  template <typename Fn>
  void for_each_tensor_mut(Fn&& fn) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      fn("backbone.conv" + std::to_string(i + 1) + ".W", convs_[i].W);
      fn("backbone.conv" + std::to_string(i + 1) + ".b", convs_[i].b);
    }
    for (std::size_t i = 0; i < dense_.size(); ++i) {
      fn("head.dense" + std::to_string(i + 1) + ".W", dense_[i].W);
      fn("head.dense" + std::to_string(i + 1) + ".b", dense_[i].b);
    }
  }

  std::string weight_digest() const {
    Fnv1a64 digest;
    for_each_tensor([&](const std::string& name, const MatF& t) {
      digest.update(name);
      digest.update(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
    });
    return digest.hex();
  }

  std::string backbone_digest() const {
    Fnv1a64 digest;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      digest.update(convs_[i].W.data(), static_cast<std::size_t>(convs_[i].W.size()) * sizeof(float));
      digest.update(convs_[i].b.data(), static_cast<std::size_t>(convs_[i].b.size()) * sizeof(float));
    }
    return digest.hex();
  }

  // Digest over the tensors frozen under the current policy.
  std::string frozen_digest() const {
    auto mask = trainable_mask(layer_table_, policy_);
    Fnv1a64 digest;
    for (std::size_t j = 0; j < convs_.size(); ++j) {
      if (mask[2 * j]) continue;
      digest.update(convs_[j].W.data(), static_cast<std::size_t>(convs_[j].W.size()) * sizeof(float));
      digest.update(convs_[j].b.data(), static_cast<std::size_t>(convs_[j].b.size()) * sizeof(float));
    }
    return digest.hex();
  }

  friend PredictorModel build_regressor(const BackboneSpec& spec, std::uint64_t seed);

 private:
  void init_compact(std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x6865616421ULL));  // distinct stream for weight init
    convs_.clear();
    layer_table_.clear();
    int idx = 1;
    for (const auto& s : detail::compact_conv_shapes()) {
      Conv2d conv;
      conv.init(s.in_c, s.out_c, s.k, s.stride, s.pad, rng);
      layer_table_.push_back({"conv" + std::to_string(idx), conv.param_count()});
      layer_table_.push_back({"relu" + std::to_string(idx), 0});
      convs_.push_back(std::move(conv));
      ++idx;
    }
    int in = kCompactFeatureWidth;
    for (std::size_t i = 0; i < 4; ++i) {
      dense_[i].init(in, HeadSpec::kWidths[i], rng);
      in = HeadSpec::kWidths[i];
    }
  }

  void backbone_forward(Tensor3 input, detail::ForwardCache& cache) const {
    cache.input = std::move(input);
    cache.patches.resize(convs_.size());
    cache.conv_out.resize(convs_.size());
    cache.relu_out.resize(convs_.size());
    const Tensor3* x = &cache.input;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].forward(*x, cache.conv_out[i], cache.patches[i]);
      relu_forward(cache.conv_out[i], cache.relu_out[i]);
      x = &cache.relu_out[i];
    }
    // Global average pooling.
    const Tensor3& top = cache.relu_out.back();
    cache.features.setZero(top.c);
    const int plane = top.h * top.w;
    for (int c = 0; c < top.c; ++c) {
      float sum = 0.0f;
      for (int p = 0; p < plane; ++p) sum += top.v[static_cast<Eigen::Index>(c * plane + p)];
      cache.features[c] = sum / static_cast<float>(plane);
    }
  }

  double head_forward(detail::ForwardCache& cache, bool train_mode, std::mt19937_64* dropout_rng) const {
    const auto F = cache.features.size();
    if (train_mode) {
      if (dropout_rng == nullptr) throw Error("training forward needs a dropout RNG");
      cache.dropout_mask.resize(F);
      std::uniform_real_distribution<float> unit(0.0f, 1.0f);
      const float keep_scale = 1.0f / (1.0f - static_cast<float>(HeadSpec::kDropoutRate));
      for (Eigen::Index i = 0; i < F; ++i)
        cache.dropout_mask[i] = unit(*dropout_rng) < static_cast<float>(HeadSpec::kDropoutRate) ? 0.0f : keep_scale;
      cache.dropped = cache.features.cwiseProduct(cache.dropout_mask);
    } else {
      cache.dropped = cache.features;
    }
    cache.dense_pre.resize(4);
    cache.dense_post.resize(4);
    const VecF* x = &cache.dropped;
    for (std::size_t i = 0; i < 4; ++i) {
      cache.dense_pre[i] = dense_[i].forward(*x);
      cache.dense_post[i] = (i + 1 < 4) ? cache.dense_pre[i].cwiseMax(0.0f) : cache.dense_pre[i];
      x = &cache.dense_post[i];
    }
    return static_cast<double>(cache.dense_post[3][0]);
  }

  double forward(const PreprocessedImage& image, detail::ForwardCache& cache, bool train_mode,
                 std::mt19937_64* dropout_rng) const {
    backbone_forward(detail::image_to_tensor(image), cache);
    return head_forward(cache, train_mode, dropout_rng);
  }

  // Gradient of the head; returns d(loss)/d(features).
  VecF head_backward(const detail::ForwardCache& cache, float dpred) {
    VecF grad(1);
    grad[0] = dpred;
    for (int i = 3; i >= 0; --i) {
      const VecF& input = (i == 0) ? cache.dropped : cache.dense_post[static_cast<std::size_t>(i - 1)];
      grad = dense_[static_cast<std::size_t>(i)].backward(grad, input);
      if (i > 0) grad = grad.cwiseProduct(
                     (cache.dense_pre[static_cast<std::size_t>(i - 1)].array() > 0.0f).cast<float>().matrix());
    }
    if (cache.dropout_mask.size() > 0) grad = grad.cwiseProduct(cache.dropout_mask);
    return grad;
  }

  void backward(const detail::ForwardCache& cache, float dpred) {
    VecF dfeat = head_backward(cache, dpred);
    auto mask = trainable_mask(layer_table_, policy_);
    int shallowest = -1;
    for (std::size_t j = 0; j < convs_.size(); ++j)
      if (mask[2 * j]) {
        shallowest = static_cast<int>(j);
        break;
      }
    if (shallowest < 0) return;  // head-only phase

    // GAP backward: spread each channel gradient uniformly over its plane.
    const Tensor3& top = cache.relu_out.back();
    Tensor3 grad;
    grad.resize(top.c, top.h, top.w);
    const int plane = top.h * top.w;
    for (int c = 0; c < top.c; ++c) {
      const float g = dfeat[c] / static_cast<float>(plane);
      for (int p = 0; p < plane; ++p) grad.v[static_cast<Eigen::Index>(c * plane + p)] = g;
    }

    Tensor3 scratch;
    for (int j = static_cast<int>(convs_.size()) - 1; j >= shallowest; --j) {
      const auto ju = static_cast<std::size_t>(j);
      relu_backward(grad, cache.conv_out[ju], scratch);
      const Tensor3& input = (j == 0) ? cache.input : cache.relu_out[ju - 1];
      const bool need_dx = j > shallowest;
      convs_[ju].backward(scratch, cache.patches[ju], input, need_dx ? &grad : nullptr, need_dx);
    }
  }

  void zero_grads() {
    for (auto& c : convs_) c.zero_grads();
    for (auto& d : dense_) d.zero_grads();
  }

  void apply_adam(const AdamHyper& hp) {
    ++adam_clock_;
    auto mask = trainable_mask(layer_table_, policy_);
    for (std::size_t j = 0; j < convs_.size(); ++j)
      if (mask[2 * j]) convs_[j].adam_step(hp, adam_clock_);
    for (auto& d : dense_) d.adam_step(hp, adam_clock_);
  }

  BackboneSpec spec_ = BackboneSpec::compact();
  TrainablePolicy policy_ = TrainablePolicy::head_only();
  std::vector<Conv2d> convs_;
  std::vector<LayerInfo> layer_table_;
  std::array<Dense, 4> dense_;
  long adam_clock_ = 0;
  std::uint64_t seed_ = 0;
};

// Builds backbone + head with the initial head_only policy. The pretrained
// backbone needs its exported ImageNet weights archive; without one the error
// says how to provide it.
inline PredictorModel build_regressor(const BackboneSpec& spec, std::uint64_t seed) {
  if (spec.kind == BackboneKind::pretrained_mobilenet_v2) {
    const char* path = std::getenv(kMobileNetWeightsEnvVar);
    std::string status = path ? std::string("$") + kMobileNetWeightsEnvVar + " points at '" + path +
                                    "', but this build does not bundle the MobileNetV2 runtime needed to load it"
                              : std::string("$") + kMobileNetWeightsEnvVar + " is not set and this build does not "
                                    "bundle the MobileNetV2 runtime";
    throw MissingWeightsError(
        "pretrained MobileNetV2 backbone unavailable: " + status +
        ". To run the full-scale protocol, export the ImageNet-pretrained MobileNetV2 weights from a deep-learning "
        "framework, set " + std::string(kMobileNetWeightsEnvVar) + " to the archive, and link a backbone runtime "
        "behind the Backbone contract (README, 'Pretrained backbone'). Desk-scale work uses --backbone test.");
  }
  if (spec.n_layers != kCompactLayerCount)
    throw Error("compact_test_cnn has " + std::to_string(kCompactLayerCount) + " layers, spec says " +
                std::to_string(spec.n_layers));
  PredictorModel model;
  model.spec_ = spec;
  model.seed_ = seed;
  model.init_compact(seed);
  model.policy_ = TrainablePolicy::head_only();
  return model;
}

// Spec-facing wrappers.
inline PredictorModel set_trainable(PredictorModel model, const TrainablePolicy& policy) {
  model.set_trainable(policy);
  return model;
}

inline std::vector<double> predict_batch(const Predictor& model, const std::vector<const PreprocessedImage*>& images) {
  return model.predict_batch(images);
}

// --- Weights serialization ------------------------------------------------------

inline constexpr char kWeightsMagic[8] = {'E', 'E', 'M', 'K', 'P', 'T', '1', '\n'};

inline void save_weights(const PredictorModel& model, std::ostream& out) {
  out.write(kWeightsMagic, sizeof(kWeightsMagic));
  std::uint32_t count = 0;
  model.for_each_tensor([&](const std::string&, const MatF&) { ++count; });
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  model.for_each_tensor([&](const std::string& name, const MatF& t) {
    auto name_len = static_cast<std::uint32_t>(name.size());
    auto rows = static_cast<std::uint32_t>(t.rows());
    auto cols = static_cast<std::uint32_t>(t.cols());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size()) * sizeof(float));
  });
  if (!out) throw Error("weights write failed");
}

inline void load_weights(PredictorModel& model, std::istream& in) {
  char magic[sizeof(kWeightsMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0) throw Error("not a weights blob (bad magic)");
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::uint32_t seen = 0;
  model.for_each_tensor_mut([&](const std::string& name, MatF& t) {
    std::uint32_t name_len = 0, rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
    in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
    if (!in) throw Error("weights blob truncated at tensor '" + name + "'");
    if (stored != name || rows != static_cast<std::uint32_t>(t.rows()) || cols != static_cast<std::uint32_t>(t.cols()))
      throw Error("weights blob tensor '" + stored + "' (" + std::to_string(rows) + "x" + std::to_string(cols) +
                  ") does not match model tensor '" + name + "'");
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size()) * sizeof(float));
    ++seen;
  });
  if (!in || seen != count) throw Error("weights blob tensor count mismatch");
}

}  // namespace eemkit
