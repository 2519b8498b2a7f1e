#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dkd/tensor.hpp"
#include "json.hpp"

namespace dkd {

struct ConvLayerSpec {
  int out_channels = 512;
  int kernel = 3;
  int stride = 2;

  bool operator==(const ConvLayerSpec&) const = default;
};

struct PosConvSpec {
  int kernel = 128;
  int groups = 16;

  bool operator==(const PosConvSpec&) const = default;
};

// Architecture of a teacher or student encoder: waveform conv stack, feature
// projection to width `post_conv_dim`, convolutional positional encoding and a
// post-norm transformer stack. `head_layers` lists the teacher layers the
// prediction heads regress; empty means no heads.
struct EncoderConfig {
  std::vector<ConvLayerSpec> conv_layers;
  int post_conv_dim = 768;
  int num_transformer_layers = 12;
  int attention_heads = 12;
  int ffn_dim = 3072;
  PosConvSpec pos_conv;
  std::vector<int> head_layers;

  bool operator==(const EncoderConfig&) const = default;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool has_heads() const { return !head_layers.empty(); }
  // Smallest waveform length producing one frame.
  std::size_t receptive_field() const;
  // Frames produced by a waveform of `samples` samples.
  std::size_t frames_for(std::size_t samples) const;
  // Same config without heads.
  EncoderConfig without_heads() const;
  // True when conv stack, projection width and positional conv agree.
  bool same_front_end(const EncoderConfig& other) const;

  // 7-layer 512-channel conv stack, D=768, 12 layers, 12 heads, ffn 3072.
  static EncoderConfig reference_teacher();
  // Reference front-end with a 2-layer transformer.
  static EncoderConfig reference_student(std::vector<int> head_layers = {});
  // Laptop-scale teacher: reference conv geometry at 32 channels, D=64,
  // 6 layers.
  static EncoderConfig desk_teacher();
  static EncoderConfig desk_student(std::vector<int> head_layers = {});
};

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// One layer's output sequence: frames is T x D. Layer 0 is the input to the
// first transformer block.
struct FeatureMap {
  Tensor frames;
  int layer_index = 0;

  std::size_t num_frames() const { return frames.dim(0); }
  std::size_t width() const { return frames.dim(1); }
};

struct EncoderOutput {
  // Layers 0..num_transformer_layers, in order.
  std::vector<FeatureMap> layers;
  // Head predictions keyed by the teacher layer they regress.
  std::map<int, FeatureMap> heads;
};

using ParameterMap = std::map<std::string, Tensor>;

class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderConfig config, ParameterMap parameters);

  const EncoderConfig& config() const { return config_; }
  const ParameterMap& parameters() const { return params_; }
  ParameterMap& parameters() { return params_; }
  const Tensor& param(const std::string& name) const;

  bool frozen() const { return frozen_; }
  // A frozen encoder holds no trainable tensors.
  void set_frozen(bool frozen);

  // Conv stack output, [frames, conv channels].
  Tensor front_end(const Tensor& wave) const;
  EncoderOutput forward_from_front_end(const Tensor& conv_features) const;
  EncoderOutput forward(const Tensor& wave) const { return forward_from_front_end(front_end(wave)); }

  std::size_t num_scalars() const;
  Dtype dtype() const;

 private:
  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor attention(const Tensor& x, const std::string& prefix) const;

  EncoderConfig config_;
  ParameterMap params_;
  bool frozen_ = false;
};

// Names of parameters belonging to the conv stack and its group norm.
bool is_front_end_param(const std::string& name);
bool is_head_param(const std::string& name);
// Prefix of transformer block `layer` (1-based), e.g. "layers.2.".
std::string layer_prefix(int layer);
std::string head_prefix(int teacher_layer);

// Parameter names and shapes implied by a config, in name order.
std::map<std::string, Shape> parameter_shapes(const EncoderConfig& config);

// Deterministic: identical (config, seed) gives bitwise identical tensors.
// Each tensor draws from a stream keyed by its name, so the values of a
// tensor do not depend on which other tensors exist.
Encoder build(const EncoderConfig& config, std::uint64_t seed, Dtype dtype = Dtype::f32);
// Fresh value for one named parameter, identical to what build() would give.
Tensor init_parameter(const std::string& name, const Shape& shape, const EncoderConfig& config,
                      std::uint64_t seed, Dtype dtype);

struct ParamCount {
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> breakdown;
};

// Analytic count of trainable scalars; heads included only when configured.
ParamCount count_params(const EncoderConfig& config);

struct FlopCount {
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> terms;
};

// Multiply-accumulates of one forward pass over `samples` input samples.
FlopCount count_flops(const EncoderConfig& config, std::size_t samples);

}  // namespace dkd
