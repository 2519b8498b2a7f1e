#include "dkd/model.hpp"

#include <cmath>
#include <set>

#include "dkd/ops.hpp"
#include "dkd/random.hpp"

namespace dkd {

namespace {

std::vector<ConvLayerSpec> reference_conv_stack(int channels) {
  std::vector<ConvLayerSpec> stack{{channels, 10, 5}};
  for (int i = 0; i < 4; ++i) {
    stack.push_back({channels, 3, 2});
  }
  for (int i = 0; i < 2; ++i) {
    stack.push_back({channels, 2, 2});
  }
  return stack;
}

void require(bool ok, const std::string& message) {
  if (!ok) {
    throw ConfigError(message);
  }
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

void EncoderConfig::validate() const {
  require(!conv_layers.empty(), "config: conv_layers must not be empty");
  for (std::size_t i = 0; i < conv_layers.size(); ++i) {
    const auto& c = conv_layers[i];
    require(c.out_channels >= 1 && c.kernel >= 1 && c.stride >= 1,
            "config: conv layer " + std::to_string(i) + " needs out_channels, kernel, stride >= 1");
  }
  require(post_conv_dim >= 1, "config: post_conv_dim must be >= 1");
  require(attention_heads >= 1, "config: attention_heads must be >= 1");
  require(post_conv_dim % attention_heads == 0,
          "config: post_conv_dim " + std::to_string(post_conv_dim) + " not divisible by attention_heads " +
              std::to_string(attention_heads));
  require(ffn_dim >= 1, "config: ffn_dim must be >= 1");
  require(num_transformer_layers >= 0, "config: num_transformer_layers must be >= 0");
  require(pos_conv.kernel >= 1 && pos_conv.groups >= 1, "config: pos_conv kernel and groups must be >= 1");
  require(post_conv_dim % pos_conv.groups == 0,
          "config: post_conv_dim " + std::to_string(post_conv_dim) + " not divisible by pos_conv groups " +
              std::to_string(pos_conv.groups));
  std::set<int> seen;
  for (int l : head_layers) {
    require(l >= 1, "config: head layer " + std::to_string(l) + " must be >= 1");
    require(seen.insert(l).second, "config: duplicate head layer " + std::to_string(l));
  }
}

std::size_t EncoderConfig::receptive_field() const {
  std::size_t r = 1;
  for (auto it = conv_layers.rbegin(); it != conv_layers.rend(); ++it) {
    r = (r - 1) * static_cast<std::size_t>(it->stride) + static_cast<std::size_t>(it->kernel);
  }
  return r;
}

std::size_t EncoderConfig::frames_for(std::size_t samples) const {
  std::size_t len = samples;
  for (const auto& c : conv_layers) {
    const auto k = static_cast<std::size_t>(c.kernel);
    if (len < k) {
      return 0;
    }
    len = (len - k) / static_cast<std::size_t>(c.stride) + 1;
  }
  return len;
}

EncoderConfig EncoderConfig::without_heads() const {
  EncoderConfig c = *this;
  c.head_layers.clear();
  return c;
}

bool EncoderConfig::same_front_end(const EncoderConfig& other) const {
  return conv_layers == other.conv_layers && post_conv_dim == other.post_conv_dim && pos_conv == other.pos_conv;
}

EncoderConfig EncoderConfig::reference_teacher() {
  EncoderConfig c;
  c.conv_layers = reference_conv_stack(512);
  c.post_conv_dim = 768;
  c.num_transformer_layers = 12;
  c.attention_heads = 12;
  c.ffn_dim = 3072;
  c.pos_conv = {128, 16};
  return c;
}

EncoderConfig EncoderConfig::reference_student(std::vector<int> head_layers) {
  EncoderConfig c = reference_teacher();
  c.num_transformer_layers = 2;
  c.head_layers = std::move(head_layers);
  return c;
}

EncoderConfig EncoderConfig::desk_teacher() {
  EncoderConfig c;
  c.conv_layers = reference_conv_stack(32);
  c.post_conv_dim = 64;
  c.num_transformer_layers = 6;
  c.attention_heads = 4;
  c.ffn_dim = 256;
  c.pos_conv = {16, 4};
  return c;
}

EncoderConfig EncoderConfig::desk_student(std::vector<int> head_layers) {
  EncoderConfig c = desk_teacher();
  c.num_transformer_layers = 2;
  c.head_layers = std::move(head_layers);
  return c;
}

nlohmann::json to_json(const EncoderConfig& config) {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& c : config.conv_layers) {
    conv.push_back({{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}});
  }
  return {{"conv_layers", conv},
          {"post_conv_dim", config.post_conv_dim},
          {"num_transformer_layers", config.num_transformer_layers},
          {"attention_heads", config.attention_heads},
          {"ffn_dim", config.ffn_dim},
          {"pos_conv", {{"kernel", config.pos_conv.kernel}, {"groups", config.pos_conv.groups}}},
          {"head_layers", config.head_layers}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  try {
    EncoderConfig c;
    for (const auto& layer : j.at("conv_layers")) {
      c.conv_layers.push_back(
          {layer.at("out_channels").get<int>(), layer.at("kernel").get<int>(), layer.at("stride").get<int>()});
    }
    c.post_conv_dim = j.at("post_conv_dim").get<int>();
    c.num_transformer_layers = j.at("num_transformer_layers").get<int>();
    c.attention_heads = j.at("attention_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.pos_conv = {j.at("pos_conv").at("kernel").get<int>(), j.at("pos_conv").at("groups").get<int>()};
    c.head_layers = j.value("head_layers", std::vector<int>{});
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
}

bool is_front_end_param(const std::string& name) { return starts_with(name, "frontend."); }
bool is_head_param(const std::string& name) { return starts_with(name, "heads."); }
std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }
std::string head_prefix(int teacher_layer) { return "heads." + std::to_string(teacher_layer) + "."; }

std::map<std::string, Shape> parameter_shapes(const EncoderConfig& config) {
  config.validate();
  std::map<std::string, Shape> shapes;
  const auto D = static_cast<std::size_t>(config.post_conv_dim);
  const auto F = static_cast<std::size_t>(config.ffn_dim);
  std::size_t cin = 1;
  for (std::size_t i = 0; i < config.conv_layers.size(); ++i) {
    const auto& c = config.conv_layers[i];
    const auto cout = static_cast<std::size_t>(c.out_channels);
    shapes["frontend.conv." + std::to_string(i) + ".weight"] = {cout, static_cast<std::size_t>(c.kernel), cin};
    if (i == 0) {
      shapes["frontend.norm.weight"] = {cout};
      shapes["frontend.norm.bias"] = {cout};
    }
    cin = cout;
  }
  shapes["projection.norm.weight"] = {cin};
  shapes["projection.norm.bias"] = {cin};
  shapes["projection.weight"] = {cin, D};
  shapes["projection.bias"] = {D};
  const auto K = static_cast<std::size_t>(config.pos_conv.kernel);
  const auto G = static_cast<std::size_t>(config.pos_conv.groups);
  shapes["pos_conv.weight"] = {D, K, D / G};
  shapes["pos_conv.bias"] = {D};
  shapes["encoder_norm.weight"] = {D};
  shapes["encoder_norm.bias"] = {D};
  auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    shapes[prefix + "weight"] = {in, out};
    shapes[prefix + "bias"] = {out};
  };
  for (int l = 1; l <= config.num_transformer_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* proj : {"q", "k", "v", "out"}) {
      linear(p + "attn." + proj + ".", D, D);
    }
    shapes[p + "attn_norm.weight"] = {D};
    shapes[p + "attn_norm.bias"] = {D};
    linear(p + "ffn.fc1.", D, F);
    linear(p + "ffn.fc2.", F, D);
    shapes[p + "ffn_norm.weight"] = {D};
    shapes[p + "ffn_norm.bias"] = {D};
  }
  for (int h : config.head_layers) {
    linear(head_prefix(h) + "fc1.", D, D);
    linear(head_prefix(h) + "fc2.", D, D);
  }
  return shapes;
}

Tensor init_parameter(const std::string& name, const Shape& shape, const EncoderConfig& config,
                      std::uint64_t seed, Dtype dtype) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n, 0.0);
  Rng rng = Rng(seed).derive(fnv1a64(name));
  if (ends_with(name, "norm.weight")) {
    std::fill(values.begin(), values.end(), 1.0);
  } else if (ends_with(name, ".bias")) {
    // zeros
  } else if (starts_with(name, "frontend.conv.")) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(shape[1] * shape[2]));
    for (auto& v : values) {
      v = rng.normal(0.0, stddev);
    }
  } else if (name == "pos_conv.weight") {
    const double stddev =
        std::sqrt(4.0 / static_cast<double>(config.pos_conv.kernel * config.post_conv_dim));
    for (auto& v : values) {
      v = rng.normal(0.0, stddev);
    }
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    for (auto& v : values) {
      v = rng.uniform(-bound, bound);
    }
  }
  return Tensor::from(shape, values, dtype);
}

Encoder build(const EncoderConfig& config, std::uint64_t seed, Dtype dtype) {
  ParameterMap params;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    params.emplace(name, init_parameter(name, shape, config, seed, dtype));
  }
  return Encoder(config, std::move(params));
}

Encoder::Encoder(EncoderConfig config, ParameterMap parameters)
    : config_(std::move(config)), params_(std::move(parameters)) {
  const auto shapes = parameter_shapes(config_);
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw ConfigError("encoder: missing parameter " + name);
    }
    if (it->second.shape() != shape) {
      throw ShapeError("encoder: parameter " + name + " has shape " + shape_string(it->second.shape()) +
                       ", config implies " + shape_string(shape));
    }
  }
  for (const auto& [name, t] : params_) {
    if (!shapes.contains(name)) {
      throw ConfigError("encoder: unexpected parameter " + name);
    }
  }
}

const Tensor& Encoder::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ConfigError("encoder: no parameter named " + name);
  }
  return it->second;
}

void Encoder::set_frozen(bool frozen) {
  frozen_ = frozen;
  if (frozen) {
    for (auto& [name, t] : params_) {
      t.set_requires_grad(false);
      t.zero_grad();
    }
  }
}

std::size_t Encoder::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) {
    n += t.numel();
  }
  return n;
}

Dtype Encoder::dtype() const { return params_.empty() ? default_dtype() : params_.begin()->second.dtype(); }

Tensor Encoder::front_end(const Tensor& wave) const {
  if (wave.rank() != 1) {
    throw RankError("encoder: waveform must be 1-D, got " + shape_string(wave.shape()));
  }
  if (wave.dim(0) < config_.receptive_field()) {
    throw LengthError("encoder: waveform of " + std::to_string(wave.dim(0)) +
                      " samples is shorter than the receptive field of " +
                      std::to_string(config_.receptive_field()));
  }
  Tensor x = ops::reshape(wave, {wave.dim(0), 1});
  for (std::size_t i = 0; i < config_.conv_layers.size(); ++i) {
    const auto& spec = config_.conv_layers[i];
    x = ops::conv1d(x, param("frontend.conv." + std::to_string(i) + ".weight"),
                    static_cast<std::size_t>(spec.stride));
    if (i == 0) {
      x = ops::group_norm(x, param("frontend.norm.weight"), param("frontend.norm.bias"),
                          static_cast<std::size_t>(spec.out_channels));
    }
    x = ops::gelu(x);
  }
  return x;
}

Tensor Encoder::linear(const Tensor& x, const std::string& prefix) const {
  return ops::add(ops::matmul(x, param(prefix + "weight")), param(prefix + "bias"));
}

Tensor Encoder::attention(const Tensor& x, const std::string& prefix) const {
  const auto D = static_cast<std::size_t>(config_.post_conv_dim);
  const auto H = static_cast<std::size_t>(config_.attention_heads);
  const std::size_t dh = D / H;
  const Tensor q = linear(x, prefix + "q.");
  const Tensor k = linear(x, prefix + "k.");
  const Tensor v = linear(x, prefix + "v.");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    const Tensor qh = ops::slice(q, 1, h * dh, dh);
    const Tensor kh = ops::slice(k, 1, h * dh, dh);
    const Tensor vh = ops::slice(v, 1, h * dh, dh);
    const Tensor weights = ops::softmax(ops::scale(ops::matmul(qh, kh, true), scale));
    heads.push_back(ops::matmul(weights, vh));
  }
  const Tensor context = H == 1 ? heads.front() : ops::concat(heads, 1);
  return linear(context, prefix + "out.");
}

EncoderOutput Encoder::forward_from_front_end(const Tensor& conv_features) const {
  const auto D = static_cast<std::size_t>(config_.post_conv_dim);
  Tensor x = ops::layer_norm(conv_features, param("projection.norm.weight"), param("projection.norm.bias"));
  x = linear(x, "projection.");
  const std::size_t frames = x.dim(0);

  // Same-length positional conv: pad K/2 zeros each side; an even kernel
  // yields one surplus trailing frame, which is dropped.
  const auto K = static_cast<std::size_t>(config_.pos_conv.kernel);
  const std::size_t pad = K / 2;
  Tensor padded = x;
  if (pad > 0) {
    const Tensor zeros = Tensor::zeros({pad, D}, x.dtype());
    padded = ops::concat({zeros, x, zeros}, 0);
  }
  Tensor pos = ops::conv1d(padded, param("pos_conv.weight"), 1, static_cast<std::size_t>(config_.pos_conv.groups));
  pos = ops::add(pos, param("pos_conv.bias"));
  if (pos.dim(0) != frames) {
    pos = ops::slice(pos, 0, 0, frames);
  }
  x = ops::add(x, ops::gelu(pos));
  x = ops::layer_norm(x, param("encoder_norm.weight"), param("encoder_norm.bias"));

  EncoderOutput out;
  out.layers.push_back({x, 0});
  for (int l = 1; l <= config_.num_transformer_layers; ++l) {
    const std::string p = layer_prefix(l);
    x = ops::layer_norm(ops::add(x, attention(x, p + "attn.")), param(p + "attn_norm.weight"),
                        param(p + "attn_norm.bias"));
    const Tensor ffn = linear(ops::gelu(linear(x, p + "ffn.fc1.")), p + "ffn.fc2.");
    x = ops::layer_norm(ops::add(x, ffn), param(p + "ffn_norm.weight"), param(p + "ffn_norm.bias"));
    out.layers.push_back({x, l});
  }
  for (int h : config_.head_layers) {
    const std::string p = head_prefix(h);
    out.heads.emplace(h, FeatureMap{linear(ops::gelu(linear(x, p + "fc1.")), p + "fc2."), h});
  }
  return out;
}

ParamCount count_params(const EncoderConfig& config) {
  config.validate();
  ParamCount pc;
  const std::int64_t D = config.post_conv_dim;
  const std::int64_t F = config.ffn_dim;
  std::int64_t conv = 0;
  std::int64_t cin = 1;
  for (std::size_t i = 0; i < config.conv_layers.size(); ++i) {
    const auto& c = config.conv_layers[i];
    conv += static_cast<std::int64_t>(c.out_channels) * c.kernel * cin;
    if (i == 0) {
      conv += 2LL * c.out_channels;
    }
    cin = c.out_channels;
  }
  pc.breakdown["frontend_conv"] = conv;
  pc.breakdown["feature_projection"] = 2 * cin + cin * D + D;
  pc.breakdown["pos_conv"] = D * config.pos_conv.kernel * (D / config.pos_conv.groups) + D;
  pc.breakdown["encoder_norm"] = 2 * D;
  const std::int64_t per_layer = 4 * (D * D + D) + 2 * D + (D * F + F) + (F * D + D) + 2 * D;
  pc.breakdown["transformer"] = per_layer * config.num_transformer_layers;
  pc.breakdown["heads"] = static_cast<std::int64_t>(config.head_layers.size()) * 2 * (D * D + D);
  for (const auto& [k, v] : pc.breakdown) {
    pc.total += v;
  }
  return pc;
}

FlopCount count_flops(const EncoderConfig& config, std::size_t samples) {
  config.validate();
  if (samples < config.receptive_field()) {
    throw LengthError("count_flops: " + std::to_string(samples) + " samples is below the receptive field of " +
                      std::to_string(config.receptive_field()));
  }
  FlopCount fc;
  std::int64_t len = static_cast<std::int64_t>(samples);
  std::int64_t cin = 1;
  std::int64_t conv = 0;
  for (const auto& c : config.conv_layers) {
    len = (len - c.kernel) / c.stride + 1;
    conv += len * c.out_channels * c.kernel * cin;
    cin = c.out_channels;
  }
  const std::int64_t T = len;
  const std::int64_t D = config.post_conv_dim;
  const std::int64_t F = config.ffn_dim;
  const std::int64_t K = config.pos_conv.kernel;
  const std::int64_t L = config.num_transformer_layers;
  fc.terms["frontend_conv"] = conv;
  fc.terms["feature_projection"] = T * cin * D;
  fc.terms["pos_conv"] = (T + 2 * (K / 2) - K + 1) * D * K * (D / config.pos_conv.groups);
  fc.terms["attention_projection"] = L * 4 * T * D * D;
  fc.terms["attention_scores"] = L * 2 * T * T * D;
  fc.terms["ffn"] = L * 2 * T * D * F;
  fc.terms["heads"] = static_cast<std::int64_t>(config.head_layers.size()) * 2 * T * D * D;
  for (const auto& [k, v] : fc.terms) {
    fc.total += v;
  }
  return fc;
}

}  // namespace dkd
