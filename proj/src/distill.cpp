#include "dkd/distill.hpp"

#include <algorithm>
#include <set>

#include "dkd/ops.hpp"

namespace dkd {

void DistillSpec::validate(int teacher_layers) const {
  if (predicted_layers.empty()) {
    throw SpecError("distill spec: predicted layer set is empty");
  }
  std::set<int> seen;
  for (int l : predicted_layers) {
    if (l < 1 || l > teacher_layers) {
      throw SpecError("distill spec: layer " + std::to_string(l) + " outside [1, " + std::to_string(teacher_layers) +
                      "]");
    }
    if (!seen.insert(l).second) {
      throw SpecError("distill spec: duplicate layer " + std::to_string(l));
    }
  }
  if (!(lambda >= 0.0)) {
    throw SpecError("distill spec: lambda must be >= 0");
  }
}

nlohmann::json to_json(const DistillSpec& spec) {
  return {{"predicted_layers", spec.predicted_layers},
          {"lambda", spec.lambda},
          {"use_cosine", spec.use_cosine},
          {"reduction", spec.reduction == LossReduction::mean_over_time ? "mean_over_time" : "sum_over_time"},
          {"predict_with_hidden", spec.predict_with_hidden}};
}

DistillSpec distill_spec_from_json(const nlohmann::json& j) {
  try {
    DistillSpec s;
    s.predicted_layers = j.at("predicted_layers").get<std::vector<int>>();
    s.lambda = j.value("lambda", 1.0);
    s.use_cosine = j.value("use_cosine", true);
    const std::string r = j.value("reduction", std::string("mean_over_time"));
    if (r != "mean_over_time" && r != "sum_over_time") {
      throw SpecError("distill spec: unknown reduction " + r);
    }
    s.reduction = r == "mean_over_time" ? LossReduction::mean_over_time : LossReduction::sum_over_time;
    s.predict_with_hidden = j.value("predict_with_hidden", false);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("distill spec: ") + e.what());
  }
}

DistillSpec validate_layer_set(const std::vector<int>& layers, int teacher_layers) {
  DistillSpec spec;
  spec.predicted_layers = layers;
  std::sort(spec.predicted_layers.begin(), spec.predicted_layers.end());
  spec.validate(teacher_layers);
  return spec;
}

LossBreakdown distill_loss(const std::map<int, FeatureMap>& student, const std::map<int, FeatureMap>& teacher,
                           const DistillSpec& spec) {
  if (spec.predicted_layers.empty()) {
    throw SpecError("distill_loss: no predicted layers");
  }
  LossBreakdown out;
  out.lambda = spec.lambda;
  Tensor total;
  for (int l : spec.predicted_layers) {
    auto s = student.find(l);
    auto t = teacher.find(l);
    if (s == student.end() || t == teacher.end()) {
      throw SpecError("distill_loss: layer " + std::to_string(l) + " missing from " +
                      (s == student.end() ? "student" : "teacher") + " features");
    }
    const Tensor& h = s->second.frames;
    // Teacher targets never receive gradient.
    const Tensor target = t->second.frames.detach();
    if (h.shape() != target.shape() || h.rank() != 2) {
      throw ShapeError("distill_loss: layer " + std::to_string(l) + " student " + shape_string(h.shape()) +
                       " vs teacher " + shape_string(target.shape()));
    }
    const double frames = static_cast<double>(h.dim(0));
    const double width = static_cast<double>(h.dim(1));
    const double reduce = spec.reduction == LossReduction::mean_over_time ? 1.0 / frames : 1.0;

    const Tensor l1 = ops::scale(ops::sum(ops::l1_distance(h, target)), reduce / width);
    Tensor cos;
    Tensor layer_total = l1;
    if (spec.use_cosine) {
      const Tensor nls = ops::log(ops::sigmoid(ops::cosine_similarity(h, target)));
      cos = ops::scale(ops::sum(nls), -reduce);
      layer_total = ops::add(l1, ops::scale(cos, spec.lambda));
    } else {
      cos = Tensor::zeros({1}, h.dtype());
    }
    out.l1.emplace(l, l1);
    out.cosine.emplace(l, cos);
    total = total.defined() ? ops::add(total, layer_total) : layer_total;
  }
  out.total = total;
  return out;
}

std::map<int, FeatureMap> student_predictions(const EncoderOutput& out, const DistillSpec& spec) {
  if (!spec.predict_with_hidden) {
    return out.heads;
  }
  if (spec.predicted_layers.size() > out.layers.size()) {
    throw SpecError("predict-with-hidden: " + std::to_string(spec.predicted_layers.size()) +
                    " predicted layers but the student exposes only " + std::to_string(out.layers.size()));
  }
  // The deepest predicted layer pairs with the last hidden layer.
  std::map<int, FeatureMap> m;
  const std::size_t offset = out.layers.size() - spec.predicted_layers.size();
  for (std::size_t i = 0; i < spec.predicted_layers.size(); ++i) {
    m.emplace(spec.predicted_layers[i], out.layers[offset + i]);
  }
  return m;
}

EncoderConfig student_config_for(const EncoderConfig& base, const DistillSpec& spec) {
  EncoderConfig c = base;
  c.head_layers = spec.predict_with_hidden ? std::vector<int>{} : spec.predicted_layers;
  return c;
}

Encoder init_student_from_teacher(const Encoder& teacher, const EncoderConfig& student_config,
                                  std::uint64_t seed) {
  Encoder student = build(student_config, seed, teacher.dtype());
  std::vector<std::string> offending;
  const auto& tc = teacher.config();
  if (student_config.num_transformer_layers > tc.num_transformer_layers) {
    offending.push_back("num_transformer_layers (" + std::to_string(student_config.num_transformer_layers) + " > " +
                        std::to_string(tc.num_transformer_layers) + ")");
  }
  if (student_config.attention_heads != tc.attention_heads) {
    offending.push_back("attention_heads");
  }
  std::size_t total_bad = 0;
  std::size_t listed = 0;
  for (auto& [name, t] : student.parameters()) {
    if (is_head_param(name)) {
      continue;
    }
    auto it = teacher.parameters().find(name);
    if (it == teacher.parameters().end() || it->second.shape() != t.shape()) {
      ++total_bad;
      if (listed < 12) {
        ++listed;
        offending.push_back(name + (it == teacher.parameters().end()
                                        ? " (absent in teacher)"
                                        : " " + shape_string(t.shape()) + " vs " + shape_string(it->second.shape())));
      }
      continue;
    }
    t = it->second.detach();
  }
  if (!offending.empty()) {
    std::string msg = "init_student_from_teacher: incompatible parameters:";
    for (const auto& o : offending) {
      msg += "\n  " + o;
    }
    if (total_bad > listed) {
      msg += "\n  ... " + std::to_string(total_bad) + " parameters differ in total";
    }
    throw IncompatibleError(msg);
  }
  return student;
}

StripResult strip_heads(const Checkpoint& ckpt) {
  StripResult r;
  r.checkpoint = ckpt;
  if (!ckpt.encoder.has_heads()) {
    r.status = StripStatus::no_heads;
    return r;
  }
  for (auto it = r.checkpoint.tensors.begin(); it != r.checkpoint.tensors.end();) {
    if (is_head_param(it->first)) {
      r.removed_scalars += static_cast<std::int64_t>(it->second.data.size());
      it = r.checkpoint.tensors.erase(it);
    } else {
      ++it;
    }
  }
  r.checkpoint.encoder.head_layers.clear();
  r.checkpoint.meta["heads_stripped"] = true;
  return r;
}

}  // namespace dkd
