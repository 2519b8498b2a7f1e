#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dkd/checkpoint.hpp"
#include "dkd/model.hpp"
#include "json.hpp"

namespace dkd {

enum class LossReduction { sum_over_time, mean_over_time };

// Which teacher layers the student predicts and how the per-frame objective
// (1/D)|h - h^|_1 - lambda * log sigmoid(cos(h, h^)) is weighted and reduced.
struct DistillSpec {
  // Ascending, distinct, each in [1, teacher depth].
  std::vector<int> predicted_layers{4, 8, 12};
  double lambda = 1.0;
  // When false the cosine term is dropped from the objective and reported as
  // exactly zero.
  bool use_cosine = true;
  LossReduction reduction = LossReduction::mean_over_time;
  // Comparison mode: student hidden layers 0..n-1 regress the predicted
  // teacher layers directly, without heads.
  bool predict_with_hidden = false;

  void validate(int teacher_layers) const;
};

nlohmann::json to_json(const DistillSpec& spec);
DistillSpec distill_spec_from_json(const nlohmann::json& j);

// Accepts any non-empty subset of [1, teacher_layers]; returns the spec with
// layers sorted ascending and default weights.
DistillSpec validate_layer_set(const std::vector<int>& layers, int teacher_layers);

struct LossBreakdown {
  // Per predicted layer, reduced over frames. `cosine` holds the unweighted
  // -log sigmoid(cos) term.
  std::map<int, Tensor> l1;
  std::map<int, Tensor> cosine;
  Tensor total;
  double lambda = 1.0;

  double l1_value(int layer) const { return l1.at(layer).item(); }
  double cosine_value(int layer) const { return cosine.at(layer).item(); }
};

// Per layer l and frame t: (1/D)|h_t - h^_t|_1 - lambda log sigmoid(cos);
// reduced over t, summed over layers. Only `student` tensors should carry
// gradient.
LossBreakdown distill_loss(const std::map<int, FeatureMap>& student, const std::map<int, FeatureMap>& teacher,
                           const DistillSpec& spec);

// Student maps keyed by teacher layer: head outputs, or hidden layers in
// predict_with_hidden mode.
std::map<int, FeatureMap> student_predictions(const EncoderOutput& out, const DistillSpec& spec);

// Student config for a spec: heads for every predicted layer, none in
// predict_with_hidden mode.
EncoderConfig student_config_for(const EncoderConfig& base, const DistillSpec& spec);

// Copies the teacher's conv front-end, projection, positional conv, encoder
// norm and transformer layers 1..k into a freshly seeded student; everything
// else (heads) keeps its fresh initialization.
Encoder init_student_from_teacher(const Encoder& teacher, const EncoderConfig& student_config,
                                  std::uint64_t seed);

enum class StripStatus { stripped, no_heads };

struct StripResult {
  Checkpoint checkpoint;
  StripStatus status = StripStatus::stripped;
  std::int64_t removed_scalars = 0;
};

// Removes all head parameters; other tensors are untouched. A headless input
// is returned unchanged with status no_heads.
StripResult strip_heads(const Checkpoint& ckpt);

}  // namespace dkd
