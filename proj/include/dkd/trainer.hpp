#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dkd/checkpoint.hpp"
#include "dkd/corpus.hpp"
#include "dkd/distill.hpp"
#include "dkd/model.hpp"
#include "json.hpp"

namespace dkd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
};

struct TrainConfig {
  std::int64_t total_updates = 200000;
  std::size_t batch_size = 24;
  double peak_lr = 2e-4;
  double warmup_fraction = 0.07;
  std::uint64_t seed = 0;
  AdamConfig adam;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
  // Log held-out cosine every this many steps (0: never).
  std::int64_t eval_every = 0;
  bool teacher_init = true;
  bool freeze_front_end = true;
  bool repeat = true;

  void validate() const;
  static TrainConfig reference();
  static TrainConfig desk();
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// round-half-up(warmup_fraction * total_updates).
std::int64_t warmup_steps(const TrainConfig& cfg);
// Linear 0 -> peak over the warmup, then linear peak -> 0 at total_updates.
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One bias-corrected Adam update of `names` in `params` from their current
// gradients multiplied by `grad_scale`. Parameters without a gradient are
// treated as having a zero gradient. Throws NumericError naming the first
// parameter with a non-finite gradient.
void adam_step(ParameterMap& params, const std::vector<std::string>& names, AdamState& state, double lr,
               const AdamConfig& cfg, double grad_scale = 1.0);

// Global L2 norm of the gradients of `names`.
double gradient_norm(const ParameterMap& params, const std::vector<std::string>& names);

struct TrainRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  std::map<int, double> l1;
  std::map<int, double> cosine;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct TrainLog {
  std::vector<int> layers;
  std::vector<TrainRecord> records;

  // step,lr,loss_total,loss_l1_<l>...,loss_cos_<l>...,wall_ms
  std::string to_csv() const;
  // FNV-1a over every deterministic field (wall_ms excluded).
  std::string digest() const;
};

// Held-out evaluation: mean over utterances and frames of cos(h, h^) per
// predicted layer.
std::map<int, double> evaluate_cosine(const Encoder& student, const Encoder& teacher, const DistillSpec& spec,
                                      const Corpus& corpus, const std::vector<std::size_t>& indices);

struct DistillResult {
  Encoder student;
  Checkpoint checkpoint;
  TrainLog log;
  std::string teacher_digest_before;
  std::string teacher_digest_after;
};

struct DistillOptions {
  // Where to write the student state if training hits a non-finite loss.
  std::optional<std::filesystem::path> nan_dump;
  // Called after every update.
  std::function<void(const TrainRecord&)> on_step;
};

// The student run_distillation starts from: heads per `spec`, teacher copy or
// fresh build per cfg.teacher_init, seeded from cfg.seed.
Encoder initial_student(const Encoder& teacher, const EncoderConfig& student_base, const DistillSpec& spec,
                        const TrainConfig& cfg);

// Trains a student (heads per `spec`) to regress the frozen teacher's layers
// over `corpus`. Runs exactly cfg.total_updates updates; deterministic for a
// fixed (seed, configs, corpus).
DistillResult run_distillation(const Encoder& teacher, const EncoderConfig& student_config, const DistillSpec& spec,
                               const TrainConfig& cfg, const Corpus& corpus, const DistillOptions& options = {});

// Waveform tensor for corpus record `index`, cropped to its first `length`
// samples.
Tensor wave_tensor(const Corpus& corpus, std::size_t index, std::size_t length, Dtype dtype = Dtype::f32);

}  // namespace dkd
