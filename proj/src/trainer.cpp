#include "dkd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "dkd/ops.hpp"
#include "dkd/random.hpp"

namespace dkd {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

// Fixed tag separating the student's fresh-init stream from a teacher built
// with the same seed.
constexpr std::uint64_t kStudentStream = 0x5354554445ULL;

}  // namespace

void TrainConfig::validate() const {
  if (total_updates < 1) {
    throw ConfigError("train config: total_updates must be >= 1");
  }
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("train config: warmup_fraction must lie in (0, 1)");
  }
  if (!(peak_lr > 0.0)) {
    throw ConfigError("train config: peak_lr must be > 0");
  }
  if (batch_size < 1) {
    throw ConfigError("train config: batch_size must be >= 1");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
    throw ConfigError("train config: invalid Adam hyper-parameters");
  }
}

TrainConfig TrainConfig::reference() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.total_updates = 2000;
  c.batch_size = 8;
  c.peak_lr = 1e-3;
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"total_updates", c.total_updates},
          {"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"warmup_fraction", c.warmup_fraction},
          {"seed", c.seed},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"clip_norm", c.clip_norm},
          {"eval_every", c.eval_every},
          {"teacher_init", c.teacher_init},
          {"freeze_front_end", c.freeze_front_end},
          {"repeat", c.repeat}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.total_updates = j.value("total_updates", c.total_updates);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.seed = j.value("seed", c.seed);
    if (j.contains("adam")) {
      c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
      c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
      c.adam.eps = j["adam"].value("eps", c.adam.eps);
    }
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.teacher_init = j.value("teacher_init", c.teacher_init);
    c.freeze_front_end = j.value("freeze_front_end", c.freeze_front_end);
    c.repeat = j.value("repeat", c.repeat);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

std::int64_t warmup_steps(const TrainConfig& cfg) {
  return static_cast<std::int64_t>(std::floor(cfg.warmup_fraction * static_cast<double>(cfg.total_updates) + 0.5));
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_updates) {
    throw ParameterError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_updates) +
                         "]");
  }
  const std::int64_t w = warmup_steps(cfg);
  if (step <= w) {
    return w == 0 ? cfg.peak_lr : cfg.peak_lr * static_cast<double>(step) / static_cast<double>(w);
  }
  return cfg.peak_lr * static_cast<double>(cfg.total_updates - step) /
         static_cast<double>(cfg.total_updates - w);
}

double gradient_norm(const ParameterMap& params, const std::vector<std::string>& names) {
  double sq = 0.0;
  for (const auto& name : names) {
    const Tensor& t = params.at(name);
    if (!t.has_grad()) {
      continue;
    }
    for (double g : t.grad_vector()) {
      sq += g * g;
    }
  }
  return std::sqrt(sq);
}

void adam_step(ParameterMap& params, const std::vector<std::string>& names, AdamState& state, double lr,
               const AdamConfig& cfg, double grad_scale) {
  for (const auto& name : names) {
    const Tensor& t = params.at(name);
    if (t.has_grad()) {
      for (double g : t.grad_vector()) {
        if (!std::isfinite(g)) {
          throw NumericError("adam: non-finite gradient in parameter " + name);
        }
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& name : names) {
    Tensor& t = params.at(name);
    const std::size_t n = t.numel();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    const std::vector<double> g = t.grad_vector();
    detail::dispatch(t.dtype(), [&]<class T>(T) {
      auto p = t.mutable_values<T>();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i] * grad_scale;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
      }
    });
  }
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "step,lr,loss_total";
  for (int l : layers) {
    os << ",loss_l1_" << l;
  }
  for (int l : layers) {
    os << ",loss_cos_" << l;
  }
  os << ",wall_ms\n";
  for (const auto& r : records) {
    os << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss_total);
    for (int l : layers) {
      os << ',' << fmt(r.l1.at(l));
    }
    for (int l : layers) {
      os << ',' << fmt(r.cosine.at(l));
    }
    os << ',' << std::fixed << std::setprecision(3) << r.wall_ms << std::defaultfloat << '\n';
  }
  return os.str();
}

std::string TrainLog::digest() const {
  std::ostringstream os;
  for (const auto& r : records) {
    os << r.step << ' ' << std::hexfloat << r.lr << ' ' << r.loss_total << ' ' << r.grad_norm;
    for (const auto& [l, v] : r.l1) {
      os << ' ' << l << ':' << v;
    }
    for (const auto& [l, v] : r.cosine) {
      os << ' ' << l << ':' << v;
    }
    os << std::defaultfloat << '\n';
  }
  const std::string s = os.str();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << h;
  return hex.str();
}

Tensor wave_tensor(const Corpus& corpus, std::size_t index, std::size_t length, Dtype dtype) {
  const auto s = corpus.samples(index);
  if (length > s.size()) {
    throw LengthError("wave_tensor: requested " + std::to_string(length) + " samples from a record of " +
                      std::to_string(s.size()));
  }
  Tensor t = Tensor::from({length}, s.first(length));
  return dtype == Dtype::f32 ? t : t.to(dtype);
}

std::map<int, double> evaluate_cosine(const Encoder& student, const Encoder& teacher, const DistillSpec& spec,
                                      const Corpus& corpus, const std::vector<std::size_t>& indices) {
  NoGradScope no_grad;
  std::map<int, double> total;
  for (int l : spec.predicted_layers) {
    total[l] = 0.0;
  }
  for (std::size_t idx : indices) {
    const Tensor wave = wave_tensor(corpus, idx, corpus.manifest.records.at(idx).length);
    const EncoderOutput t = teacher.forward(wave);
    const auto pred = student_predictions(student.forward(wave), spec);
    for (int l : spec.predicted_layers) {
      const Tensor c = ops::cosine_similarity(pred.at(l).frames, t.layers.at(static_cast<std::size_t>(l)).frames);
      total[l] += ops::mean(c).item();
    }
  }
  for (auto& [l, v] : total) {
    v /= static_cast<double>(indices.size());
  }
  return total;
}

namespace {

struct TeacherTargets {
  Tensor front_end;
  std::map<int, FeatureMap> layers;
};

}  // namespace

Encoder initial_student(const Encoder& teacher, const EncoderConfig& student_base, const DistillSpec& spec,
                        const TrainConfig& cfg) {
  const EncoderConfig student_config = student_config_for(student_base, spec);
  const std::uint64_t student_seed = Rng(cfg.seed).derive(kStudentStream).next_u64();
  return cfg.teacher_init ? init_student_from_teacher(teacher, student_config, student_seed)
                          : build(student_config, student_seed, teacher.dtype());
}

DistillResult run_distillation(const Encoder& teacher_in, const EncoderConfig& student_base, const DistillSpec& spec,
                               const TrainConfig& cfg, const Corpus& corpus, const DistillOptions& options) {
  cfg.validate();
  const int teacher_depth = teacher_in.config().num_transformer_layers;
  spec.validate(teacher_depth);
  if (corpus.size() == 0) {
    throw DataError("distill: corpus is empty");
  }

  Encoder teacher = teacher_in;
  teacher.set_frozen(true);
  DistillResult result;
  result.teacher_digest_before = parameter_digest(teacher);

  Encoder student = initial_student(teacher, student_base, spec, cfg);

  std::vector<std::string> trainable;
  for (auto& [name, t] : student.parameters()) {
    const bool train = !(cfg.freeze_front_end && is_front_end_param(name));
    t.set_requires_grad(train);
    if (train) {
      trainable.push_back(name);
    }
  }

  // A frozen front end that is a bitwise copy of the teacher's produces the
  // teacher's conv features; those are computed once and shared.
  bool share_front_end = cfg.freeze_front_end;
  for (const auto& [name, t] : student.parameters()) {
    if (share_front_end && is_front_end_param(name)) {
      const auto& tt = teacher.param(name);
      share_front_end = tt.shape() == t.shape() && tt.to_vector() == t.to_vector();
    }
  }

  std::unordered_map<std::size_t, TeacherTargets> cache;
  auto targets_for = [&](std::size_t idx, std::size_t length) -> TeacherTargets {
    const bool full = length == corpus.manifest.records[idx].length;
    if (full) {
      if (auto it = cache.find(idx); it != cache.end()) {
        return it->second;
      }
    }
    NoGradScope no_grad;
    TeacherTargets tt;
    tt.front_end = teacher.front_end(wave_tensor(corpus, idx, length, teacher.dtype()));
    const EncoderOutput out = teacher.forward_from_front_end(tt.front_end);
    for (int l : spec.predicted_layers) {
      const auto& fm = out.layers.at(static_cast<std::size_t>(l));
      tt.layers.emplace(l, FeatureMap{fm.frames.detach(), l});
    }
    if (full) {
      cache.emplace(idx, tt);
    }
    return tt;
  };

  BatchIterator batches(corpus.manifest, cfg.batch_size, cfg.seed, cfg.repeat);
  AdamState adam;
  result.log.layers = spec.predicted_layers;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::int64_t step = 1; step <= cfg.total_updates; ++step) {
    auto batch = batches.next();
    if (!batch) {
      throw DataError("distill: corpus exhausted at step " + std::to_string(step) + " with repeat disabled");
    }
    std::size_t crop = SIZE_MAX;
    for (std::size_t idx : *batch) {
      crop = std::min<std::size_t>(crop, corpus.manifest.records[idx].length);
    }

    TrainRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, cfg);
    for (int l : spec.predicted_layers) {
      rec.l1[l] = 0.0;
      rec.cosine[l] = 0.0;
    }
    for (auto& [name, t] : student.parameters()) {
      t.zero_grad();
    }
    const double inv_batch = 1.0 / static_cast<double>(batch->size());
    for (std::size_t idx : *batch) {
      const TeacherTargets tt = targets_for(idx, crop);
      const EncoderOutput out =
          share_front_end ? student.forward_from_front_end(tt.front_end)
                          : student.forward(wave_tensor(corpus, idx, crop, student.dtype()));
      const LossBreakdown loss = distill_loss(student_predictions(out, spec), tt.layers, spec);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        if (options.nan_dump) {
          save_checkpoint(to_checkpoint(student, {{"role", "nan_dump"}, {"step", step}}), *options.nan_dump);
        }
        throw NumericError("distill: non-finite loss at step " + std::to_string(step) + " on utterance " +
                           corpus.manifest.records[idx].id +
                           (options.nan_dump ? ", student state dumped to " + options.nan_dump->string() : ""));
      }
      backward(ops::scale(loss.total, inv_batch));
      rec.loss_total += total * inv_batch;
      for (int l : spec.predicted_layers) {
        rec.l1[l] += loss.l1_value(l) * inv_batch;
        rec.cosine[l] += loss.cosine_value(l) * inv_batch;
      }
    }

    rec.grad_norm = gradient_norm(student.parameters(), trainable);
    const double clip_scale =
        cfg.clip_norm > 0.0 && rec.grad_norm > cfg.clip_norm ? cfg.clip_norm / rec.grad_norm : 1.0;
    adam_step(student.parameters(), trainable, adam, rec.lr, cfg.adam, clip_scale);
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.records.push_back(rec);
    if (options.on_step) {
      options.on_step(rec);
    }
  }

  for (auto& [name, t] : student.parameters()) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
  result.teacher_digest_after = parameter_digest(teacher);
  if (result.teacher_digest_after != result.teacher_digest_before) {
    throw NumericError("distill: teacher parameters changed during training");
  }

  nlohmann::json meta = {{"role", "student"},
                         {"distill_spec", to_json(spec)},
                         {"train_config", to_json(cfg)},
                         {"teacher_digest", result.teacher_digest_before},
                         {"corpus_seed", corpus.manifest.seed},
                         {"log_digest", result.log.digest()}};
  result.checkpoint = to_checkpoint(student, meta);
  result.student = std::move(student);
  return result;
}

}  // namespace dkd
