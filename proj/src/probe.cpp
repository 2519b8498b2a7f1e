#include "dkd/probe.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "dkd/ops.hpp"
#include "dkd/random.hpp"
#include "dkd/trainer.hpp"

namespace dkd {

std::string to_string(ProbeTaskKind kind) {
  switch (kind) {
    case ProbeTaskKind::speaker:
      return "speaker";
    case ProbeTaskKind::content:
      return "content";
    case ProbeTaskKind::intent:
      return "intent";
  }
  return "unknown";
}

ProbeTaskKind probe_task_kind_from_string(const std::string& name) {
  if (name == "speaker") {
    return ProbeTaskKind::speaker;
  }
  if (name == "content") {
    return ProbeTaskKind::content;
  }
  if (name == "intent") {
    return ProbeTaskKind::intent;
  }
  throw ParameterError("unknown probe task '" + name + "' (expected speaker, content or intent)");
}

int label_of(const UtteranceRecord& record, ProbeTaskKind kind) {
  switch (kind) {
    case ProbeTaskKind::speaker:
      return record.speaker;
    case ProbeTaskKind::content:
      return record.content;
    case ProbeTaskKind::intent:
      return record.intent;
  }
  return -1;
}

ProbeTask probe_task(ProbeTaskKind kind, const CorpusManifest& manifest) {
  ProbeTask t;
  t.kind = kind;
  switch (kind) {
    case ProbeTaskKind::speaker:
      t.arity = manifest.params.n_speakers;
      break;
    case ProbeTaskKind::content:
      t.arity = manifest.params.n_contents;
      break;
    case ProbeTaskKind::intent:
      t.arity = manifest.params.n_intents;
      break;
  }
  if (t.arity < 2) {
    throw DataError("probe task " + to_string(kind) + ": corpus has " + std::to_string(t.arity) +
                    " label(s); at least 2 are required");
  }
  return t;
}

std::vector<double> SummaryWeights::softmax() const {
  std::vector<double> w(logits.size());
  if (logits.empty()) {
    return w;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(logits[i] - mx);
    z += w[i];
  }
  for (double& v : w) {
    v /= z;
  }
  return w;
}

FeatureMap weighted_sum(const std::vector<FeatureMap>& features, const Tensor& logits) {
  if (features.empty()) {
    throw ShapeError("weighted_sum: no feature maps");
  }
  if (logits.rank() != 1 || logits.numel() != features.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(features.size()) + " feature maps but logits of shape " +
                     shape_string(logits.shape()));
  }
  const Shape& shape = features.front().frames.shape();
  std::vector<Tensor> rows;
  rows.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].frames.shape() != shape) {
      throw ShapeError("weighted_sum: map " + std::to_string(i) + " has shape " +
                       shape_string(features[i].frames.shape()) + ", expected " + shape_string(shape));
    }
    rows.push_back(ops::reshape(features[i].frames, {1, shape_numel(shape)}));
  }
  const Tensor w = ops::reshape(ops::softmax(logits), {1, features.size()});
  const Tensor mixed = ops::matmul(w, ops::concat(rows, 0));
  return FeatureMap{ops::reshape(mixed, shape), features.front().layer_index};
}

std::vector<std::string> representation_names(const EncoderConfig& config) {
  std::vector<std::string> names;
  const int depth = config.num_transformer_layers;
  names.emplace_back("feat");
  for (int l = 1; l < depth; ++l) {
    names.push_back("layer_" + std::to_string(l));
  }
  if (depth >= 1) {
    names.emplace_back("hid");
  }
  for (int h : config.head_layers) {
    names.push_back("head_" + std::to_string(h));
  }
  return names;
}

std::size_t UpstreamFeatures::num_utterances() const {
  const std::size_t per = names.size() * width;
  return per == 0 ? 0 : pooled.size() / per;
}

UpstreamFeatures extract_features(const Encoder& upstream, const Corpus& corpus) {
  if (corpus.size() == 0) {
    throw DataError("extract_features: corpus is empty");
  }
  NoGradScope no_grad;
  UpstreamFeatures f;
  f.names = representation_names(upstream.config());
  f.width = static_cast<std::size_t>(upstream.config().post_conv_dim);
  f.upstream_digest = parameter_digest(upstream);
  const std::size_t reps = f.names.size();
  f.pooled.assign(corpus.size() * reps * f.width, 0.0);
  f.mean_norm.assign(reps, 0.0);
  std::size_t total_frames = 0;
  for (std::size_t u = 0; u < corpus.size(); ++u) {
    const EncoderOutput out =
        upstream.forward(wave_tensor(corpus, u, corpus.manifest.records[u].length, upstream.dtype()));
    std::vector<const Tensor*> maps;
    for (const auto& fm : out.layers) {
      maps.push_back(&fm.frames);
    }
    for (const auto& [l, fm] : out.heads) {
      maps.push_back(&fm.frames);
    }
    const std::size_t frames = maps.front()->dim(0);
    total_frames += frames;
    for (std::size_t r = 0; r < reps; ++r) {
      const std::vector<double> v = maps[r]->to_vector();
      double* dst = &f.pooled[(u * reps + r) * f.width];
      for (std::size_t t = 0; t < frames; ++t) {
        double sq = 0.0;
        for (std::size_t d = 0; d < f.width; ++d) {
          const double x = v[t * f.width + d];
          dst[d] += x;
          sq += x * x;
        }
        f.mean_norm[r] += std::sqrt(sq);
      }
      for (std::size_t d = 0; d < f.width; ++d) {
        dst[d] /= static_cast<double>(frames);
      }
    }
  }
  for (double& n : f.mean_norm) {
    n /= static_cast<double>(total_frames);
  }
  return f;
}

bool in_test_split(const std::string& id) { return fnv1a64(id) % 5 == 0; }

namespace {

// Representation-major block [reps, n * width] for the given utterances.
Tensor gather(const UpstreamFeatures& f, const std::vector<std::size_t>& rows) {
  const std::size_t reps = f.num_representations();
  std::vector<double> buf(reps * rows.size() * f.width);
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double* src = &f.pooled[(rows[i] * reps + r) * f.width];
      std::copy(src, src + f.width, &buf[(r * rows.size() + i) * f.width]);
    }
  }
  return Tensor::from({reps, rows.size() * f.width}, buf, Dtype::f64);
}

Tensor class_logits(const ParameterMap& p, const Tensor& block, std::size_t n, std::size_t width) {
  const std::size_t reps = block.dim(0);
  const Tensor w = ops::reshape(ops::softmax(p.at("summary")), {1, reps});
  const Tensor mixed = ops::reshape(ops::matmul(w, block), {n, width});
  return ops::add(ops::matmul(mixed, p.at("classifier.weight")), p.at("classifier.bias"));
}

double accuracy_of(const ParameterMap& p, const UpstreamFeatures& f, const std::vector<std::size_t>& rows,
                   const std::vector<int>& labels) {
  if (rows.empty()) {
    return 0.0;
  }
  NoGradScope no_grad;
  const Tensor logits = class_logits(p, gather(f, rows), rows.size(), f.width);
  const std::size_t classes = logits.dim(1);
  const std::vector<double> v = logits.to_vector();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto first = v.begin() + static_cast<std::ptrdiff_t>(i * classes);
    const auto best = std::max_element(first, first + static_cast<std::ptrdiff_t>(classes)) - first;
    hits += static_cast<int>(best) == labels[rows[i]] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace

ProbeResult train_probe(const UpstreamFeatures& features, const CorpusManifest& manifest, const ProbeTask& task,
                        const ProbeConfig& cfg) {
  if (cfg.steps < 0 || cfg.batch_size < 1 || !(cfg.lr > 0.0)) {
    throw ParameterError("probe config: steps >= 0, batch_size >= 1 and lr > 0 required");
  }
  if (task.arity < 2) {
    throw ParameterError("probe task: label arity must be >= 2");
  }
  const std::size_t n = manifest.records.size();
  if (features.num_utterances() != n) {
    throw ShapeError("train_probe: features cover " + std::to_string(features.num_utterances()) +
                     " utterances, manifest has " + std::to_string(n));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = label_of(manifest.records[i], task.kind);
    if (labels[i] < 0 || labels[i] >= task.arity) {
      throw DataError("train_probe: record " + manifest.records[i].id + " has no valid " + to_string(task.kind) +
                      " label");
    }
  }
  Rng rng(cfg.seed);
  if (cfg.shuffle_labels) {
    Rng perm = rng.derive(0x5348);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(labels[i - 1], labels[perm.below(i)]);
    }
  }
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  for (std::size_t i = 0; i < n; ++i) {
    (in_test_split(manifest.records[i].id) ? test : train).push_back(i);
  }
  if (train.empty() || test.empty()) {
    throw DataError("train_probe: corpus too small for an 80/20 split");
  }

  const std::size_t reps = features.num_representations();
  const std::size_t width = features.width;
  const std::size_t classes = static_cast<std::size_t>(task.arity);
  ParameterMap p;
  p["summary"] = Tensor::zeros({reps}, Dtype::f64, true);
  {
    Rng init = rng.derive(0x434C);
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    std::vector<double> w(width * classes);
    for (double& x : w) {
      x = init.uniform(-bound, bound);
    }
    p["classifier.weight"] = Tensor::from({width, classes}, w, Dtype::f64, true);
  }
  p["classifier.bias"] = Tensor::zeros({classes}, Dtype::f64, true);
  const std::vector<std::string> names{"classifier.bias", "classifier.weight", "summary"};

  AdamState adam;
  Rng order = rng.derive(0x4F52);
  std::vector<std::size_t> perm = train;
  std::size_t cursor = perm.size();
  const std::size_t b = std::min(cfg.batch_size, train.size());
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < b) {
      if (cursor == perm.size()) {
        for (std::size_t i = perm.size(); i > 1; --i) {
          std::swap(perm[i - 1], perm[order.below(i)]);
        }
        cursor = 0;
      }
      batch.push_back(perm[cursor++]);
    }
    std::vector<double> onehot(b * classes, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      onehot[i * classes + static_cast<std::size_t>(labels[batch[i]])] = 1.0;
    }
    for (auto& [name, t] : p) {
      t.zero_grad();
    }
    const Tensor logp = ops::log(ops::softmax(class_logits(p, gather(features, batch), b, width)));
    const Tensor target = Tensor::from({b, classes}, onehot, Dtype::f64);
    const Tensor loss = ops::scale(ops::sum(ops::mul(logp, target)), -1.0 / static_cast<double>(b));
    backward(loss);
    adam_step(p, names, adam, cfg.lr, AdamConfig{});
  }

  ProbeResult r;
  r.task = task;
  r.steps = cfg.steps;
  r.seed = cfg.seed;
  r.shuffled = cfg.shuffle_labels;
  r.names = features.names;
  r.weights.logits = p.at("summary").to_vector();
  r.n_train = train.size();
  r.n_test = test.size();
  r.accuracy = accuracy_of(p, features, test, labels);
  r.train_accuracy = accuracy_of(p, features, train, labels);
  return r;
}

ProbeResult train_probe(const Checkpoint& upstream, const Corpus& corpus, const ProbeTask& task,
                        const ProbeConfig& cfg) {
  const Encoder enc = to_encoder(upstream);
  const UpstreamFeatures f = extract_features(enc, corpus);
  ProbeResult r = train_probe(f, corpus.manifest, task, cfg);
  if (parameter_digest(enc) != f.upstream_digest) {
    throw IntegrityError("train_probe: upstream parameters changed during probing");
  }
  return r;
}

std::vector<double> normalized_importance(const std::vector<double>& softmax_weights,
                                          const std::vector<double>& mean_norm, ImportanceOrder order) {
  if (softmax_weights.size() != mean_norm.size() || softmax_weights.empty()) {
    throw ShapeError("normalized_importance: " + std::to_string(softmax_weights.size()) + " weights vs " +
                     std::to_string(mean_norm.size()) + " norms");
  }
  std::vector<double> v(softmax_weights.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (order == ImportanceOrder::multiply_then_normalize) {
      v[i] = softmax_weights[i] * mean_norm[i];
    } else {
      v[i] = mean_norm[i] > 0.0 ? softmax_weights[i] / mean_norm[i] : 0.0;
    }
  }
  const double z = std::accumulate(v.begin(), v.end(), 0.0);
  for (double& x : v) {
    x = z > 0.0 ? x / z : 1.0 / static_cast<double>(v.size());
  }
  return v;
}

std::vector<LayerImportance> analyze_layer_weights(const Checkpoint& upstream, const std::vector<ProbeTaskKind>& tasks,
                                                   const Corpus& corpus, const ProbeConfig& cfg,
                                                   ImportanceOrder order) {
  if (!upstream.encoder.has_heads()) {
    throw ProtocolError(
        "analyze-layers: upstream has no prediction heads; distill with heads on every teacher layer "
        "(e.g. --layers 1,...,L) and analyze before stripping");
  }
  const Encoder enc = to_encoder(upstream);
  const UpstreamFeatures f = extract_features(enc, corpus);
  std::vector<LayerImportance> rows;
  for (ProbeTaskKind kind : tasks) {
    const ProbeResult r = train_probe(f, corpus.manifest, probe_task(kind, corpus.manifest), cfg);
    LayerImportance li;
    li.task = kind;
    li.names = f.names;
    li.importance = normalized_importance(r.weights.softmax(), f.mean_norm, order);
    li.accuracy = r.accuracy;
    rows.push_back(std::move(li));
  }
  if (parameter_digest(enc) != f.upstream_digest) {
    throw IntegrityError("analyze-layers: upstream parameters changed during probing");
  }
  return rows;
}

std::string accuracy_csv(const std::vector<ProbeResult>& results) {
  std::ostringstream os;
  os << "task,accuracy,steps,seed\n";
  for (const auto& r : results) {
    os << to_string(r.task.kind) << (r.shuffled ? "_shuffled" : "") << ',' << std::fixed << std::setprecision(6)
       << r.accuracy << ',' << r.steps << ',' << r.seed << '\n';
  }
  return os.str();
}

std::string importance_csv(const std::vector<LayerImportance>& rows) {
  std::ostringstream os;
  os << "task,representation,importance\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.names.size(); ++i) {
      os << to_string(row.task) << ',' << row.names[i] << ',' << std::fixed << std::setprecision(9)
         << row.importance[i] << '\n';
    }
  }
  return os.str();
}

}  // namespace dkd
