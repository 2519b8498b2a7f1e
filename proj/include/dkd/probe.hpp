#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkd/checkpoint.hpp"
#include "dkd/corpus.hpp"
#include "dkd/model.hpp"

namespace dkd {

enum class ProbeTaskKind { speaker, content, intent };

std::string to_string(ProbeTaskKind kind);
ProbeTaskKind probe_task_kind_from_string(const std::string& name);

struct ProbeTask {
  ProbeTaskKind kind = ProbeTaskKind::speaker;
  int arity = 2;
};

// Task with the label arity declared by the corpus parameters. Throws
// DataError when the corpus carries fewer than two classes for the task.
ProbeTask probe_task(ProbeTaskKind kind, const CorpusManifest& manifest);
int label_of(const UtteranceRecord& record, ProbeTaskKind kind);

struct SummaryWeights {
  std::vector<double> logits;

  std::vector<double> softmax() const;
};

// sum_i softmax(logits)_i * frames_i. logits: [k]. Differentiable in logits
// and frames.
FeatureMap weighted_sum(const std::vector<FeatureMap>& features, const Tensor& logits);

// Representation names of an encoder, in output order: "feat" (layer 0),
// "layer_k" for inner blocks, "hid" (last block), then "head_<l>" per head.
std::vector<std::string> representation_names(const EncoderConfig& config);

// Frozen-upstream features for every utterance. Pooling is a mean over frames;
// since it commutes with the weighted sum only pooled vectors are kept.
struct UpstreamFeatures {
  std::vector<std::string> names;
  std::size_t width = 0;
  // [utterance][representation][width], row-major.
  std::vector<double> pooled;
  // Mean over utterances and frames of each representation's frame L2 norm.
  std::vector<double> mean_norm;
  std::string upstream_digest;

  std::size_t num_utterances() const;
  std::size_t num_representations() const { return names.size(); }
};

UpstreamFeatures extract_features(const Encoder& upstream, const Corpus& corpus);

// Held-out iff fnv1a64(id) % 5 == 0 (a fixed ~20% of ids).
bool in_test_split(const std::string& id);

struct ProbeConfig {
  int steps = 1000;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Control run: labels permuted across utterances before splitting.
  bool shuffle_labels = false;
};

struct ProbeResult {
  ProbeTask task;
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  int steps = 0;
  std::uint64_t seed = 0;
  bool shuffled = false;
  std::vector<std::string> names;
  SummaryWeights weights;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

// Trains summary logits and an affine classifier on pooled features with Adam
// (default betas). Bitwise reproducible for a fixed seed.
ProbeResult train_probe(const UpstreamFeatures& features, const CorpusManifest& manifest, const ProbeTask& task,
                        const ProbeConfig& cfg);
// Loads the upstream, extracts features and probes. Throws IntegrityError if
// the upstream parameters change during the run.
ProbeResult train_probe(const Checkpoint& upstream, const Corpus& corpus, const ProbeTask& task,
                        const ProbeConfig& cfg);

enum class ImportanceOrder {
  // softmax weight * mean norm, renormalized.
  multiply_then_normalize,
  // softmax weight / mean norm, renormalized.
  divide_then_normalize,
};

struct LayerImportance {
  ProbeTaskKind task = ProbeTaskKind::speaker;
  std::vector<std::string> names;
  std::vector<double> importance;
  double accuracy = 0.0;
};

std::vector<double> normalized_importance(const std::vector<double>& softmax_weights,
                                          const std::vector<double>& mean_norm, ImportanceOrder order);

// Requires an upstream with prediction heads; throws ProtocolError otherwise.
std::vector<LayerImportance> analyze_layer_weights(const Checkpoint& upstream, const std::vector<ProbeTaskKind>& tasks,
                                                   const Corpus& corpus, const ProbeConfig& cfg,
                                                   ImportanceOrder order = ImportanceOrder::multiply_then_normalize);

// task,accuracy,steps,seed
std::string accuracy_csv(const std::vector<ProbeResult>& results);
// task,representation,importance
std::string importance_csv(const std::vector<LayerImportance>& rows);

}  // namespace dkd
