#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace dkd {

inline constexpr int kCorpusGeneratorVersion = 1;

// Synthetic speech-like corpus. Each utterance is a harmonic source whose
// fundamental is set by the speaker (base + speaker * spacing, per-utterance
// jitter) and whose overtone weights are drawn per speaker, shaped by a
// content-specific three-formant envelope. Intent is a linear f0 glide whose
// slope is evenly spaced in [-1, 1] across intents. Gaussian noise is added at
// `noise_db` relative to the signal RMS.
//
// Randomness comes from SplitMix64 streams: speaker timbre from
// derive(1000 + speaker), formants from derive(2000 + content), and each
// utterance from derive(fnv1a64(id)), all off Rng(seed).
struct CorpusParams {
  std::uint64_t seed = 0;
  int n_speakers = 8;
  int n_contents = 8;
  int n_intents = 4;
  int utterances_per_cell = 4;
  double duration_s = 1.0;
  int sample_rate = 16000;
  double f0_base_hz = 100.0;
  double speaker_spacing_hz = 12.0;
  // Relative f0 jitter per utterance, uniform in [-f0_jitter, f0_jitter].
  double f0_jitter = 0.03;
  // Total relative f0 excursion of the steepest intent glide.
  double prosody_depth = 0.2;
  double noise_db = -30.0;
  double max_harmonic_hz = 4000.0;
  // Utterances shorter than this many samples are rejected.
  std::size_t min_samples = 400;

  void validate() const;
  std::size_t samples_per_utterance() const;
  double speaker_f0(int speaker) const { return f0_base_hz + speaker_spacing_hz * speaker; }
};

nlohmann::json to_json(const CorpusParams& p);
CorpusParams corpus_params_from_json(const nlohmann::json& j);

struct UtteranceRecord {
  std::string id;
  int speaker = 0;
  int content = 0;
  int intent = 0;
  double duration_s = 0.0;
  std::uint64_t offset = 0;  // in samples
  std::uint64_t length = 0;  // in samples

  bool operator==(const UtteranceRecord&) const = default;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  int version = kCorpusGeneratorVersion;
  CorpusParams params;
  std::vector<UtteranceRecord> records;
};

struct Corpus {
  CorpusManifest manifest;
  std::vector<float> audio;

  std::size_t size() const { return manifest.records.size(); }
  std::span<const float> samples(std::size_t index) const;
  double total_seconds() const;
};

Corpus generate_corpus(const CorpusParams& params);

// Writes manifest.jsonl (id, speaker, content, intent, duration_s, offset,
// length per line), audio.f32 (raw little-endian binary32 samples) and
// corpus.json (generator version, seed and parameters).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

std::string manifest_jsonl(const CorpusManifest& manifest);

// Deterministic batches of record indices. Each epoch is a seeded permutation;
// runs of 64 batches are bucketed by length so batches hold similar-length
// utterances. A trailing partial batch is dropped.
class BatchIterator {
 public:
  BatchIterator(const CorpusManifest& manifest, std::size_t batch_size, std::uint64_t seed, bool repeat,
                std::vector<std::size_t> subset = {});

  // Next batch, or nullopt at end of data (only when repeat is false).
  std::optional<std::vector<std::size_t>> next();
  std::size_t epoch() const { return epoch_; }

 private:
  void start_epoch();

  const CorpusManifest* manifest_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool repeat_;
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Autocorrelation pitch estimate over [min_hz, max_hz].
double estimate_f0(std::span<const float> samples, int sample_rate, double min_hz = 60.0, double max_hz = 400.0);

}  // namespace dkd
