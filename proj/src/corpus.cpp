#include "dkd/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dkd/checkpoint.hpp"
#include "dkd/errors.hpp"
#include "dkd/random.hpp"

namespace dkd {

namespace {

struct Formant {
  double center;
  double bandwidth;
};

double envelope(const std::vector<Formant>& formants, double hz) {
  double e = 0.05;
  for (const auto& f : formants) {
    const double z = (hz - f.center) / f.bandwidth;
    e += std::exp(-0.5 * z * z);
  }
  return e;
}

std::string utterance_id(int s, int c, int i, int r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "spk%02d-cnt%02d-int%02d-rep%02d", s, c, i, r);
  return buf;
}

std::vector<float> synthesize(const CorpusParams& p, const Rng& master, int speaker, int content, int intent,
                              const std::string& id) {
  const std::size_t n = p.samples_per_utterance();
  const double sr = p.sample_rate;

  Rng timbre = master.derive(1000 + static_cast<std::uint64_t>(speaker));
  Rng formant_rng = master.derive(2000 + static_cast<std::uint64_t>(content));
  Rng utt = master.derive(fnv1a64(id));

  const std::vector<Formant> formants{{formant_rng.uniform(300.0, 900.0), 90.0},
                                      {formant_rng.uniform(900.0, 2400.0), 140.0},
                                      {formant_rng.uniform(2400.0, 3600.0), 200.0}};
  const double f0_center = p.speaker_f0(speaker) * (1.0 + utt.uniform(-p.f0_jitter, p.f0_jitter));
  const double slope = p.n_intents > 1 ? -1.0 + 2.0 * intent / (p.n_intents - 1) : 0.0;
  const int harmonics = std::max(1, static_cast<int>(p.max_harmonic_hz / (f0_center * (1.0 + p.prosody_depth))));
  std::vector<double> weight(static_cast<std::size_t>(harmonics));
  std::vector<double> phase0(weight.size());
  for (int k = 1; k <= harmonics; ++k) {
    weight[k - 1] = timbre.uniform(0.5, 1.5) / k;
  }
  for (auto& ph : phase0) {
    ph = utt.uniform(0.0, 2.0 * std::numbers::pi);
  }

  // Harmonic amplitudes are refreshed every 10 ms block.
  const std::size_t block = std::max<std::size_t>(1, static_cast<std::size_t>(sr / 100.0));
  const std::size_t ramp = std::min(n / 2, block);
  std::vector<double> x(n, 0.0);
  std::vector<double> amp(weight.size());
  double phase = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double tau = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 0.0;
    const double f0 = f0_center * (1.0 + p.prosody_depth * slope * (tau - 0.5));
    if (t % block == 0) {
      for (std::size_t k = 0; k < weight.size(); ++k) {
        const double hz = f0 * static_cast<double>(k + 1);
        amp[k] = hz < sr / 2 ? weight[k] * envelope(formants, hz) : 0.0;
      }
    }
    double v = 0.0;
    for (std::size_t k = 0; k < weight.size(); ++k) {
      v += amp[k] * std::sin(static_cast<double>(k + 1) * phase + phase0[k]);
    }
    double gain = 1.0;
    if (t < ramp) {
      gain = static_cast<double>(t) / static_cast<double>(ramp);
    } else if (n - 1 - t < ramp) {
      gain = static_cast<double>(n - 1 - t) / static_cast<double>(ramp);
    }
    x[t] = v * gain;
    phase += 2.0 * std::numbers::pi * f0 / sr;
    if (phase > 2.0 * std::numbers::pi) {
      phase -= 2.0 * std::numbers::pi;
    }
  }

  double peak = 0.0;
  for (double v : x) {
    peak = std::max(peak, std::abs(v));
  }
  const double norm = peak > 0 ? 0.9 / peak : 0.0;
  double energy = 0.0;
  for (auto& v : x) {
    v *= norm;
    energy += v * v;
  }
  const double rms = std::sqrt(energy / static_cast<double>(n));
  const double noise = rms * std::pow(10.0, p.noise_db / 20.0);
  std::vector<float> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    out[t] = static_cast<float>(std::clamp(x[t] + noise * utt.normal(), -1.0, 1.0));
  }
  return out;
}

}  // namespace

void CorpusParams::validate() const {
  if (n_speakers < 1 || n_contents < 1 || n_intents < 1 || utterances_per_cell < 1) {
    throw ParameterError("corpus: speaker, content, intent and per-cell counts must be >= 1");
  }
  if (sample_rate < 1 || !(duration_s > 0.0)) {
    throw ParameterError("corpus: sample_rate and duration must be positive");
  }
  if (samples_per_utterance() < min_samples) {
    throw ParameterError("corpus: duration " + std::to_string(duration_s) + " s gives " +
                         std::to_string(samples_per_utterance()) + " samples, below the model receptive field of " +
                         std::to_string(min_samples));
  }
  if (!(f0_base_hz > 0.0) || speaker_spacing_hz < 0.0 || f0_jitter < 0.0 || f0_jitter >= 1.0) {
    throw ParameterError("corpus: invalid pitch parameters");
  }
}

std::size_t CorpusParams::samples_per_utterance() const {
  return static_cast<std::size_t>(std::llround(duration_s * sample_rate));
}

nlohmann::json to_json(const CorpusParams& p) {
  return {{"seed", p.seed},
          {"n_speakers", p.n_speakers},
          {"n_contents", p.n_contents},
          {"n_intents", p.n_intents},
          {"utterances_per_cell", p.utterances_per_cell},
          {"duration_s", p.duration_s},
          {"sample_rate", p.sample_rate},
          {"f0_base_hz", p.f0_base_hz},
          {"speaker_spacing_hz", p.speaker_spacing_hz},
          {"f0_jitter", p.f0_jitter},
          {"prosody_depth", p.prosody_depth},
          {"noise_db", p.noise_db},
          {"max_harmonic_hz", p.max_harmonic_hz},
          {"min_samples", p.min_samples}};
}

CorpusParams corpus_params_from_json(const nlohmann::json& j) {
  CorpusParams p;
  try {
    p.seed = j.value("seed", p.seed);
    p.n_speakers = j.value("n_speakers", p.n_speakers);
    p.n_contents = j.value("n_contents", p.n_contents);
    p.n_intents = j.value("n_intents", p.n_intents);
    p.utterances_per_cell = j.value("utterances_per_cell", p.utterances_per_cell);
    p.duration_s = j.value("duration_s", p.duration_s);
    p.sample_rate = j.value("sample_rate", p.sample_rate);
    p.f0_base_hz = j.value("f0_base_hz", p.f0_base_hz);
    p.speaker_spacing_hz = j.value("speaker_spacing_hz", p.speaker_spacing_hz);
    p.f0_jitter = j.value("f0_jitter", p.f0_jitter);
    p.prosody_depth = j.value("prosody_depth", p.prosody_depth);
    p.noise_db = j.value("noise_db", p.noise_db);
    p.max_harmonic_hz = j.value("max_harmonic_hz", p.max_harmonic_hz);
    p.min_samples = j.value("min_samples", p.min_samples);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("corpus params: ") + e.what());
  }
  return p;
}

std::span<const float> Corpus::samples(std::size_t index) const {
  const auto& r = manifest.records.at(index);
  return std::span<const float>(audio).subspan(r.offset, r.length);
}

double Corpus::total_seconds() const {
  double s = 0.0;
  for (const auto& r : manifest.records) {
    s += r.duration_s;
  }
  return s;
}

Corpus generate_corpus(const CorpusParams& params) {
  params.validate();
  Corpus corpus;
  corpus.manifest.seed = params.seed;
  corpus.manifest.params = params;
  const Rng master(params.seed);
  const std::size_t n = params.samples_per_utterance();
  for (int s = 0; s < params.n_speakers; ++s) {
    for (int c = 0; c < params.n_contents; ++c) {
      for (int i = 0; i < params.n_intents; ++i) {
        for (int r = 0; r < params.utterances_per_cell; ++r) {
          UtteranceRecord rec;
          rec.id = utterance_id(s, c, i, r);
          rec.speaker = s;
          rec.content = c;
          rec.intent = i;
          rec.length = n;
          rec.duration_s = static_cast<double>(n) / params.sample_rate;
          rec.offset = corpus.audio.size();
          const auto wave = synthesize(params, master, s, c, i, rec.id);
          corpus.audio.insert(corpus.audio.end(), wave.begin(), wave.end());
          corpus.manifest.records.push_back(std::move(rec));
        }
      }
    }
  }
  return corpus;
}

std::string manifest_jsonl(const CorpusManifest& manifest) {
  std::string out;
  for (const auto& r : manifest.records) {
    nlohmann::json j = {{"id", r.id},         {"speaker", r.speaker},       {"content", r.content},
                        {"intent", r.intent}, {"duration_s", r.duration_s}, {"offset", r.offset},
                        {"length", r.length}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string jsonl = manifest_jsonl(corpus.manifest);
  write_file(dir / "manifest.jsonl", {reinterpret_cast<const std::uint8_t*>(jsonl.data()), jsonl.size()});
  write_file(dir / "audio.f32", {reinterpret_cast<const std::uint8_t*>(corpus.audio.data()),
                                 corpus.audio.size() * sizeof(float)});
  const nlohmann::json meta = {{"generator", "dkd-synth"},
                               {"version", corpus.manifest.version},
                               {"seed", corpus.manifest.seed},
                               {"params", to_json(corpus.manifest.params)}};
  const std::string text = meta.dump(2) + "\n";
  write_file(dir / "corpus.json", {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

Corpus load_corpus(const std::filesystem::path& dir) {
  for (const char* f : {"manifest.jsonl", "audio.f32", "corpus.json"}) {
    if (!std::filesystem::exists(dir / f)) {
      throw DataError("corpus: missing " + (dir / f).string());
    }
  }
  Corpus corpus;
  try {
    const auto meta_bytes = read_file(dir / "corpus.json");
    const auto meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
    corpus.manifest.seed = meta.at("seed").get<std::uint64_t>();
    corpus.manifest.version = meta.at("version").get<int>();
    corpus.manifest.params = corpus_params_from_json(meta.at("params"));

    std::ifstream in(dir / "manifest.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) {
        continue;
      }
      const auto j = nlohmann::json::parse(line);
      UtteranceRecord r;
      r.id = j.at("id").get<std::string>();
      r.speaker = j.at("speaker").get<int>();
      r.content = j.at("content").get<int>();
      r.intent = j.at("intent").get<int>();
      r.duration_s = j.at("duration_s").get<double>();
      r.offset = j.at("offset").get<std::uint64_t>();
      r.length = j.at("length").get<std::uint64_t>();
      corpus.manifest.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus: malformed metadata: ") + e.what());
  }
  const auto bytes = read_file(dir / "audio.f32");
  if (bytes.size() % sizeof(float) != 0) {
    throw DataError("corpus: audio.f32 size is not a multiple of 4 bytes");
  }
  corpus.audio.resize(bytes.size() / sizeof(float));
  std::memcpy(corpus.audio.data(), bytes.data(), bytes.size());
  for (const auto& r : corpus.manifest.records) {
    if (r.offset + r.length > corpus.audio.size()) {
      throw DataError("corpus: record " + r.id + " extends past the end of audio.f32");
    }
  }
  return corpus;
}

BatchIterator::BatchIterator(const CorpusManifest& manifest, std::size_t batch_size, std::uint64_t seed, bool repeat,
                             std::vector<std::size_t> subset)
    : manifest_(&manifest), batch_size_(batch_size), seed_(seed), repeat_(repeat), pool_(std::move(subset)) {
  if (pool_.empty()) {
    pool_.resize(manifest.records.size());
    for (std::size_t i = 0; i < pool_.size(); ++i) {
      pool_[i] = i;
    }
  }
  if (batch_size_ == 0 || batch_size_ > pool_.size()) {
    throw ParameterError("batch_iter: batch size " + std::to_string(batch_size_) + " must be in [1, " +
                         std::to_string(pool_.size()) + "]");
  }
  start_epoch();
}

void BatchIterator::start_epoch() {
  order_ = pool_;
  Rng rng = Rng(seed_).derive(epoch_);
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[rng.below(i)]);
  }
  const std::size_t bucket = 64 * batch_size_;
  for (std::size_t start = 0; start < order_.size(); start += bucket) {
    const auto end = order_.begin() + static_cast<std::ptrdiff_t>(std::min(order_.size(), start + bucket));
    std::stable_sort(order_.begin() + static_cast<std::ptrdiff_t>(start), end, [this](std::size_t a, std::size_t b) {
      return manifest_->records[a].length < manifest_->records[b].length;
    });
  }
  cursor_ = 0;
}

std::optional<std::vector<std::size_t>> BatchIterator::next() {
  if (cursor_ + batch_size_ > order_.size()) {
    if (!repeat_) {
      return std::nullopt;
    }
    ++epoch_;
    start_epoch();
  }
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
  cursor_ += batch_size_;
  return batch;
}

namespace {

double frame_f0(std::span<const float> samples, int sample_rate, double min_hz, double max_hz) {
  const auto lag_min = static_cast<std::size_t>(sample_rate / max_hz);
  const auto lag_max = static_cast<std::size_t>(sample_rate / min_hz);
  if (samples.size() <= lag_max + 1) {
    throw LengthError("estimate_f0: signal too short for the requested pitch range");
  }
  const std::size_t n = samples.size() - lag_max;
  std::vector<double> r(lag_max + 2, 0.0);
  for (std::size_t lag = lag_min; lag <= lag_max + 1; ++lag) {
    double acc = 0.0;
    for (std::size_t t = 0; t + lag_max + 1 < samples.size() && t < n; ++t) {
      acc += static_cast<double>(samples[t]) * samples[t + lag];
    }
    r[lag] = acc;
  }
  // Start from the global maximum, then prefer the shortest integer
  // sub-multiple of that lag whose correlation is within 10% of it; this
  // resolves period-doubling without chasing formant ringing.
  std::size_t peak = lag_min;
  for (std::size_t lag = lag_min; lag <= lag_max; ++lag) {
    if (r[lag] > r[peak]) {
      peak = lag;
    }
  }
  std::size_t pick = peak;
  for (std::size_t k = peak / lag_min; k >= 2; --k) {
    const std::size_t centre = (peak + k / 2) / k;
    std::size_t local = 0;
    for (std::size_t lag = std::max(lag_min + 1, centre > 2 ? centre - 2 : 0); lag <= std::min(lag_max, centre + 2);
         ++lag) {
      if (local == 0 || r[lag] > r[local]) {
        local = lag;
      }
    }
    if (local != 0 && r[local] >= 0.9 * r[peak]) {
      pick = local;
      break;
    }
  }
  // Parabolic interpolation around the peak.
  double refined = static_cast<double>(pick);
  if (pick > lag_min) {
    const double a = r[pick - 1];
    const double b = r[pick];
    const double c = r[pick + 1];
    const double den = a - 2 * b + c;
    if (den != 0.0) {
      refined += 0.5 * (a - c) / den;
    }
  }
  return sample_rate / refined;
}

}  // namespace

double estimate_f0(std::span<const float> samples, int sample_rate, double min_hz, double max_hz) {
  // Median over frames of three longest periods, hopped by half a frame, so
  // slow pitch glides do not smear the correlation peak.
  const auto frame = 3 * static_cast<std::size_t>(sample_rate / min_hz) + 2;
  if (samples.size() < 2 * frame) {
    return frame_f0(samples, sample_rate, min_hz, max_hz);
  }
  std::vector<double> est;
  for (std::size_t start = 0; start + frame <= samples.size(); start += frame / 2) {
    est.push_back(frame_f0(samples.subspan(start, frame), sample_rate, min_hz, max_hz));
  }
  std::nth_element(est.begin(), est.begin() + static_cast<std::ptrdiff_t>(est.size() / 2), est.end());
  return est[est.size() / 2];
}

}  // namespace dkd
