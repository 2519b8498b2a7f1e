#include "dkd/profiler.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "dkd/trainer.hpp"

namespace dkd {

namespace {

// Kernels are single-threaded; recorded so reports state it.
constexpr int kIntraOpThreads = 1;

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

std::vector<ProfileReport> profile(const std::vector<ProfiledModel>& models, const Corpus& corpus, int runs,
                                   std::size_t batch_size) {
  if (runs < 1) {
    throw ParameterError("profile: runs must be >= 1");
  }
  if (batch_size != 1) {
    throw ParameterError("profile: only batch size 1 is supported");
  }
  if (models.empty()) {
    throw ParameterError("profile: no models given");
  }
  if (corpus.size() == 0) {
    throw DataError("profile: corpus is empty");
  }
  std::vector<ProfileReport> reports;
  for (const auto& m : models) {
    const Encoder enc = to_encoder(m.checkpoint);
    std::vector<Tensor> waves;
    waves.reserve(corpus.size());
    std::int64_t flops = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const std::size_t len = corpus.manifest.records[i].length;
      waves.push_back(wave_tensor(corpus, i, len, enc.dtype()));
      flops += count_flops(m.checkpoint.encoder, len).total;
    }
    ProfileReport r;
    r.name = m.name;
    r.params = count_params(m.checkpoint.encoder).total;
    r.flops = flops;
    r.batch_size = batch_size;
    r.intra_op_threads = kIntraOpThreads;
    NoGradScope no_grad;
    for (int run = 0; run < runs; ++run) {
      const auto t0 = std::chrono::steady_clock::now();
      double sink = 0.0;
      for (const auto& w : waves) {
        const EncoderOutput out = enc.forward(w);
        sink += out.layers.back().frames.at(0);
      }
      const auto t1 = std::chrono::steady_clock::now();
      if (!std::isfinite(sink)) {
        throw NumericError("profile: non-finite features from model " + m.name);
      }
      r.run_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    r.mean_seconds = std::accumulate(r.run_seconds.begin(), r.run_seconds.end(), 0.0) / runs;
    reports.push_back(std::move(r));
  }
  const ProfileReport& ref = reports.front();
  for (auto& r : reports) {
    r.param_ratio = static_cast<double>(r.params) / static_cast<double>(ref.params);
    r.speedup = ref.mean_seconds / r.mean_seconds;
    r.flop_ratio = static_cast<double>(ref.flops) / static_cast<double>(r.flops);
  }
  return reports;
}

std::string profile_csv(const std::vector<ProfileReport>& reports) {
  std::ostringstream os;
  os << "name,params,param_ratio,mean_seconds,speedup,flops,flop_ratio,runs,run_seconds,batch,threads\n";
  for (const auto& r : reports) {
    std::string runs;
    for (std::size_t i = 0; i < r.run_seconds.size(); ++i) {
      runs += (i ? ";" : "") + fixed(r.run_seconds[i], 6);
    }
    os << r.name << ',' << r.params << ',' << fixed(r.param_ratio, 6) << ',' << fixed(r.mean_seconds, 6) << ','
       << fixed(r.speedup, 6) << ',' << r.flops << ',' << fixed(r.flop_ratio, 6) << ',' << r.run_seconds.size()
       << ',' << runs << ',' << r.batch_size << ',' << r.intra_op_threads << '\n';
  }
  return os.str();
}

std::string profile_table(const std::vector<ProfileReport>& reports) {
  std::vector<std::array<std::string, 4>> rows;
  rows.push_back({"", "# param.", "Inf. time", "FLOP ratio"});
  rows.push_back({"Model", "Millions", "seconds", ""});
  for (const auto& r : reports) {
    rows.push_back({r.name,
                    fixed(static_cast<double>(r.params) / 1e6, 2) + " (" + fixed(100.0 * r.param_ratio, 0) + "%)",
                    fixed(r.mean_seconds, 3) + " (" + fixed(r.speedup, 2) + "X)", fixed(r.flop_ratio, 2) + "X"});
  }
  std::array<std::size_t, 4> width{};
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < 4; ++c) {
      width[c] = std::max(width[c], row[c].size());
    }
  }
  std::ostringstream os;
  auto rule = [&] {
    for (std::size_t c = 0; c < 4; ++c) {
      os << (c ? "-+-" : "") << std::string(width[c], '-');
    }
    os << '\n';
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i == 2) {
      rule();
    }
    for (std::size_t c = 0; c < 4; ++c) {
      os << (c ? " | " : "") << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c]))
         << rows[i][c];
    }
    os << '\n';
  }
  std::string s = os.str();
  // Strip trailing spaces left by padding.
  std::string out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) {
    line.erase(line.find_last_not_of(' ') + 1);
    out += line + '\n';
  }
  return out;
}

}  // namespace dkd
