#pragma once

#include <string>
#include <vector>

#include "dkd/checkpoint.hpp"
#include "dkd/corpus.hpp"

namespace dkd {

struct ProfiledModel {
  std::string name;
  Checkpoint checkpoint;
};

struct ProfileReport {
  std::string name;
  std::int64_t params = 0;
  // params / reference params.
  double param_ratio = 1.0;
  std::vector<double> run_seconds;
  double mean_seconds = 0.0;
  // reference mean seconds / mean seconds.
  double speedup = 1.0;
  std::int64_t flops = 0;
  // reference flops / flops.
  double flop_ratio = 1.0;
  std::size_t batch_size = 1;
  int intra_op_threads = 1;
};

// Full-corpus feature extraction `runs` times per model, sequentially, one
// utterance per forward. The first model is the reference. Parameter counts
// come from count_params; FLOPs are per corpus pass.
std::vector<ProfileReport> profile(const std::vector<ProfiledModel>& models, const Corpus& corpus, int runs,
                                   std::size_t batch_size = 1);

// name,params,param_ratio,mean_seconds,speedup,flops,flop_ratio,runs,run_seconds,batch,threads
std::string profile_csv(const std::vector<ProfileReport>& reports);
// Columns: Model | # param. (M) | Inf. time (s) | FLOP ratio.
std::string profile_table(const std::vector<ProfileReport>& reports);

}  // namespace dkd
