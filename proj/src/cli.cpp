#include "dkd/cli.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dkd/checkpoint.hpp"
#include "dkd/grad_battery.hpp"
#include "dkd/profiler.hpp"
#include "dkd/report.hpp"

namespace fs = std::filesystem;

namespace dkd {

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.distill.predicted_layers = {2, 4, 6};
  return c;
}

ExperimentConfig ExperimentConfig::reference() {
  ExperimentConfig c;
  c.teacher = EncoderConfig::reference_teacher();
  c.student = EncoderConfig::reference_student();
  c.distill.predicted_layers = {4, 8, 12};
  c.train = TrainConfig::reference();
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"corpus", to_json(c.corpus)},
          {"teacher", to_json(c.teacher)},
          {"teacher_seed", c.teacher_seed},
          {"student", to_json(c.student)},
          {"distill", to_json(c.distill)},
          {"train", to_json(c.train)},
          {"probe", {{"steps", c.probe.steps}, {"lr", c.probe.lr}, {"batch_size", c.probe.batch_size}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw ConfigError("experiment config must be a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    static const std::vector<std::string> known{"corpus", "teacher", "teacher_seed", "student",
                                                "distill", "train", "probe"};
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("experiment config: unknown section '" + key + "'");
    }
  }
  ExperimentConfig c = ExperimentConfig::desk();
  try {
    if (j.contains("corpus")) {
      c.corpus = corpus_params_from_json(j["corpus"]);
    }
    if (j.contains("teacher")) {
      c.teacher = encoder_config_from_json(j["teacher"]);
    }
    c.teacher_seed = j.value("teacher_seed", c.teacher_seed);
    if (j.contains("student")) {
      c.student = encoder_config_from_json(j["student"]);
    }
    if (j.contains("distill")) {
      c.distill = distill_spec_from_json(j["distill"]);
    }
    if (j.contains("train")) {
      c.train = train_config_from_json(j["train"]);
    }
    if (j.contains("probe")) {
      const auto& p = j["probe"];
      c.probe.steps = p.value("steps", c.probe.steps);
      c.probe.lr = p.value("lr", c.probe.lr);
      c.probe.batch_size = p.value("batch_size", c.probe.batch_size);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.teacher.validate();
  c.student.validate();
  c.distill.validate(c.teacher.num_transformer_layers);
  c.train.validate();
  c.corpus.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

std::vector<int> parse_layer_list(const std::string& text) {
  std::vector<int> layers;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) {
      throw SpecError("--layers: '" + item + "' is not an integer layer index");
    }
    layers.push_back(v);
  }
  if (layers.empty()) {
    throw SpecError("--layers: empty layer list");
  }
  return layers;
}

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--config", c.config, "Experiment config (JSON)");
  sub->add_option("--out", c.out, "Output directory");
}

ExperimentConfig config_of(const Common& c) {
  return c.config.empty() ? ExperimentConfig::desk() : load_experiment_config(c.config);
}

Corpus corpus_of(const std::string& dir, const ExperimentConfig& cfg, std::ostream& out) {
  if (!dir.empty()) {
    return load_corpus(dir);
  }
  out << "generating corpus (seed " << cfg.corpus.seed << ")\n";
  return generate_corpus(cfg.corpus);
}

void put_text(const fs::path& p, const std::string& s) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<ProbeTaskKind> parse_tasks(const std::string& text) {
  if (text == "all") {
    return {ProbeTaskKind::speaker, ProbeTaskKind::content, ProbeTaskKind::intent};
  }
  std::vector<ProbeTaskKind> tasks;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    tasks.push_back(probe_task_kind_from_string(item));
  }
  if (tasks.empty()) {
    throw ParameterError("--task: no task given");
  }
  return tasks;
}

std::string weights_csv(const std::vector<ProbeResult>& results) {
  std::ostringstream os;
  os << "task,representation,weight\n";
  for (const auto& r : results) {
    const auto w = r.weights.softmax();
    for (std::size_t i = 0; i < w.size(); ++i) {
      os << to_string(r.task.kind) << (r.shuffled ? "_shuffled" : "") << ',' << r.names[i] << ',' << std::fixed
         << std::setprecision(9) << w[i] << std::defaultfloat << '\n';
    }
  }
  return os.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-wise multi-task distillation of speech encoders", "dkd"};
  app.require_subcommand(1);

  Common c_gen, c_dist, c_strip, c_probe, c_anal, c_prof, c_grad, c_rep;

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus");
  add_common(gen, c_gen);
  int speakers = 0, contents = 0, intents = 0, per_cell = 0;
  double duration = 0.0;
  gen->add_option("--speakers", speakers, "Number of speakers");
  gen->add_option("--contents", contents, "Number of content classes");
  gen->add_option("--intents", intents, "Number of intent classes");
  gen->add_option("--per-cell", per_cell, "Utterances per (speaker, content, intent) cell");
  gen->add_option("--duration", duration, "Utterance duration in seconds");

  auto* dist = app.add_subcommand("distill", "Distill a student from a frozen teacher");
  add_common(dist, c_dist);
  std::string layers, corpus_dir, teacher_path, reduction;
  double lambda = 1.0, lr = 0.0;
  bool no_cos = false, no_teacher_init = false, unfreeze = false, hidden = false, no_clip = false;
  std::int64_t steps = 0;
  std::size_t batch = 0;
  dist->add_option("--layers", layers, "Predicted teacher layers, e.g. 4,8,12");
  dist->add_option("--lambda", lambda, "Weight of the cosine term");
  dist->add_flag("--no-cos", no_cos, "Drop the cosine term");
  dist->add_flag("--no-teacher-init", no_teacher_init, "Fresh student initialization");
  dist->add_flag("--unfreeze-frontend", unfreeze, "Train the conv front-end");
  dist->add_flag("--predict-with-hidden", hidden, "Regress teacher layers with student layers, no heads");
  dist->add_flag("--no-clip", no_clip, "Disable gradient clipping");
  dist->add_option("--reduction", reduction, "mean_over_time or sum_over_time");
  dist->add_option("--corpus", corpus_dir, "Corpus directory (default: generate from config)");
  dist->add_option("--teacher", teacher_path, "Teacher checkpoint (default: build from config)");
  dist->add_option("--steps", steps, "Override total updates");
  dist->add_option("--batch", batch, "Override batch size");
  dist->add_option("--lr", lr, "Override peak learning rate");

  auto* strip = app.add_subcommand("strip-heads", "Remove prediction heads from a checkpoint");
  add_common(strip, c_strip);
  std::string strip_in;
  strip->add_option("--in", strip_in, "Student checkpoint")->required();

  auto* probe = app.add_subcommand("probe", "Frozen-upstream weighted-sum probing");
  add_common(probe, c_probe);
  std::string upstream, probe_corpus, task_list = "all";
  int probe_steps = -1;
  bool control = false;
  probe->add_option("--upstream", upstream, "Upstream checkpoint")->required();
  probe->add_option("--corpus", probe_corpus, "Corpus directory (default: generate from config)");
  probe->add_option("--task", task_list, "speaker, content, intent, a comma list, or all");
  probe->add_option("--steps", probe_steps, "Probe optimizer steps");
  probe->add_flag("--control", control, "Also run shuffled-label controls");

  auto* anal = app.add_subcommand("analyze-layers", "Normalized layer importance of a headed upstream");
  add_common(anal, c_anal);
  std::string anal_up, anal_corpus, anal_tasks = "all", order = "multiply";
  int anal_steps = -1;
  anal->add_option("--upstream", anal_up, "Upstream checkpoint with heads")->required();
  anal->add_option("--corpus", anal_corpus, "Corpus directory (default: generate from config)");
  anal->add_option("--task", anal_tasks, "Tasks to analyze");
  anal->add_option("--order", order, "multiply (weight * norm) or divide (weight / norm)");
  anal->add_option("--steps", anal_steps, "Probe optimizer steps");

  auto* prof = app.add_subcommand("profile", "Parameter, FLOP and inference-time report");
  add_common(prof, c_prof);
  std::string models, prof_corpus;
  int runs = 3;
  std::size_t prof_batch = 1, limit = 0;
  prof->add_option("--models", models, "Comma list of checkpoints; first is the reference "
                                       "(default: teacher and student built from config)");
  prof->add_option("--corpus", prof_corpus, "Corpus directory (default: generate from config)");
  prof->add_option("--runs", runs, "Timed passes per model");
  prof->add_option("--batch", prof_batch, "Batch size (1)");
  prof->add_option("--limit", limit, "Use only the first N utterances (0: all)");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op");
  add_common(grad, c_grad);
  int shapes = 3;
  double tolerance = 1e-5;
  grad->add_option("--shapes", shapes, "Random shapes per op");
  grad->add_option("--tolerance", tolerance, "Maximum relative error");

  auto* rep = app.add_subcommand("report", "CSV tables and SVG plots from run directories");
  add_common(rep, c_rep);
  std::string rep_in, fig = "all";
  rep->add_option("--in", rep_in, "Run-set directory")->required();
  rep->add_option("--fig", fig, "layer-weights, size-accuracy, loss-curves, layer-sweep or all");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg = config_of(c_gen);
      CorpusParams p = cfg.corpus;
      if (gen->count("--seed")) {
        p.seed = c_gen.seed;
      }
      if (speakers) p.n_speakers = speakers;
      if (contents) p.n_contents = contents;
      if (intents) p.n_intents = intents;
      if (per_cell) p.utterances_per_cell = per_cell;
      if (duration > 0.0) p.duration_s = duration;
      p.validate();
      if (p.samples_per_utterance() < cfg.student.receptive_field() ||
          p.samples_per_utterance() < cfg.teacher.receptive_field()) {
        throw ParameterError("gen-corpus: utterances of " + std::to_string(p.samples_per_utterance()) +
                             " samples are shorter than the model receptive field (" +
                             std::to_string(cfg.teacher.receptive_field()) + ")");
      }
      const Corpus corpus = generate_corpus(p);
      save_corpus(corpus, c_gen.out);
      out << "wrote " << corpus.size() << " utterances (" << corpus.total_seconds() << " s) to " << c_gen.out
          << '\n';
    } else if (dist->parsed()) {
      ExperimentConfig cfg = config_of(c_dist);
      const Encoder teacher =
          teacher_path.empty() ? build(cfg.teacher, cfg.teacher_seed) : to_encoder(load_checkpoint(teacher_path));
      DistillSpec spec = cfg.distill;
      const int depth = teacher.config().num_transformer_layers;
      if (!layers.empty()) {
        const DistillSpec parsed = validate_layer_set(parse_layer_list(layers), depth);
        spec.predicted_layers = parsed.predicted_layers;
      }
      if (dist->count("--lambda")) {
        spec.lambda = lambda;
      }
      if (no_cos) {
        spec.use_cosine = false;
      }
      if (hidden) {
        spec.predict_with_hidden = true;
      }
      if (!reduction.empty()) {
        spec.reduction = distill_spec_from_json({{"predicted_layers", spec.predicted_layers},
                                                 {"reduction", reduction}})
                             .reduction;
      }
      spec.validate(depth);
      TrainConfig tc = cfg.train;
      if (dist->count("--seed")) {
        tc.seed = c_dist.seed;
      }
      if (steps > 0) tc.total_updates = steps;
      if (batch > 0) tc.batch_size = batch;
      if (lr > 0.0) tc.peak_lr = lr;
      if (no_teacher_init) tc.teacher_init = false;
      if (unfreeze) tc.freeze_front_end = false;
      if (no_clip) tc.clip_norm = 0.0;
      tc.validate();
      const Corpus corpus = corpus_of(corpus_dir, cfg, out);

      const fs::path dir = c_dist.out;
      DistillOptions opts;
      opts.nan_dump = dir / "nan_dump.dkd";
      const std::int64_t every = std::max<std::int64_t>(1, tc.total_updates / 10);
      opts.on_step = [&](const TrainRecord& r) {
        if (r.step == 1 || r.step % every == 0) {
          out << "step " << r.step << " lr " << r.lr << " loss " << r.loss_total << '\n';
        }
      };
      const DistillResult res = run_distillation(teacher, cfg.student, spec, tc, corpus, opts);
      save_checkpoint(res.checkpoint, dir / "student.dkd");
      if (teacher_path.empty()) {
        save_checkpoint(to_checkpoint(teacher, {{"role", "teacher"}, {"seed", cfg.teacher_seed}}),
                        dir / "teacher.dkd");
      }
      put_text(dir / "train_log.csv", res.log.to_csv());
      const nlohmann::json run = {
          {"predicted_layers", spec.predicted_layers},
          {"lambda", spec.lambda},
          {"use_cosine", spec.use_cosine},
          {"predict_with_hidden", spec.predict_with_hidden},
          {"teacher_init", tc.teacher_init},
          {"freeze_front_end", tc.freeze_front_end},
          {"total_updates", tc.total_updates},
          {"seed", tc.seed},
          {"params", count_params(res.checkpoint.encoder.without_heads()).total},
          {"params_with_heads", count_params(res.checkpoint.encoder).total},
          {"teacher_digest", res.teacher_digest_before},
          {"log_digest", res.log.digest()},
          {"checkpoint_digest", checkpoint_digest(res.checkpoint)}};
      put_text(dir / "run.json", run.dump(2) + "\n");
      out << "wrote " << (dir / "student.dkd").string() << " and " << (dir / "train_log.csv").string() << '\n';
    } else if (strip->parsed()) {
      const StripResult r = strip_heads(load_checkpoint(strip_in));
      const fs::path dst = fs::path(c_strip.out) / "stripped.dkd";
      save_checkpoint(r.checkpoint, dst);
      if (r.status == StripStatus::no_heads) {
        err << "warning: " << strip_in << " has no prediction heads; written unchanged\n";
      } else {
        out << "removed " << r.removed_scalars << " head parameters; wrote " << dst.string() << '\n';
      }
    } else if (probe->parsed()) {
      ExperimentConfig cfg = config_of(c_probe);
      ProbeConfig pc = cfg.probe;
      pc.seed = c_probe.seed;
      if (probe_steps >= 0) pc.steps = probe_steps;
      const Checkpoint up = load_checkpoint(upstream);
      const auto tasks = parse_tasks(task_list);
      const Corpus corpus = corpus_of(probe_corpus, cfg, out);
      const Encoder enc = to_encoder(up);
      const UpstreamFeatures f = extract_features(enc, corpus);
      std::vector<ProbeResult> results;
      for (ProbeTaskKind kind : tasks) {
        const ProbeTask task = probe_task(kind, corpus.manifest);
        results.push_back(train_probe(f, corpus.manifest, task, pc));
        if (control) {
          ProbeConfig shuffled = pc;
          shuffled.shuffle_labels = true;
          results.push_back(train_probe(f, corpus.manifest, task, shuffled));
        }
      }
      if (parameter_digest(enc) != f.upstream_digest) {
        throw IntegrityError("probe: upstream parameters changed during probing");
      }
      put_text(fs::path(c_probe.out) / "probe_accuracy.csv", accuracy_csv(results));
      put_text(fs::path(c_probe.out) / "probe_weights.csv", weights_csv(results));
      out << accuracy_csv(results);
    } else if (anal->parsed()) {
      ExperimentConfig cfg = config_of(c_anal);
      ProbeConfig pc = cfg.probe;
      pc.seed = c_anal.seed;
      if (anal_steps >= 0) pc.steps = anal_steps;
      ImportanceOrder io = ImportanceOrder::multiply_then_normalize;
      if (order == "divide") {
        io = ImportanceOrder::divide_then_normalize;
      } else if (order != "multiply") {
        throw ParameterError("--order: expected multiply or divide, got '" + order + "'");
      }
      const Checkpoint up = load_checkpoint(anal_up);
      const auto tasks = parse_tasks(anal_tasks);
      if (!up.encoder.has_heads()) {
        // Checked before generating a corpus.
        analyze_layer_weights(up, tasks, Corpus{}, pc, io);
      }
      const Corpus corpus = corpus_of(anal_corpus, cfg, out);
      const auto rows = analyze_layer_weights(up, tasks, corpus, pc, io);
      put_text(fs::path(c_anal.out) / "layer_importance.csv", importance_csv(rows));
      out << importance_csv(rows);
    } else if (prof->parsed()) {
      ExperimentConfig cfg = config_of(c_prof);
      std::vector<ProfiledModel> list;
      if (models.empty()) {
        list.push_back({"teacher", to_checkpoint(build(cfg.teacher, cfg.teacher_seed))});
        list.push_back({"student", to_checkpoint(build(cfg.student, cfg.teacher_seed))});
      } else {
        std::stringstream ss(models);
        std::string item;
        while (std::getline(ss, item, ',')) {
          list.push_back({fs::path(item).stem().string(), load_checkpoint(item)});
        }
      }
      Corpus corpus = corpus_of(prof_corpus, cfg, out);
      if (limit > 0 && limit < corpus.size()) {
        corpus.manifest.records.resize(limit);
      }
      const auto reports = profile(list, corpus, runs, prof_batch);
      put_text(fs::path(c_prof.out) / "profile.csv", profile_csv(reports));
      put_text(fs::path(c_prof.out) / "profile.txt", profile_table(reports));
      out << profile_table(reports);
    } else if (grad->parsed()) {
      const auto cases = run_grad_battery(c_grad.seed, shapes);
      put_text(fs::path(c_grad.out) / "grad_check.csv", grad_battery_csv(cases));
      double worst = 0.0;
      std::string worst_op;
      for (const auto& c : cases) {
        if (c.report.max_rel_error > worst) {
          worst = c.report.max_rel_error;
          worst_op = c.op + "/" + c.input;
        }
      }
      out << cases.size() << " cases, max relative error " << worst << (worst_op.empty() ? "" : " (" + worst_op + ")")
          << '\n';
      if (worst > tolerance) {
        throw NumericError("grad-check: " + worst_op + " exceeds tolerance " + std::to_string(tolerance));
      }
    } else if (rep->parsed()) {
      const auto written = emit_report(rep_in, report_figure_from_string(fig), c_rep.out);
      for (const auto& p : written) {
        out << "wrote " << p.string() << '\n';
      }
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.is_validation() ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace dkd
