#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "wavemsnet/checkpoint.hpp"
#include "wavemsnet/config.hpp"
#include "wavemsnet/data.hpp"
#include "wavemsnet/eval.hpp"
#include "wavemsnet/model.hpp"
#include "wavemsnet/trainer.hpp"

namespace wavemsnet {

namespace cli {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << text;
}

/// Fixed modelling choices echoed into every run manifest.
inline KeyValues decision_block() {
  KeyValues kv;
  kv.set("decision.loss", "softmax_cross_entropy");
  kv.set("decision.init", "normal std sqrt(2/fan_in); output layer std 0.1/sqrt(fan_in); zero bias; gamma 1 beta 0");
  kv.set("decision.time_padding", "total (ceil(L/s)-1)*s+k-L, left floor(P/2)");
  kv.set("decision.backend_padding", "3x3 stride 1 pad 1");
  kv.set("decision.pool_remainder", "dropped");
  kv.set("decision.batchnorm", "eps 1e-5, running = 0.9*running + 0.1*batch, biased variance");
  kv.set("decision.weight_decay_scope", "conv and fc weights");
  kv.set("decision.epoch", "one random window per clip, final short batch kept");
  kv.set("decision.frozen_frontend", "conv1/conv2 weights, biases and bn affine fixed; bn running stats fixed");
  kv.set("decision.phase1_logmel_channel", "zero filled");
  kv.set("decision.flatten_order", "channel,freq,time");
  kv.set("decision.vote", "mean softmax over evenly spaced windows, lowest index wins ties");
  kv.set("decision.stft_frames", "center padded by reflection, last frame dropped");
  return kv;
}

struct Context {
  KeyValues config;
  std::filesystem::path out_dir;
  std::string command;

  std::filesystem::path dataset_path() const { return config.require("dataset.path"); }

  DatasetManifest dataset() const {
    const auto subset = config.get("dataset.subset").value_or("all");
    if (subset != "all" && subset != "esc10") {
      throw Error(ErrorCode::config, "dataset.subset must be 'all' or 'esc10', got '" + subset + "'");
    }
    auto m = load_dataset(dataset_path(), subset == "esc10");
    validate_manifest(m);
    return m;
  }

  /// Training clips: every fold except `test_fold` (0 keeps all folds).
  std::vector<std::size_t> train_indices(const DatasetManifest& m, std::size_t test_fold) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.clips.size(); ++i) {
      if (test_fold == 0 || m.clips[i].fold != test_fold) idx.push_back(i);
    }
    if (idx.empty()) throw Error(ErrorCode::invalid_argument, "no training clips left");
    return idx;
  }

  std::vector<std::size_t> test_indices(const DatasetManifest& m, std::size_t fold) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.clips.size(); ++i) {
      if (fold == 0 || m.clips[i].fold == fold) idx.push_back(i);
    }
    if (idx.empty()) throw Error(ErrorCode::invalid_argument, "fold " + std::to_string(fold) + " has no clips");
    return idx;
  }

  ModelConfig model_config(std::size_t n_classes) const {
    KeyValues kv = config;
    if (!kv.contains("model.n_classes")) kv.set_number("model.n_classes", n_classes);
    auto cfg = ModelConfig::from_key_values(kv);
    cfg.validate();
    return cfg;
  }

  VoteConfig vote() const {
    VoteConfig v;
    v.n_windows = config.number<std::size_t>("vote.n_windows", v.n_windows);
    v.validate();
    return v;
  }

  void write_manifest(const KeyValues& extra) const {
    KeyValues kv;
    kv.set("command", command);
    kv.merge(config);
    kv.merge(extra);
    kv.merge(decision_block());
    write_text(out_dir / "run_manifest.txt", kv.str());
  }
};

inline int train_command(Context& ctx, TrainMode mode, std::size_t fold, const std::string& ckpt_path,
                         std::ostream& out) {
  const auto data = ctx.dataset();
  const auto schedule = TrainSchedule::from_key_values(ctx.config);
  const auto logmel = logmel_config_from(ctx.config);
  TrainOptions opts;
  opts.out_dir = ctx.out_dir;
  opts.checkpoint_every = ctx.config.number<std::size_t>("checkpoint.every", 0);

  const auto clips = load_clips(data, ctx.train_indices(data, fold));
  KeyValues extra = schedule.to_key_values();
  extra.merge(logmel_key_values(logmel));
  extra.set("train.mode", to_string(mode));
  extra.set_number("train.holdout_fold", fold);
  extra.set("dataset.source", to_string(data.source));
  extra.set_number("dataset.clips", clips.size());
  std::filesystem::create_directories(ctx.out_dir);
  write_text(ctx.out_dir / "dataset.csv", manifest_csv(data));
  if (!data.label_map.empty()) write_text(ctx.out_dir / "label_map.csv", label_map_csv(data));

  TrainResult result;
  if (mode == TrainMode::phase2_fusion_frozen || mode == TrainMode::phase2_fusion_unfrozen) {
    if (ckpt_path.empty()) throw Error(ErrorCode::config, "train-phase2 needs --ckpt <phase1 checkpoint>");
    extra.set("train.init_checkpoint", ckpt_path);
    ctx.write_manifest(extra);
    result = train_phase2<float>(load_checkpoint(ckpt_path), clips, schedule,
                                 mode == TrainMode::phase2_fusion_frozen, logmel, opts);
  } else {
    const auto cfg = ctx.model_config(data.n_classes());
    extra.merge(cfg.to_key_values());
    ctx.write_manifest(extra);
    WaveMsNet<float> model(cfg, schedule.seed);
    result = train(model, clips, mode, schedule, logmel, opts);
  }
  const auto& last = result.metrics.back();
  out << "epochs " << result.metrics.size() << " final loss " << format_number(last.mean_loss) << " train_acc "
      << format_number(last.train_acc) << "\n";
  out << "checkpoint " << (ctx.out_dir / (result.checkpoint.phase() + ".ckpt")).string() << "\n";
  return 0;
}

inline void write_report(const Context& ctx, const FoldReport& rep, std::size_t fold, std::ostream& out) {
  write_text(ctx.out_dir / "confusion.csv", confusion_csv(rep));
  write_text(ctx.out_dir / "clips.csv", clip_log_csv(rep));
  out << "fold " << fold << " accuracy " << format_number(rep.accuracy) << " (" << rep.correct << "/"
      << rep.clips.size() << ")\n";
}

inline int eval_command(Context& ctx, const std::string& ckpt_path, std::size_t fold, std::ostream& out) {
  if (ckpt_path.empty()) throw Error(ErrorCode::config, "eval needs --ckpt");
  const auto data = ctx.dataset();
  const auto ckpt = load_checkpoint(ckpt_path);
  auto model = model_from_checkpoint<float>(ckpt);
  const auto vote_cfg = ctx.vote();
  KeyValues extra;
  extra.set("eval.checkpoint", ckpt_path);
  extra.set_number("eval.fold", fold);
  std::filesystem::create_directories(ctx.out_dir);
  ctx.write_manifest(extra);
  const auto clips = load_clips(data, ctx.test_indices(data, fold));
  const auto rep = evaluate_fold(model, input_kind(ckpt), clips, vote_cfg, logmel_config_from(ckpt.meta));
  write_report(ctx, rep, fold, out);
  return 0;
}

inline int ensemble_command(Context& ctx, const std::string& path_a, const std::string& path_b, std::size_t fold,
                            std::ostream& out) {
  if (path_a.empty() || path_b.empty()) throw Error(ErrorCode::config, "ensemble-eval needs --ckpt-a and --ckpt-b");
  const auto data = ctx.dataset();
  const auto ca = load_checkpoint(path_a), cb = load_checkpoint(path_b);
  auto ma = model_from_checkpoint<float>(ca);
  auto mb = model_from_checkpoint<float>(cb);
  if (ma.config().n_classes != mb.config().n_classes) {
    throw Error(ErrorCode::config, "ensemble members disagree on class count");
  }
  const auto vote_cfg = ctx.vote();
  KeyValues extra;
  extra.set("eval.checkpoint_a", path_a);
  extra.set("eval.checkpoint_b", path_b);
  extra.set_number("eval.fold", fold);
  std::filesystem::create_directories(ctx.out_dir);
  ctx.write_manifest(extra);
  const auto clips = load_clips(data, ctx.test_indices(data, fold));
  const auto predict = ensemble_predictor(model_predictor(ma, input_kind(ca), vote_cfg, logmel_config_from(ca.meta)),
                                          model_predictor(mb, input_kind(cb), vote_cfg, logmel_config_from(cb.meta)));
  write_report(ctx, evaluate_clips(clips, ma.config().n_classes, predict), fold, out);
  return 0;
}

inline int filters_command(Context& ctx, const std::string& ckpt_path, std::size_t scale, std::ostream& out) {
  if (ckpt_path.empty()) throw Error(ErrorCode::config, "analyze-filters needs --ckpt");
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto rs = scale ? filter_response(ckpt, scale) : filter_responses(ckpt);
  std::filesystem::create_directories(ctx.out_dir);
  KeyValues extra;
  extra.set("analysis.checkpoint", ckpt_path);
  extra.set_number("analysis.scale", scale);
  ctx.write_manifest(extra);
  write_text(ctx.out_dir / "filters.csv", filter_csv(rs));
  write_text(ctx.out_dir / "spectra.csv", spectra_csv(rs));
  std::size_t band = 0;
  for (const auto& r : rs) band += r.band_pass() ? 1 : 0;
  out << "filters " << rs.size() << " band_pass " << band << " fraction "
      << format_number(double(band) / double(rs.size())) << "\n";
  return 0;
}

inline int synth_command(Context& ctx, std::ostream& out) {
  SynthOptions opt;
  opt.n_classes = ctx.config.number<std::size_t>("synth.classes", opt.n_classes);
  opt.clips_per_class = ctx.config.number<std::size_t>("synth.clips_per_class", opt.clips_per_class);
  opt.seed = ctx.config.number<std::uint64_t>("synth.seed", opt.seed);
  opt.seconds = ctx.config.number<double>("synth.seconds", opt.seconds);
  const auto m = synth_dataset(ctx.out_dir, opt);
  out << "wrote " << m.clips.size() << " clips to " << ctx.out_dir.string() << "\n";
  return 0;
}

}  // namespace cli

/// Entry point of the command-line tool. Returns the process exit status.
inline int run_experiment(int argc, const char* const* argv, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  CLI::App app{"Multi-scale waveform sound classifier: training, evaluation and filter analysis"};
  app.require_subcommand(1);

  std::string config_file, out_dir = "run", dataset, ckpt, ckpt_a, ckpt_b;
  std::vector<std::string> sets;
  std::size_t fold = 0, scale = 0;
  bool unfrozen = false;

  auto common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("--config", config_file, "key = value config file");
    sub->add_option("--set", sets, "override a config key (key=value)");
    sub->add_option("--out", out_dir, "output directory");
    if (needs_data) sub->add_option("--dataset", dataset, "dataset directory (dataset.path)");
  };
  auto* p1 = app.add_subcommand("train-phase1", "train the waveform model");
  auto* p2 = app.add_subcommand("train-phase2", "fusion training from a phase-1 checkpoint");
  auto* one = app.add_subcommand("train-onephase", "fusion training from scratch");
  auto* mel = app.add_subcommand("train-logmel-backend", "train the backend on log-mel input only");
  auto* ev = app.add_subcommand("eval", "probability-voting evaluation of one checkpoint");
  auto* ens = app.add_subcommand("ensemble-eval", "average two models' voted probabilities");
  auto* flt = app.add_subcommand("analyze-filters", "frequency responses of Conv1 filters");
  auto* syn = app.add_subcommand("synth-data", "write the synthetic tone dataset");
  for (auto* s : {p1, p2, one, mel, ev, ens}) {
    common(s, true);
    s->add_option("--fold", fold, "held-out fold 1..5 (0: none for training, all for eval)");
  }
  common(flt, false);
  common(syn, false);
  p2->add_option("--ckpt", ckpt, "phase-1 checkpoint");
  p2->add_flag("--unfrozen", unfrozen, "keep training Conv1/Conv2");
  ev->add_option("--ckpt", ckpt, "checkpoint");
  ens->add_option("--ckpt-a", ckpt_a, "first model");
  ens->add_option("--ckpt-b", ckpt_b, "second model");
  flt->add_option("--ckpt", ckpt, "checkpoint");
  flt->add_option("--scale", scale, "scale 1..n (0: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    cli::Context ctx;
    ctx.command = app.get_subcommands().front()->get_name();
    if (!config_file.empty()) ctx.config = KeyValues::load(config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error(ErrorCode::config, "--set expects key=value, got '" + s + "'");
      ctx.config.set(std::string(KeyValues::trim(s.substr(0, eq))), std::string(KeyValues::trim(s.substr(eq + 1))));
    }
    if (!dataset.empty()) ctx.config.set("dataset.path", dataset);
    ctx.out_dir = out_dir;
    if (fold > kFolds) throw Error(ErrorCode::config, "--fold must be in 0..5");

    const auto& cmd = ctx.command;
    if (cmd == "train-phase1") return cli::train_command(ctx, TrainMode::phase1_waveform, fold, "", out);
    if (cmd == "train-phase2") {
      return cli::train_command(
          ctx, unfrozen ? TrainMode::phase2_fusion_unfrozen : TrainMode::phase2_fusion_frozen, fold, ckpt, out);
    }
    if (cmd == "train-onephase") return cli::train_command(ctx, TrainMode::one_phase_fusion, fold, "", out);
    if (cmd == "train-logmel-backend") return cli::train_command(ctx, TrainMode::logmel_only_backend, fold, "", out);
    if (cmd == "eval") return cli::eval_command(ctx, ckpt, fold, out);
    if (cmd == "ensemble-eval") return cli::ensemble_command(ctx, ckpt_a, ckpt_b, fold, out);
    if (cmd == "analyze-filters") return cli::filters_command(ctx, ckpt, scale, out);
    if (cmd == "synth-data") return cli::synth_command(ctx, out);
    throw Error(ErrorCode::invalid_argument, "unknown command " + cmd);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace wavemsnet
