#pragma once

// The `hpgn` command: train, eval, gradcheck, graph, significance, synth.
// Exit codes: 0 ok, 1 usage/config, 2 io/data, 3 numerical abort, 4 check failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hpgn/checkpoint.hpp"
#include "hpgn/config.hpp"
#include "hpgn/data.hpp"
#include "hpgn/eval.hpp"
#include "hpgn/gradcheck_suite.hpp"
#include "hpgn/grid_graph.hpp"
#include "hpgn/model.hpp"
#include "hpgn/parallel.hpp"
#include "hpgn/train.hpp"

namespace hpgn {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3, kExitCheck = 4 };

namespace cli_detail {

namespace fs = std::filesystem;

// Train/eval subsets of a loaded dataset. Untagged manifests use every row.
inline Dataset training_split(const Dataset& all) { return all.has_split("train") ? all.select("train") : all; }

inline Dataset evaluation_split(const Dataset& all) {
  if (!all.has_split("train") && !all.has_split("probe") && !all.has_split("gallery")) return all;
  Dataset out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all.samples[i].split != "train") {
      out.samples.push_back(all.samples[i]);
      out.images.push_back(all.images[i]);
    }
  return out;
}

inline void apply_threads(std::size_t flag, bool deterministic) {
  set_num_threads(deterministic ? 1 : resolve_thread_count(flag));
}

struct TrainArgs {
  std::string config, data, out, variant, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::vector<std::string> overrides;
  bool deterministic = false;
  std::size_t threads = 0;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  if (!a.variant.empty()) cfg.model.variant = parse_variant(a.variant);
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.schedule.total_epochs = *a.epochs;
  cfg.validate();
  apply_threads(a.threads, a.deterministic);

  // A resumed run keeps its stored configuration, so the checkpoint decides
  // the image size used to load the data.
  std::optional<TrainState> st;
  if (!a.resume.empty()) {
    st.emplace(restore_state(load_checkpoint(a.resume)));
    if (st->config.to_ini() != cfg.to_ini() && (!a.config.empty() || !a.overrides.empty()))
      out << "note: resuming with the configuration stored in " << a.resume << '\n';
    // Only the epoch budget may be extended on resume.
    if (a.epochs) st->config.schedule.total_epochs = *a.epochs;
  }
  const RunConfig& active = st ? st->config : cfg;
  const Dataset all = load_manifest(a.data, active.model.input_size);
  const Dataset train_set = training_split(all);
  fs::create_directories(a.out);
  if (!st) st.emplace(initial_state(cfg, train_set));
  out << "training " << to_string(st->config.model.variant) << " on " << train_set.size() << " images ("
      << st->model.config().num_classes << " identities), " << st->model.parameter_count()
      << " parameters, epochs " << st->epoch + 1 << ".." << st->config.schedule.total_epochs << '\n';
  TrainOptions opt;
  opt.out_dir = a.out;
  opt.quiet = false;
  auto res = train(std::move(*st), train_set, opt);
  out << "wrote " << (fs::path(a.out) / "last.ckpt").string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data, out, protocol, split_mode;
  std::optional<std::size_t> repeats;
  std::uint64_t seed = 0;
  bool per_repeat = false;
  std::size_t threads = 0;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  apply_threads(a.threads, false);
  TrainState st = restore_state(load_checkpoint(a.checkpoint));
  const std::string protocol = a.protocol.empty() ? st.config.protocol : a.protocol;
  if (protocol != "crosscam" && protocol != "repeated")
    throw ConfigError("--protocol must be crosscam or repeated, got '" + protocol + "'");
  const SplitMode mode = a.split_mode.empty() ? st.config.split_mode : parse_split_mode(a.split_mode);
  const std::size_t repeats = a.repeats ? *a.repeats : st.config.repeats;
  if (repeats < 1) throw ConfigError("--repeats must be >= 1");

  const Dataset all = load_manifest(a.data, st.config.model.input_size);
  EvalReport report;
  if (protocol == "crosscam") {
    Dataset probe, gallery;
    if (all.has_split("probe") || all.has_split("gallery")) {
      probe = all.select("probe");
      gallery = all.select("gallery");
    } else {
      probe = gallery = evaluation_split(all);
    }
    const auto fp = embed_dataset(st, probe);
    const auto fg = embed_dataset(st, gallery);
    report = evaluate_crosscam(fp, probe.samples, fg, gallery.samples);
  } else {
    const Dataset eval_set = evaluation_split(all);
    report = evaluate_repeated_splits(embed_dataset(st, eval_set), eval_set.samples, repeats, a.seed, mode);
  }
  write_report_summary(out, report);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream csv(fs::path(a.out) / "report.csv");
    write_report_csv(csv, report, a.per_repeat);
    std::ofstream summary(fs::path(a.out) / "summary.txt");
    write_report_summary(summary, report);
    if (!csv || !summary) throw IoError("cannot write report files under " + a.out);
  }
  return kExitOk;
}

inline int cmd_gradcheck(const std::string& scope, double eps, double tol, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = run_gradcheck_scope(scope, eps, tol);
  bool ok = true;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-48s %-6s %12s %8s\n", "scope", "check", "result", "max rel err",
                "rounding");
  out << line;
  for (const auto& r : reports) {
    std::size_t limited = 0;
    for (const auto& e : r.report.entries) limited += e.rounding_limited;
    std::snprintf(line, sizeof line, "%-8s %-48s %-6s %12.3e %8zu\n", r.scope.c_str(), r.check.c_str(),
                  r.report.pass ? "PASS" : "FAIL", r.report.max_rel_error, limited);
    out << line;
    for (const auto& e : r.report.entries)
      if (!e.pass) {
        std::snprintf(line, sizeof line, "           %s[%zu]: analytic %.9g numeric %.9g (rel %.3e)\n",
                      e.name.c_str(), e.worst_index, e.worst_analytic, e.worst_numeric, e.max_rel_error);
        out << line;
      }
    ok = ok && r.report.pass;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::snprintf(line, sizeof line, "%s (eps %g, tol %g, %.1f s)\n", ok ? "all checks passed" : "gradient check FAILED",
                eps, tol, secs);
  out << line;
  return ok ? kExitOk : kExitCheck;
}

inline int cmd_graph(std::int64_t h, std::int64_t w, const std::string& path, std::ostream& out) {
  const GridGraph g = build_grid_graph(h, w);
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + path);
  write_graph_dump(os, g);
  out << "wrote " << g.edges() << " triplets to " << path << '\n';
  return kExitOk;
}

inline int cmd_significance(const std::string& checkpoint, const std::string& dir, std::ostream& out,
                            std::ostream& err) {
  TrainState st = restore_state(load_checkpoint(checkpoint));
  const SignificanceExport ex = export_significance(st.model);
  fs::create_directories(dir);
  if (!ex.warning.empty()) err << "warning: " << ex.warning << '\n';
  for (const auto& m : ex.maps) {
    const std::string stem = "w" + std::to_string(m.window) + "_sg" + std::to_string(m.layer);
    std::ofstream txt(fs::path(dir) / (stem + ".txt"));
    write_heatmap_text(txt, m);
    std::ofstream pgm(fs::path(dir) / (stem + ".pgm"), std::ios::binary);
    write_heatmap_pgm(pgm, m);
    if (!txt || !pgm) throw IoError("cannot write significance maps under " + dir);
  }
  out << "exported " << ex.maps.size() << " significance maps to " << dir << '\n';
  return kExitOk;
}

inline int cmd_synth(const SynthSpec& spec, const std::string& dir, std::ostream& out) {
  const Manifest m = generate_synthetic(spec, dir);
  out << "wrote " << m.rows.size() << " images and manifest.csv to " << dir << '\n';
  return kExitOk;
}

}  // namespace cli_detail

// Parses argv and dispatches; library errors map onto the exit-code scheme.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Hybrid pyramidal graph network for re-identification", "hpgn"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model on a manifest dataset");
  train_cmd->add_option("--config", ta.config, "INI config file (flags override it)");
  train_cmd->add_option("--data", ta.data, "dataset directory holding manifest.csv")->required();
  train_cmd->add_option("--out", ta.out, "run directory for checkpoints, metrics and config echo")->required();
  train_cmd->add_option("--variant", ta.variant, "model variant: " + valid_variant_list());
  train_cmd->add_option("--seed", ta.seed, "training seed");
  train_cmd->add_option("--epochs", ta.epochs, "total epochs (schedule rescales)");
  train_cmd->add_option("--set", ta.overrides, "override a config key: section.key=value (repeatable)");
  train_cmd->add_option("--resume", ta.resume, "continue from a checkpoint");
  train_cmd->add_flag("--deterministic", ta.deterministic, "single-threaded, bit-reproducible numerics");
  train_cmd->add_option("--threads", ta.threads, "worker threads (default: HPGN_THREADS or hardware count)");
  train_cmd->footer("Config keys and defaults:\n" + config_reference());

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", ea.data, "dataset directory holding manifest.csv")->required();
  eval_cmd->add_option("--protocol", ea.protocol, "crosscam | repeated (default: from checkpoint config)");
  eval_cmd->add_option("--repeats", ea.repeats, "repeated-split count");
  eval_cmd->add_option("--split-mode", ea.split_mode, "conventional | literal");
  eval_cmd->add_option("--seed", ea.seed, "seed for repeated splits");
  eval_cmd->add_option("--out", ea.out, "directory for report.csv and summary.txt");
  eval_cmd->add_flag("--per-repeat", ea.per_repeat, "include per-repeat rows in report.csv");
  eval_cmd->add_option("--threads", ea.threads, "worker threads");

  std::string scope = "all";
  double eps = 1e-5, tol = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc_cmd->add_option("--scope", scope, "all | graph | sg | bn | cbr | losses | model");
  gc_cmd->add_option("--eps", eps, "central-difference step");
  gc_cmd->add_option("--tol", tol, "relative tolerance");

  std::int64_t gh = 0, gw = 0;
  std::string graph_out;
  auto* graph_cmd = app.add_subcommand("graph", "dump a spatial grid graph as (i, j, weight) triplets");
  graph_cmd->add_option("--height", gh, "rows")->required();
  graph_cmd->add_option("--width", gw, "columns")->required();
  graph_cmd->add_option("--out", graph_out, "output file")->required();

  std::string sig_ckpt, sig_out;
  auto* sig_cmd = app.add_subcommand("significance", "export per-location significance maps");
  sig_cmd->add_option("--checkpoint", sig_ckpt, "checkpoint file")->required();
  sig_cmd->add_option("--out", sig_out, "output directory")->required();

  SynthSpec spec;
  std::string synth_out, synth_config;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic re-identification dataset");
  synth_cmd->add_option("--config", synth_config, "INI file whose [synth] section seeds the defaults");
  synth_cmd->add_option("--ids", spec.identities, "identity count");
  synth_cmd->add_option("--imgs", spec.images_per_identity, "images per identity");
  synth_cmd->add_option("--size", spec.image_size, "image side");
  synth_cmd->add_option("--cams", spec.cameras, "camera count");
  synth_cmd->add_option("--groups", spec.color_groups, "shared base-colour groups");
  synth_cmd->add_option("--seed", spec.seed, "generator seed");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand(train_cmd)) return cmd_train(ta, out);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(ea, out);
    if (app.got_subcommand(gc_cmd)) return cmd_gradcheck(scope, eps, tol, out);
    if (app.got_subcommand(graph_cmd)) return cmd_graph(gh, gw, graph_out, out);
    if (app.got_subcommand(sig_cmd)) return cmd_significance(sig_ckpt, sig_out, out, err);
    if (app.got_subcommand(synth_cmd)) {
      if (!synth_config.empty()) {
        // File values first, then re-apply the flags given on the command line.
        RunConfig rc = load_run_config(synth_config);
        SynthSpec merged = rc.synth;
        auto given = [&](const char* flag) { return synth_cmd->count(flag) > 0; };
        if (given("--ids")) merged.identities = spec.identities;
        if (given("--imgs")) merged.images_per_identity = spec.images_per_identity;
        if (given("--size")) merged.image_size = spec.image_size;
        if (given("--cams")) merged.cameras = spec.cameras;
        if (given("--groups")) merged.color_groups = spec.color_groups;
        if (given("--seed")) merged.seed = spec.seed;
        spec = merged;
      }
      return cmd_synth(spec, synth_out, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numerical abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DeterminismError& e) {
    err << "determinism check failed: " << e.what() << '\n';
    return kExitCheck;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace hpgn
