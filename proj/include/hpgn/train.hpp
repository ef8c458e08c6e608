#pragma once

// Training loop, checkpoint assembly and model restoration.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hpgn/checkpoint.hpp"
#include "hpgn/config.hpp"
#include "hpgn/data.hpp"
#include "hpgn/losses.hpp"
#include "hpgn/model.hpp"
#include "hpgn/optim.hpp"
#include "hpgn/sampling.hpp"

namespace hpgn {

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double total = 0;
  double lsrs1 = 0, triplet1 = 0, lsrs2 = 0, triplet2 = 0;

  bool operator==(const EpochMetrics&) const = default;
};

inline const char* kMetricsHeader = "epoch,lr,total,lsrs1,triplet1,lsrs2,triplet2";

inline std::string metrics_line(const EpochMetrics& m) {
  using detail::fmt_double;
  return std::to_string(m.epoch) + ',' + fmt_double(m.lr) + ',' + fmt_double(m.total) + ',' +
         fmt_double(m.lsrs1) + ',' + fmt_double(m.triplet1) + ',' + fmt_double(m.lsrs2) + ',' +
         fmt_double(m.triplet2);
}

// Sorted distinct identities become classes 0..n-1.
inline std::map<std::int64_t, std::size_t> class_index(std::span<const Sample> samples) {
  std::map<std::int64_t, std::size_t> idx;
  for (const auto& s : samples) idx.emplace(s.identity, 0);
  std::size_t k = 0;
  for (auto& [id, c] : idx) c = k++;
  return idx;
}

// Model, optimizer, normalization statistics and progress: everything a
// checkpoint carries.
struct TrainState {
  RunConfig config;
  Model<float> model;
  OptimState<float> optim;
  ChannelStats stats;
  std::size_t epoch = 0;  // last completed epoch

  TrainState(RunConfig cfg, std::size_t classes, ChannelStats s)
      : config(std::move(cfg)), model(with_classes(config.model, classes), config.seed), stats(s) {
    optim.config = config.optim;
  }

 private:
  static ModelConfig with_classes(ModelConfig m, std::size_t classes) {
    m.num_classes = classes;
    return m;
  }
};

inline Checkpoint make_checkpoint(TrainState& st) {
  Checkpoint ck;
  ck.config = st.config.to_ini() + "\n[state]\nepoch = " + std::to_string(st.epoch) +
              "\nclasses = " + std::to_string(st.model.config().num_classes) + '\n';
  for (auto* p : st.model.parameters()) ck.put("param/" + p->name, p->value);
  for (auto& [name, t] : st.model.buffers()) ck.put("buffer/" + name, *t);
  for (auto& [name, v] : st.optim.velocity) ck.put("optim/" + name + "/velocity", v);
  Tensor<float> mean(Shape{3}), sd(Shape{3});
  for (std::size_t c = 0; c < 3; ++c) {
    mean[c] = st.stats.mean[c];
    sd[c] = st.stats.std[c];
  }
  ck.put("data/channel_mean", mean);
  ck.put("data/channel_std", sd);
  return ck;
}

inline TrainState restore_state(const Checkpoint& ck) {
  RunConfig cfg;
  const auto state = apply_ini(cfg, ck.config, {"state"});
  auto field = [&](const std::string& key) -> std::size_t {
    auto it = state.find("state." + key);
    if (it == state.end()) throw FormatError("checkpoint config lacks state." + key);
    return detail::parse_number<std::size_t>(it->second, "state." + key);
  };
  ChannelStats stats;
  const auto& mean = ck.at("data/channel_mean");
  const auto& sd = ck.at("data/channel_std");
  for (std::size_t c = 0; c < 3; ++c) {
    stats.mean[c] = mean[c];
    stats.std[c] = sd[c];
  }
  TrainState st(cfg, field("classes"), stats);
  st.epoch = field("epoch");
  auto load_into = [&](const std::string& name, Tensor<float>& dst) {
    const Tensor<float>& src = ck.at(name);
    if (src.shape() != dst.shape())
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                        ", model expects " + shape_str(dst.shape()));
    dst = src;
  };
  for (auto* p : st.model.parameters()) load_into("param/" + p->name, p->value);
  for (auto& [name, t] : st.model.buffers()) load_into("buffer/" + name, *t);
  const std::string prefix = "optim/", suffix = "/velocity";
  for (const auto& [name, t] : ck.tensors)
    if (name.starts_with(prefix) && name.ends_with(suffix))
      st.optim.velocity[name.substr(prefix.size(), name.size() - prefix.size() - suffix.size())] = t;
  return st;
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::size_t stop_after = 0;     // stop once this epoch completes (0: run to the end)
  bool quiet = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> log;  // epochs run by this call
  std::optional<TrainState> state;
};

namespace detail {

inline void write_metrics(const std::filesystem::path& path, const std::vector<EpochMetrics>& keep) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write metric log " + path.string());
  os << kMetricsHeader << '\n';
  for (const auto& m : keep) os << metrics_line(m) << '\n';
}

inline std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path) {
  std::vector<EpochMetrics> out;
  std::ifstream is(path);
  if (!is) return out;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[7];
    for (auto& x : f) std::getline(ss, x, ',');
    EpochMetrics m;
    m.epoch = parse_number<std::size_t>(f[0], "metrics epoch");
    double* dst[] = {&m.lr, &m.total, &m.lsrs1, &m.triplet1, &m.lsrs2, &m.triplet2};
    for (int i = 0; i < 6; ++i) *dst[i] = parse_number<double>(f[i + 1], "metrics value");
    out.push_back(m);
  }
  return out;
}

}  // namespace detail

// One epoch: PK batches from the (seed, epoch) stream, per-slot augmentation
// streams, forward, weighted loss, backward, SGD. Returns batch-averaged losses.
inline EpochMetrics train_epoch(TrainState& st, const Dataset& train) {
  const RunConfig& cfg = st.config;
  const std::size_t epoch = st.epoch + 1;
  const auto classes = class_index(train.samples);
  std::vector<std::int64_t> ids(train.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = train.samples[i].identity;

  auto epoch_rng = derive_rng(cfg.seed, epoch);
  const auto batches = pk_epoch(ids, cfg.identities_per_batch, cfg.images_per_identity, epoch_rng);
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = lr_at_epoch(epoch, cfg.schedule);
  auto params = st.model.parameters();
  const std::size_t s = cfg.model.input_size;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& batch = batches[b];
    Tensor<float> x(Shape{batch.size(), 3, s, s});
    std::vector<std::size_t> labels(batch.size());
    const std::size_t per = 3 * s * s;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto rng = derive_rng(cfg.seed, epoch, b + 1, i + 1);
      const Image img = augment(train.images[batch[i]], rng, cfg.augment, st.stats);
      std::copy_n(img.raw(), per, x.raw() + i * per);
      labels[i] = classes.at(ids[batch[i]]);
    }
    Tape<float> tape;
    auto out = st.model.forward(tape, x, Mode::train);
    auto loss = total_loss(out, labels, cfg.loss);
    const double total = loss.total.value().item();
    if (!std::isfinite(total))
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(b + 1));
    auto grads = tape.backward(loss.total);
    std::vector<Tensor<float>> g;
    g.reserve(params.size());
    for (auto* p : params) g.push_back(grads.of(*p));
    sgd_step<float>(params, g, st.optim, m.lr);
    m.total += total;
    m.lsrs1 += LossBreakdown<float>::value_of(loss.lsrs1);
    m.triplet1 += LossBreakdown<float>::value_of(loss.triplet1);
    m.lsrs2 += LossBreakdown<float>::value_of(loss.lsrs2);
    m.triplet2 += LossBreakdown<float>::value_of(loss.triplet2);
  }
  const double inv = 1.0 / static_cast<double>(batches.size());
  for (double* v : {&m.total, &m.lsrs1, &m.triplet1, &m.lsrs2, &m.triplet2}) *v *= inv;
  st.epoch = epoch;
  return m;
}

// Fresh state for a training split: class count from its identities and
// z-score statistics (rounded to f32, as stored) from its images.
inline TrainState initial_state(const RunConfig& cfg, const Dataset& train) {
  cfg.validate();
  const ChannelStats stats = compute_channel_stats(train.images);
  const std::size_t classes = class_index(train.samples).size();
  if (classes < cfg.identities_per_batch)
    throw ConfigError("training split has " + std::to_string(classes) + " identities but data.P = " +
                      std::to_string(cfg.identities_per_batch));
  return TrainState(cfg, classes, stats);
}

// Runs epochs st.epoch+1 .. total (or stop_after). With an output directory,
// last.ckpt and metrics.csv are refreshed after every epoch, so an abort
// leaves the last good checkpoint in place.
inline TrainResult train(TrainState st, const Dataset& train, const TrainOptions& opt = {}) {
  if (train.images.size() != train.samples.size() || train.samples.empty())
    throw InvalidArgument("train: empty or inconsistent training set");
  for (const auto& img : train.images)
    if (img.dim(1) != st.config.model.input_size || img.dim(2) != st.config.model.input_size)
      throw ShapeError("train: images do not match the model input size");
  TrainResult res;
  std::vector<EpochMetrics> history;
  const bool disk = !opt.out_dir.empty();
  if (disk) {
    std::filesystem::create_directories(opt.out_dir);
    for (const auto& m : detail::read_metrics(opt.out_dir / "metrics.csv"))
      if (m.epoch <= st.epoch) history.push_back(m);
    std::ofstream(opt.out_dir / "config.ini") << st.config.to_ini();
  }
  const std::size_t last =
      opt.stop_after ? std::min(opt.stop_after, st.config.schedule.total_epochs) : st.config.schedule.total_epochs;
  while (st.epoch < last) {
    EpochMetrics m = train_epoch(st, train);
    res.log.push_back(m);
    history.push_back(m);
    if (disk) {
      const Checkpoint ck = make_checkpoint(st);
      save_checkpoint(ck, opt.out_dir / "last.ckpt");
      if (st.config.checkpoint_every && st.epoch % st.config.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch%04zu.ckpt", st.epoch);
        save_checkpoint(ck, opt.out_dir / name);
      }
      detail::write_metrics(opt.out_dir / "metrics.csv", history);
    }
    if (!opt.quiet) std::printf("%s\n", metrics_line(m).c_str());
    if (opt.on_epoch) opt.on_epoch(m);
  }
  res.state.emplace(std::move(st));
  return res;
}

// Features for retrieval, with the checkpoint's z-score applied.
inline Tensor<double> embed_dataset(TrainState& st, const Dataset& data) {
  const std::size_t s = st.config.model.input_size;
  Tensor<float> x(Shape{data.size(), 3, s, s});
  const std::size_t per = 3 * s * s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Image img = zscore(data.images[i], st.stats);
    std::copy_n(img.raw(), per, x.raw() + i * per);
  }
  return extract_features(st.model, x, st.config.eval_batch).template cast<double>();
}

}  // namespace hpgn
