#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "spectune/backbone.hpp"
#include "spectune/checkpoint.hpp"
#include "spectune/config.hpp"
#include "spectune/dataset.hpp"
#include "spectune/error.hpp"
#include "spectune/graph.hpp"
#include "spectune/ordering.hpp"
#include "spectune/parallel.hpp"
#include "spectune/pointcloud.hpp"

namespace spectune {

/// One metrics row. Wall-clock stays out of the serialized record so a
/// rerun of the same manifest is byte-identical; it goes to the console.
struct MetricsRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::size_t train_correct = 0, train_total = 0;
  double test_loss = 0.0;
  std::size_t test_correct = 0, test_total = 0;
  long long trainable_params = 0, total_params = 0;
  double wall_clock_s = 0.0;

  double train_acc() const {
    return train_total ? static_cast<double>(train_correct) / static_cast<double>(train_total)
                       : 0.0;
  }
  double test_acc() const {
    return test_total ? static_cast<double>(test_correct) / static_cast<double>(test_total) : 0.0;
  }
  double trainable_ratio() const {
    return total_params ? static_cast<double>(trainable_params) / static_cast<double>(total_params)
                        : 0.0;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["train_loss"] = train_loss;
    j["train_correct"] = train_correct;
    j["train_total"] = train_total;
    j["train_acc"] = train_acc();
    j["test_loss"] = test_loss;
    j["test_correct"] = test_correct;
    j["test_total"] = test_total;
    j["test_acc"] = test_acc();
    j["trainable_params"] = trainable_params;
    j["total_params"] = total_params;
    j["trainable_ratio"] = trainable_ratio();
    return j;
  }
};

inline double cosine_lr(double base, std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs <= 1) return base;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

inline long long tensor_elements(const ModelParams& p, bool trainable_only) {
  long long count = 0;
  for_each_tensor(p, [&](const std::string& name, const Matrix& m) {
    if (!trainable_only || p.trainable.count(name))
      count += static_cast<long long>(m.size());
  });
  return count;
}

// ---------------------------------------------------------------------------
// sample preparation

/// Geometry pipeline for one cloud: FPS key points, kNN patches, curve
/// ordering, and (for adapter runs) the cached spectral bases.
inline PreparedSample prepare_sample(const PointCloud& cloud, const ExperimentConfig& cfg,
                                     bool want_ctx, std::uint64_t ordering_seed) {
  PreparedSample s;
  if (!cloud.label) throw DataError("prepare_sample: cloud has no label");
  s.label = *cloud.label;
  const std::vector<std::size_t> picked = farthest_point_sampling(cloud, cfg.n, 0);
  s.patches = group_patches(cloud, picked, cfg.g);
  if (want_ctx) {
    const OrderingResult ordering =
        sort_keypoints(s.patches.keypoints, cfg.ordering, cfg.groups_k, ordering_seed);
    s.ctx = make_adapter_context(s.patches.keypoints, ordering, cfg.basis);
    s.has_ctx = true;
  }
  return s;
}

inline std::vector<PreparedSample> prepare_samples(const std::vector<PointCloud>& clouds,
                                                   const ExperimentConfig& cfg, bool want_ctx) {
  std::vector<PreparedSample> out(clouds.size());
  parallel_for(clouds.size(), cfg.threads, [&](std::size_t i) {
    out[i] = prepare_sample(clouds[i], cfg, want_ctx,
                            splitmix64(cfg.seed ^ (0xabcdefull + i)));
  });
  return out;
}

/// Embedder output is frozen outside full mode; compute tokens once.
inline void cache_tokens(std::vector<PreparedSample>& samples, const ModelParams& p,
                         std::size_t threads) {
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    samples[i].tokens = embed_patches(samples[i].patches, p.embed).values;
    samples[i].tokens_cached = true;
  });
}

/// Linear probing on an adapter-free model: the whole encoder is frozen, so
/// the pooled feature per sample is a constant.
inline void cache_pooled(std::vector<PreparedSample>& samples, const ModelParams& p,
                         std::size_t threads) {
  if (p.has_adapters()) throw ContractError("cache_pooled: model has adapters");
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    PreparedSample& s = samples[i];
    const Matrix tokens =
        s.tokens_cached ? s.tokens : embed_patches(s.patches, p.embed).values;
    EncoderResult enc = encoder_forward(with_cls(tokens, p.cls), p, nullptr);
    s.pooled = std::move(enc.pooled);
    s.pooled_cached = true;
  });
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double mean_loss = 0.0;

  double accuracy() const {
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
};

inline EvalResult evaluate(const std::vector<PreparedSample>& samples, const ModelParams& p,
                           Mode mode, std::size_t threads) {
  std::vector<double> losses(samples.size(), 0.0);
  std::vector<char> hits(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    SampleCache cache;
    losses[i] = sample_loss(samples[i], p, mode, &cache);
    int best = 0;
    for (std::size_t j = 1; j < cache.logits.cols(); ++j)
      if (cache.logits(0, j) > cache.logits(0, best)) best = static_cast<int>(j);
    hits[i] = (best == samples[i].label) ? 1 : 0;
  });
  EvalResult r;
  r.total = samples.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    r.mean_loss += losses[i];
    r.correct += hits[i];
  }
  if (r.total) r.mean_loss /= static_cast<double>(r.total);
  return r;
}

// ---------------------------------------------------------------------------
// the SGD loop

struct TrainLog {
  std::vector<MetricsRecord> records;
};

/// Plain SGD with cosine decay over the trainable set. Shuffle order, batch
/// accumulation, and updates are all fixed by cfg.seed. Train accuracy is
/// the running accuracy over the epoch's pre-update predictions.
inline TrainLog sgd_train(ModelParams& p, Mode mode, std::vector<PreparedSample>& train,
                          const std::vector<PreparedSample>& test, const ExperimentConfig& cfg,
                          std::ostream& log) {
  std::map<std::string, Matrix*> index;
  for_each_tensor(p, [&](const std::string& name, Matrix& m) { index[name] = &m; });
  const long long trainable_count = tensor_elements(p, true);
  const long long total_count = tensor_elements(p, false);

  TrainLog out;
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  // Epoch 0: the untouched model, so zero-init adapters are visibly a no-op.
  {
    MetricsRecord rec;
    rec.epoch = 0;
    rec.lr = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    const EvalResult tr = evaluate(train, p, mode, cfg.threads);
    const EvalResult te = evaluate(test, p, mode, cfg.threads);
    rec.train_loss = tr.mean_loss;
    rec.train_correct = tr.correct;
    rec.train_total = tr.total;
    rec.test_loss = te.mean_loss;
    rec.test_correct = te.correct;
    rec.test_total = te.total;
    rec.trainable_params = trainable_count;
    rec.total_params = total_count;
    rec.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.records.push_back(rec);
    log << "epoch 0 (eval only) train_loss " << rec.train_loss << " train_acc " << rec.train_acc()
        << " test_acc " << rec.test_acc() << " [" << rec.wall_clock_s << "s]\n";
  }

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr_now = cosine_lr(cfg.lr, epoch - 1, cfg.epochs);
    // Fisher-Yates, not std::shuffle, to keep the byte layout of metrics
    // independent of the standard library version.
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng() % (i + 1));
      std::swap(order[i], order[j]);
    }

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      GradMap grads;
      for (std::size_t i = start; i < stop; ++i) {
        int pred = 0;
        loss_sum += loss_and_grads(train[order[i]], p, mode, grads, &pred);
        if (pred == train[order[i]].label) ++correct;
      }
      const double step = lr_now / static_cast<double>(stop - start);
      for (auto& [name, g] : grads) {
        auto it = index.find(name);
        if (it == index.end()) throw ContractError("sgd_train: gradient for unknown tensor " + name);
        if (!p.trainable.count(name))
          throw ContractError("sgd_train: gradient for frozen tensor " + name);
        g *= step;
        *it->second -= g;
      }
    }
    if (!std::isfinite(loss_sum))
      throw NumericError("sgd_train: loss diverged (non-finite) at epoch " +
                         std::to_string(epoch));

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_now;
    rec.train_loss = train.empty() ? 0.0 : loss_sum / static_cast<double>(train.size());
    rec.train_correct = correct;
    rec.train_total = train.size();
    const EvalResult te = evaluate(test, p, mode, cfg.threads);
    rec.test_loss = te.mean_loss;
    rec.test_correct = te.correct;
    rec.test_total = te.total;
    rec.trainable_params = trainable_count;
    rec.total_params = total_count;
    rec.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.records.push_back(rec);
    log << "epoch " << epoch << " lr " << lr_now << " train_loss " << rec.train_loss
        << " train_acc " << rec.train_acc() << " test_acc " << rec.test_acc() << " ["
        << rec.wall_clock_s << "s]\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// workflows

inline void write_metrics_file(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics file: " + path);
  for (const MetricsRecord& rec : log.records) out << rec.to_json().dump() << "\n";
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << j.dump(2) << "\n";
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad json in ") + path + ": " + e.what());
  }
  return j;
}

struct RunSummary {
  nlohmann::json manifest;
  TrainLog log;
  std::string checkpoint_path;
};

/// Supervised training of the whole toy backbone on the source classes; the
/// result is saved with every tensor frozen and acts as the pre-trained
/// model for the tune workflows.
inline RunSummary run_pretrain(const ExperimentConfig& cfg, const std::string& data_dir,
                               const std::string& out_dir, std::ostream& log) {
  config_validate(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const nlohmann::json data_manifest = load_dataset_manifest(data_dir);

  std::vector<PointCloud> train_clouds = load_split(data_dir, data_manifest, "source_train");
  std::vector<PointCloud> test_clouds = load_split(data_dir, data_manifest, "source_test");
  std::vector<PreparedSample> train = prepare_samples(train_clouds, cfg, false);
  std::vector<PreparedSample> test = prepare_samples(test_clouds, cfg, false);

  const std::size_t classes = cfg.source_shapes.size();
  ModelParams p = init_model(cfg.backbone(classes), cfg.seed);
  apply_mode(p, Mode::Full);

  RunSummary sum;
  sum.log = sgd_train(p, Mode::Full, train, test, cfg, log);

  p.trainable.clear();  // everything ships frozen
  sum.checkpoint_path = (fs::path(out_dir) / "pretrained.ckpt").string();
  save_checkpoint(p, sum.checkpoint_path);
  write_metrics_file(sum.log, (fs::path(out_dir) / "metrics.jsonl").string());

  sum.manifest["command"] = "pretrain";
  sum.manifest["config"] = config_to_json(cfg);
  sum.manifest["data_dir"] = data_dir;
  sum.manifest["outputs"] = {{"checkpoint", "pretrained.ckpt"}, {"metrics", "metrics.jsonl"}};
  sum.manifest["trainable_params"] = sum.log.records.back().trainable_params;
  sum.manifest["total_params"] = sum.log.records.back().total_params;
  sum.manifest["final"] = sum.log.records.back().to_json();
  write_json_file(sum.manifest, (fs::path(out_dir) / "manifest.json").string());
  return sum;
}

/// Fine-tune a frozen checkpoint on the target classes under `cfg.mode`.
inline RunSummary run_tune(const ExperimentConfig& cfg, const std::string& data_dir,
                           const std::string& checkpoint, const std::string& out_dir,
                           std::ostream& log) {
  config_validate(cfg);
  if (cfg.mode == Mode::Full)
    throw ConfigError("tune runs linear_probe or pcsa; full training is `pretrain`");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const nlohmann::json data_manifest = load_dataset_manifest(data_dir);

  ModelParams p = load_checkpoint(checkpoint);
  if (p.has_adapters())
    throw ConfigError("tune expects an adapter-free pretrained checkpoint: " + checkpoint);
  if (p.cfg.dim != cfg.dim || p.cfg.layers != cfg.layers || p.cfg.heads != cfg.heads ||
      p.cfg.embed_hidden != cfg.embed_hidden)
    throw ConfigError("checkpoint architecture does not match config");

  std::vector<PointCloud> train_clouds = load_split(data_dir, data_manifest, "target_train");
  std::vector<PointCloud> test_clouds = load_split(data_dir, data_manifest, "target_test");
  const bool want_ctx = (cfg.mode == Mode::Pcsa);
  std::vector<PreparedSample> train = prepare_samples(train_clouds, cfg, want_ctx);
  std::vector<PreparedSample> test = prepare_samples(test_clouds, cfg, want_ctx);

  reset_head(p, cfg.target_shapes.size());
  if (cfg.mode == Mode::Pcsa) attach_adapters(p, cfg.adapter_r, cfg.adapter_s, cfg.seed);
  apply_mode(p, cfg.mode);

  cache_tokens(train, p, cfg.threads);
  cache_tokens(test, p, cfg.threads);
  if (cfg.mode == Mode::LinearProbe) {
    cache_pooled(train, p, cfg.threads);
    cache_pooled(test, p, cfg.threads);
  }

  RunSummary sum;
  sum.log = sgd_train(p, cfg.mode, train, test, cfg, log);

  sum.checkpoint_path = (fs::path(out_dir) / "tuned.ckpt").string();
  save_checkpoint(p, sum.checkpoint_path);
  write_metrics_file(sum.log, (fs::path(out_dir) / "metrics.jsonl").string());

  const MetricsRecord& last = sum.log.records.back();
  sum.manifest["command"] = "tune";
  sum.manifest["config"] = config_to_json(cfg);
  sum.manifest["data_dir"] = data_dir;
  sum.manifest["checkpoint"] = checkpoint;
  sum.manifest["outputs"] = {{"checkpoint", "tuned.ckpt"}, {"metrics", "metrics.jsonl"}};
  sum.manifest["trainable_params"] = last.trainable_params;
  sum.manifest["total_params"] = last.total_params;
  sum.manifest["trainable_ratio"] = last.trainable_ratio();
  sum.manifest["final"] = last.to_json();
  write_json_file(sum.manifest, (fs::path(out_dir) / "manifest.json").string());
  return sum;
}

/// Evaluate a checkpoint on one split (default target_test).
inline nlohmann::json run_eval(const ExperimentConfig& cfg, const std::string& data_dir,
                               const std::string& checkpoint, const std::string& split,
                               std::ostream& log) {
  config_validate(cfg);
  const nlohmann::json data_manifest = load_dataset_manifest(data_dir);
  ModelParams p = load_checkpoint(checkpoint);
  std::vector<PointCloud> clouds = load_split(data_dir, data_manifest, split);
  std::vector<PreparedSample> samples = prepare_samples(clouds, cfg, p.has_adapters());
  for (const PreparedSample& s : samples)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= p.cfg.classes)
      throw ConfigError("split labels exceed checkpoint head classes; wrong checkpoint?");
  const Mode mode = p.has_adapters() ? Mode::Pcsa : Mode::LinearProbe;
  const EvalResult r = evaluate(samples, p, mode, cfg.threads);
  nlohmann::json j;
  j["command"] = "eval";
  j["split"] = split;
  j["checkpoint"] = checkpoint;
  j["correct"] = r.correct;
  j["total"] = r.total;
  j["accuracy"] = r.accuracy();
  j["mean_loss"] = r.mean_loss;
  log << "eval " << split << ": " << r.correct << "/" << r.total << " acc " << r.accuracy()
      << " loss " << r.mean_loss << "\n";
  return j;
}

// ---------------------------------------------------------------------------
// ablation sweeps

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

/// First few global-basis coefficients of a probe signal, so gft-vs-dct
/// cells visibly disagree in the output table.
inline std::vector<double> spectral_fingerprint(const PreparedSample& probe, std::size_t count) {
  if (!probe.has_ctx) throw ContractError("spectral_fingerprint: sample has no context");
  Matrix signal(probe.patches.keypoints.rows(), 1);
  for (std::size_t i = 0; i < signal.rows(); ++i) signal(i, 0) = probe.patches.keypoints(i, 0);
  const Matrix coeff = matmul_tn(probe.ctx.global.vectors, signal);
  std::vector<double> out;
  for (std::size_t i = 0; i < std::min(count, coeff.rows()); ++i) out.push_back(coeff(i, 0));
  return out;
}

/// Cross product of the sweep axes; one tune run per cell, one table row
/// per cell.
inline nlohmann::json run_ablation(const ExperimentConfig& base, const std::vector<SweepAxis>& axes,
                                   const std::string& data_dir, const std::string& checkpoint,
                                   const std::string& out_dir, std::ostream& log) {
  if (axes.empty()) throw ConfigError("ablate needs at least one --sweep axis");
  for (const SweepAxis& ax : axes) {
    if (ax.values.empty()) throw ConfigError("sweep axis has no values: " + ax.key);
    ExperimentConfig probe = base;
    config_apply(probe, ax.key, ax.values.front());  // unknown keys fail here
  }
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::vector<std::size_t> shape;
  std::size_t cells = 1;
  for (const SweepAxis& ax : axes) {
    shape.push_back(ax.values.size());
    cells *= ax.values.size();
  }

  const nlohmann::json data_manifest = load_dataset_manifest(data_dir);
  std::vector<PointCloud> probe_clouds = load_split(data_dir, data_manifest, "target_train");
  if (probe_clouds.empty()) throw DataError("ablate: empty target_train split");

  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    ExperimentConfig cfg = base;
    nlohmann::json swept;
    std::size_t rem = cell;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const std::size_t vi = rem % shape[a];
      rem /= shape[a];
      config_apply(cfg, axes[a].key, axes[a].values[vi]);
      swept[axes[a].key] = axes[a].values[vi];
    }
    config_validate(cfg);
    log << "--- ablation cell " << (cell + 1) << "/" << cells << " " << swept.dump() << "\n";
    const std::string cell_dir = (fs::path(out_dir) / ("cell_" + std::to_string(cell))).string();
    RunSummary sum = run_tune(cfg, data_dir, checkpoint, cell_dir, log);

    const PreparedSample probe =
        prepare_sample(probe_clouds.front(), cfg, true, splitmix64(cfg.seed ^ 0xabcdefull));
    nlohmann::json row;
    row["cell"] = cell;
    row["swept"] = swept;
    row["config"] = config_to_json(cfg);
    row["final_test_acc"] = sum.log.records.back().test_acc();
    row["final_test_correct"] = sum.log.records.back().test_correct;
    row["final_test_total"] = sum.log.records.back().test_total;
    row["final_train_loss"] = sum.log.records.back().train_loss;
    row["trainable_params"] = sum.log.records.back().trainable_params;
    row["spectral_fingerprint"] = spectral_fingerprint(probe, 4);
    rows.push_back(row);
  }

  nlohmann::json manifest;
  manifest["command"] = "ablate";
  manifest["config"] = config_to_json(base);
  manifest["data_dir"] = data_dir;
  manifest["checkpoint"] = checkpoint;
  nlohmann::json jaxes = nlohmann::json::array();
  for (const SweepAxis& ax : axes) jaxes.push_back({{"key", ax.key}, {"values", ax.values}});
  manifest["sweeps"] = jaxes;
  manifest["rows"] = rows;
  write_json_file(manifest, (fs::path(out_dir) / "manifest.json").string());

  std::ofstream table((fs::path(out_dir) / "table.jsonl"));
  if (!table) throw DataError("cannot write ablation table in " + out_dir);
  for (const auto& row : rows) table << row.dump() << "\n";

  // human-readable summary
  log << "ablation table (" << cells << " rows):\n";
  for (const auto& row : rows)
    log << "  " << row["swept"].dump() << " test_acc " << row["final_test_acc"].get<double>()
        << " trainable " << row["trainable_params"].get<long long>() << "\n";
  return manifest;
}

}  // namespace spectune
