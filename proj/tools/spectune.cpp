// Command-line front end: dataset generation, pretrain/tune/eval, ablation
// sweeps, and the spectral self-check suite.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spectune/spectune.hpp"

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;
  // direct flags; empty/unset means "leave config value alone"
  std::string mode, ordering, basis;
  long long adapter_r = -1, groups_k = -1, epochs = -1;
  double adapter_s = std::numeric_limits<double>::quiet_NaN();
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_file, "config file (key = value lines)");
  cmd->add_option("--set", o.sets, "override: key=value (repeatable)");
  cmd->add_option("--mode", o.mode, "full | linear_probe | pcsa");
  cmd->add_option("--adapter-r", o.adapter_r, "adapter rank r");
  cmd->add_option("--adapter-s", o.adapter_s, "adapter scale s");
  cmd->add_option("--groups-k", o.groups_k, "local group count k");
  cmd->add_option("--ordering", o.ordering, "random | knn | z_order | trans_z_order | hilbert");
  cmd->add_option("--basis", o.basis, "gft | dct");
  cmd->add_option("--seed", o.seed, "optimizer / run seed");
  cmd->add_option("--epochs", o.epochs, "training epochs");
}

spectune::ExperimentConfig resolve(const CommonOpts& o, spectune::ExperimentConfig cfg = {}) {
  if (!o.config_file.empty()) spectune::config_load_file(cfg, o.config_file);
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw spectune::ConfigError("--set expects key=value, got: " + kv);
    spectune::config_apply(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!o.mode.empty()) spectune::config_apply(cfg, "mode", o.mode);
  if (!o.ordering.empty()) spectune::config_apply(cfg, "adapter.ordering", o.ordering);
  if (!o.basis.empty()) spectune::config_apply(cfg, "adapter.basis", o.basis);
  if (o.adapter_r >= 0) spectune::config_apply(cfg, "adapter.r", std::to_string(o.adapter_r));
  if (!std::isnan(o.adapter_s)) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", o.adapter_s);
    spectune::config_apply(cfg, "adapter.s", buf);
  }
  if (o.groups_k >= 0) spectune::config_apply(cfg, "adapter.k", std::to_string(o.groups_k));
  if (o.seed >= 0) spectune::config_apply(cfg, "optim.seed", std::to_string(o.seed));
  if (o.epochs >= 0) spectune::config_apply(cfg, "optim.epochs", std::to_string(o.epochs));
  spectune::config_validate(cfg);
  return cfg;
}

spectune::ExperimentConfig config_from_manifest(const std::string& path) {
  const nlohmann::json manifest = spectune::read_json_file(path);
  if (!manifest.contains("config"))
    throw spectune::ConfigError("manifest has no config block: " + path);
  return spectune::config_from_json(manifest["config"]);
}

void write_matrix_file(const spectune::Matrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw spectune::DataError("cannot write " + path);
  char buf[40];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      out << (j ? " " : "") << buf;
    }
    out << "\n";
  }
}

/// Debug dump of one sample's global graph pipeline: adjacency W, Laplacian
/// L, eigenvectors U, eigenvalues lambda, one plain-text matrix per file.
void dump_spectral(const spectune::ExperimentConfig& cfg, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const spectune::PointCloud cloud =
      spectune::synth_cloud(cfg.source_shapes.front(), cfg.points, cfg.noise,
                            spectune::sample_seed(cfg.data_seed, 0, 0, 0));
  const spectune::PatchSet patches =
      spectune::group_patches(cloud, spectune::farthest_point_sampling(cloud, cfg.n, 0), cfg.g);
  const spectune::WeightedGraph graph =
      spectune::build_adjacency(spectune::pairwise_distances(patches.keypoints));
  const spectune::Matrix lap = spectune::laplacian(graph);
  const spectune::SpectralBasis basis = spectune::eigendecompose(lap);
  spectune::Matrix lambda(1, basis.values.size());
  for (std::size_t i = 0; i < basis.values.size(); ++i) lambda(0, i) = basis.values[i];
  write_matrix_file(graph.adjacency, dir + "/adjacency.txt");
  write_matrix_file(lap, dir + "/laplacian.txt");
  write_matrix_file(basis.vectors, dir + "/eigenvectors.txt");
  write_matrix_file(lambda, dir + "/eigenvalues.txt");
  std::cout << "spectral matrices for one " << cfg.source_shapes.front() << " sample (n=" << cfg.n
            << ") written to " << dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spectral adapter tuning for point-cloud transformers"};
  app.require_subcommand(1);

  CommonOpts gen_o, pre_o, tune_o, eval_o, abl_o, self_o;
  std::string gen_out, gen_manifest;
  std::string pre_data, pre_out, pre_manifest;
  std::string tune_data, tune_ckpt, tune_out, tune_manifest;
  std::string eval_data, eval_ckpt, eval_split = "target_test", eval_out;
  std::string abl_data, abl_ckpt, abl_out, abl_manifest;
  std::vector<std::string> abl_sweeps;
  long long self_clouds = 20;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic shape dataset");
  add_common(gen, gen_o);
  gen->add_option("--out", gen_out, "output dataset directory");
  gen->add_option("--from-manifest", gen_manifest, "replay a dataset manifest's config");

  CLI::App* pre = app.add_subcommand("pretrain", "train the full backbone on source classes");
  add_common(pre, pre_o);
  pre->add_option("--data", pre_data, "dataset directory");
  pre->add_option("--out", pre_out, "output run directory");
  pre->add_option("--from-manifest", pre_manifest, "replay a pretrain manifest");

  CLI::App* tune = app.add_subcommand("tune", "tune a frozen checkpoint on target classes");
  add_common(tune, tune_o);
  tune->add_option("--data", tune_data, "dataset directory");
  tune->add_option("--checkpoint", tune_ckpt, "pretrained checkpoint");
  tune->add_option("--out", tune_out, "output run directory");
  tune->add_option("--from-manifest", tune_manifest, "replay a tune manifest");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(ev, eval_o);
  ev->add_option("--data", eval_data, "dataset directory");
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate");
  ev->add_option("--split", eval_split, "dataset split name");
  ev->add_option("--out", eval_out, "optional file for the eval record");

  CLI::App* abl = app.add_subcommand("ablate", "tune once per sweep grid cell");
  add_common(abl, abl_o);
  abl->add_option("--data", abl_data, "dataset directory");
  abl->add_option("--checkpoint", abl_ckpt, "pretrained checkpoint");
  abl->add_option("--out", abl_out, "output directory");
  abl->add_option("--sweep", abl_sweeps, "axis: key=v1,v2,... (repeatable; cross product)");
  abl->add_option("--from-manifest", abl_manifest, "replay an ablation manifest");

  CLI::App* self = app.add_subcommand("selfcheck", "run the spectral invariant suite");
  add_common(self, self_o);
  self->add_option("--clouds", self_clouds, "number of random clouds");
  std::string self_dump;
  self->add_option("--dump-spectral", self_dump,
                   "also write W, L, U, lambda of one sample to this directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      spectune::ExperimentConfig cfg;
      if (!gen_manifest.empty()) {
        const nlohmann::json m = spectune::read_json_file(gen_manifest);
        if (!m.contains("config"))
          throw spectune::ConfigError("dataset manifest lacks a config block; regenerate it");
        cfg = spectune::config_from_json(m["config"]);
      } else {
        cfg = resolve(gen_o);
      }
      if (gen_out.empty()) throw spectune::ConfigError("gen-data requires --out");
      spectune::gen_synthetic(cfg, gen_out);
      std::cout << "dataset written to " << gen_out << "\n";
    } else if (pre->parsed()) {
      spectune::ExperimentConfig cfg =
          pre_manifest.empty() ? resolve(pre_o) : config_from_manifest(pre_manifest);
      if (!pre_manifest.empty()) {
        const nlohmann::json m = spectune::read_json_file(pre_manifest);
        if (pre_data.empty()) pre_data = m.value("data_dir", "");
      }
      if (pre_data.empty() || pre_out.empty())
        throw spectune::ConfigError("pretrain requires --data and --out");
      spectune::run_pretrain(cfg, pre_data, pre_out, std::cout);
      std::cout << "pretrain finished; outputs in " << pre_out << "\n";
    } else if (tune->parsed()) {
      spectune::ExperimentConfig cfg =
          tune_manifest.empty() ? resolve(tune_o) : config_from_manifest(tune_manifest);
      if (!tune_manifest.empty()) {
        const nlohmann::json m = spectune::read_json_file(tune_manifest);
        if (tune_data.empty()) tune_data = m.value("data_dir", "");
        if (tune_ckpt.empty()) tune_ckpt = m.value("checkpoint", "");
      }
      if (tune_data.empty() || tune_ckpt.empty() || tune_out.empty())
        throw spectune::ConfigError("tune requires --data, --checkpoint and --out");
      spectune::run_tune(cfg, tune_data, tune_ckpt, tune_out, std::cout);
      std::cout << "tune finished; outputs in " << tune_out << "\n";
    } else if (ev->parsed()) {
      if (eval_data.empty() || eval_ckpt.empty())
        throw spectune::ConfigError("eval requires --data and --checkpoint");
      // patching and spectral context are config-driven; without an explicit
      // --config, start from the dataset's own generating config so a bare
      // eval prepares samples exactly like the run that made the checkpoint
      spectune::ExperimentConfig base;
      if (eval_o.config_file.empty()) {
        const nlohmann::json m = spectune::load_dataset_manifest(eval_data);
        if (m.contains("config")) base = spectune::config_from_json(m["config"]);
      }
      const spectune::ExperimentConfig cfg = resolve(eval_o, base);
      const nlohmann::json rec =
          spectune::run_eval(cfg, eval_data, eval_ckpt, eval_split, std::cout);
      if (!eval_out.empty()) spectune::write_json_file(rec, eval_out);
    } else if (abl->parsed()) {
      spectune::ExperimentConfig cfg;
      std::vector<spectune::SweepAxis> axes;
      if (!abl_manifest.empty()) {
        const nlohmann::json m = spectune::read_json_file(abl_manifest);
        cfg = spectune::config_from_json(m.at("config"));
        if (abl_data.empty()) abl_data = m.value("data_dir", "");
        if (abl_ckpt.empty()) abl_ckpt = m.value("checkpoint", "");
        for (const auto& ax : m.at("sweeps"))
          axes.push_back({ax.at("key").get<std::string>(),
                          ax.at("values").get<std::vector<std::string>>()});
      } else {
        cfg = resolve(abl_o);
        for (const std::string& sweep : abl_sweeps) {
          const auto eq = sweep.find('=');
          if (eq == std::string::npos)
            throw spectune::ConfigError("--sweep expects key=v1,v2,..., got: " + sweep);
          spectune::SweepAxis ax;
          ax.key = sweep.substr(0, eq);
          for (const std::string& v : spectune::detail::split_csv(sweep.substr(eq + 1)))
            ax.values.push_back(v);
          axes.push_back(std::move(ax));
        }
      }
      if (abl_data.empty() || abl_ckpt.empty() || abl_out.empty())
        throw spectune::ConfigError("ablate requires --data, --checkpoint and --out");
      spectune::run_ablation(cfg, axes, abl_data, abl_ckpt, abl_out, std::cout);
      std::cout << "ablation finished; outputs in " << abl_out << "\n";
    } else if (self->parsed()) {
      spectune::ExperimentConfig cfg = resolve(self_o);
      if (self_clouds <= 0) throw spectune::ConfigError("--clouds must be positive");
      if (!self_dump.empty()) dump_spectral(cfg, self_dump);
      const auto results =
          spectune::spectral_selfcheck(cfg, static_cast<std::size_t>(self_clouds));
      bool all_pass = true;
      for (const spectune::CheckResult& r : results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  value " << r.value
                  << "  tol " << r.tolerance;
        if (!r.detail.empty()) std::cout << "  (" << r.detail << ")";
        std::cout << "\n";
        all_pass = all_pass && r.pass;
      }
      if (!all_pass) {
        std::cout << "selfcheck: FAILURES PRESENT\n";
        return 1;
      }
      std::cout << "selfcheck: all checks passed\n";
    }
  } catch (const spectune::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const spectune::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
