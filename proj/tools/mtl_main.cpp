// Experiment harness CLI. Exit codes: 0 ok, 1 usage/config error,
// 2 a sweep (or single trial) produced nothing but diverged rows,
// 3 gradcheck breach.
#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "mtl/datasets.hpp"
#include "mtl/errors.hpp"
#include "mtl/harness.hpp"
#include "mtl/json_util.hpp"
#include "mtl/model_io.hpp"
#include "mtl/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mtl::ConfigError("cannot open config file \"" + path + "\"");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw mtl::ParseError("invalid JSON in \"" + path + "\": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw mtl::ConfigError("cannot write \"" + path.string() + "\"");
  out << text;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mtl::ConfigError("cannot open \"" + path + "\"");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

json record_to_json(const mtl::RunRecord& r) {
  return json{{"config_hash", r.config_hash},
              {"seed", r.seed},
              {"strategy", r.strategy},
              {"gamma", r.gamma},
              {"w", r.w},
              {"train_loss", r.train_loss},
              {"test_metric", r.test_metric},
              {"status", r.status},
              {"wall_ms", r.wall_ms}};
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, bool has_seed,
                 std::uint64_t seed_override) {
  const json j = load_json_file(config_path);
  const std::string kind = mtl::get_required<std::string>(j, "kind", "gen-data config");
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  if (kind == "synthetic") {
    mtl::require_keys(j, {"kind", "n_train", "n_test", "noise", "input_dim", "label_form",
                          "seed", "csv"},
                      "gen-data config");
    mtl::SyntheticSpec spec;
    spec.n_train = mtl::get_or<std::size_t>(j, "n_train", "gen-data", spec.n_train);
    spec.n_test = mtl::get_or<std::size_t>(j, "n_test", "gen-data", spec.n_test);
    spec.noise = mtl::get_or(j, "noise", "gen-data", spec.noise);
    spec.input_dim = mtl::get_or<std::size_t>(j, "input_dim", "gen-data", spec.input_dim);
    const std::string form = mtl::get_or<std::string>(j, "label_form", "gen-data", "sinusoidal");
    if (form == "sinusoidal") {
      spec.label_form = mtl::LabelForm::kSinusoidal;
    } else if (form == "linear") {
      spec.label_form = mtl::LabelForm::kLinear;
    } else {
      throw mtl::ConfigError("unknown label_form \"" + form + "\"");
    }
    spec.seed = mtl::get_or<std::uint64_t>(j, "seed", "gen-data", 0);
    if (has_seed) spec.seed = seed_override;
    const auto [train, test] = mtl::gen_synthetic(spec);
    mtl::save_dataset((out / "train.mtds").string(), train);
    mtl::save_dataset((out / "test.mtds").string(), test);
    if (mtl::get_or(j, "csv", "gen-data", false)) {
      mtl::write_synthetic_csv((out / "train.csv").string(), train);
      mtl::write_synthetic_csv((out / "test.csv").string(), test);
    }
    std::printf("synthetic: %zu train / %zu test examples -> %s\n", train.n(), test.n(),
                out_dir.c_str());
    return 0;
  }

  if (kind == "glyphs") {
    mtl::require_keys(j, {"kind", "n", "seed", "gzip"}, "gen-data config");
    const auto n = mtl::get_required<std::size_t>(j, "n", "gen-data");
    std::uint64_t seed = mtl::get_or<std::uint64_t>(j, "seed", "gen-data", 0);
    if (has_seed) seed = seed_override;
    const bool gz = mtl::get_or(j, "gzip", "gen-data", false);
    const auto [images, labels] = mtl::glyph_corpus(n, seed);
    const std::string suffix = gz ? ".gz" : "";
    mtl::save_idx_images((out / ("glyph-images.idx" + suffix)).string(), images, 28, 28, gz);
    mtl::save_idx_labels((out / ("glyph-labels.idx" + suffix)).string(), labels, gz);
    std::printf("glyphs: %zu 28x28 images -> %s\n", n, out_dir.c_str());
    return 0;
  }

  if (kind == "multimnist" || kind == "multifashion") {
    mtl::require_keys(j, {"kind", "images", "labels", "pairs_train", "pairs_test", "seed"},
                      "gen-data config");
    const auto images_path = mtl::get_required<std::string>(j, "images", "gen-data");
    const auto labels_path = mtl::get_required<std::string>(j, "labels", "gen-data");
    const auto pairs_train = mtl::get_required<std::size_t>(j, "pairs_train", "gen-data");
    const auto pairs_test = mtl::get_required<std::size_t>(j, "pairs_test", "gen-data");
    std::uint64_t seed = mtl::get_or<std::uint64_t>(j, "seed", "gen-data", 0);
    if (has_seed) seed = seed_override;

    const mtl::IdxFile images = mtl::load_idx(images_path);
    const mtl::IdxFile labels = mtl::load_idx(labels_path);
    if (!images.is_images || labels.is_images) {
      throw mtl::ConfigError("expected an image IDX and a label IDX, in that order");
    }
    const mtl::Rng root(seed);
    const auto train = mtl::make_multitask_image_dataset(
        images.images, labels.labels, pairs_train, root.derive("train-pairs").next_u64());
    const auto test = mtl::make_multitask_image_dataset(
        images.images, labels.labels, pairs_test, root.derive("test-pairs").next_u64());
    mtl::save_dataset((out / "train.mtds").string(), train);
    mtl::save_dataset((out / "test.mtds").string(), test);
    std::printf("%s: %zu train / %zu test pairs -> %s\n", kind.c_str(), train.n(), test.n(),
                out_dir.c_str());
    return 0;
  }

  throw mtl::ConfigError("unknown gen-data kind \"" + kind + "\"");
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool has_seed,
              std::uint64_t seed_override) {
  mtl::ExperimentConfig cfg = mtl::experiment_from_json(load_json_file(config_path));
  if (has_seed) cfg.seed = seed_override;
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  mtl::Model trained;
  const mtl::RunRecord rec = mtl::run_trial(cfg, &trained);
  write_text(out / "run.json", record_to_json(rec).dump(2) + "\n");
  write_text(out / "records.csv", mtl::records_to_csv({rec}));
  if (rec.status == "ok") {
    mtl::save_model((out / "model.ckpt").string(), trained);
  }
  std::printf("trial %s:%llu %s in %llu ms\n", rec.config_hash.c_str(),
              static_cast<unsigned long long>(rec.seed), rec.status.c_str(),
              static_cast<unsigned long long>(rec.wall_ms));
  return rec.status == "ok" ? 0 : 2;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir, bool has_par,
              std::size_t par_override) {
  mtl::SweepSpec spec = mtl::sweep_from_json(load_json_file(config_path));
  if (has_par) spec.parallelism = par_override;
  if (spec.parallelism == 0) throw mtl::ConfigError("parallelism must be >= 1");
  fs::create_directories(out_dir);

  std::printf("sweep: %zu cells, parallelism %zu\n", spec.cartesian_size(), spec.parallelism);
  std::fflush(stdout);
  const std::vector<mtl::RunRecord> records = mtl::run_sweep(spec);
  write_text(fs::path(out_dir) / "records.csv", mtl::records_to_csv(records));

  std::size_t ok = 0;
  for (const mtl::RunRecord& r : records) ok += r.status == "ok";
  std::printf("sweep: %zu ok, %zu diverged -> %s/records.csv\n", ok, records.size() - ok,
              out_dir.c_str());
  return ok > 0 ? 0 : 2;
}

int cmd_report(const std::string& records_path, const std::string& out_dir,
               const std::string& metrics, bool accuracies) {
  const std::vector<mtl::RunRecord> records = mtl::records_from_csv(slurp(records_path));
  mtl::ReportOptions opts;
  opts.accuracies = accuracies;
  if (!metrics.empty()) {
    std::size_t pos = 0;
    while (pos <= metrics.size()) {
      const std::size_t next = metrics.find(',', pos);
      const std::string col =
          metrics.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      if (!col.empty()) opts.metric_columns.push_back(col);
      if (next == std::string::npos) break;
      pos = next + 1;
    }
  }
  const mtl::FrontierReport rep = mtl::report_frontier(records, opts);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "frontier.csv", mtl::frontier_to_csv(rep));
  const std::string summary = mtl::report_summary_json(rep).dump(2) + "\n";
  write_text(fs::path(out_dir) / "summary.json", summary);
  std::fputs(summary.c_str(), stdout);
  return 0;
}

int cmd_gradcheck_cli(const std::string& out_dir, std::size_t entries) {
  const mtl::GradcheckReport rep = mtl::cmd_gradcheck(entries);
  std::string text;
  for (const mtl::GradcheckCell& cell : rep.cells) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %-10s %-12s %.3e\n", cell.preset.c_str(),
                  cell.aux.c_str(), cell.loss.c_str(), cell.max_rel_err);
    text += line;
  }
  char tail[96];
  std::snprintf(tail, sizeof(tail), "%s: worst %.3e (bar 1e-4)\n", rep.pass ? "PASS" : "FAIL",
                rep.worst);
  text += tail;
  std::fputs(text.c_str(), stdout);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "gradcheck.txt", text);
  }
  return rep.pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task learning experiment harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", metrics;
  std::uint64_t seed = 0;
  std::size_t parallelism = 1, entries = 5;
  bool accuracies = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate datasets (synthetic/glyphs/pairs)");
  gen->add_option("--config", config_path, "generator config JSON")->required();
  gen->add_option("--out", out_dir, "output directory");
  CLI::Option* gen_seed = gen->add_option("--seed", seed, "override the config seed");

  CLI::App* train = app.add_subcommand("train", "Run a single trial");
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--out", out_dir, "output directory");
  CLI::Option* train_seed = train->add_option("--seed", seed, "override the config seed");

  CLI::App* sweep = app.add_subcommand("sweep", "Run a sweep grid");
  sweep->add_option("--config", config_path, "sweep spec JSON")->required();
  sweep->add_option("--out", out_dir, "output directory");
  CLI::Option* sweep_par =
      sweep->add_option("--parallelism", parallelism, "override concurrent trials");

  CLI::App* report = app.add_subcommand("report", "Pareto frontier + summary from records");
  report->add_option("--config", config_path, "records CSV path")->required();
  report->add_option("--out", out_dir, "output directory");
  report->add_option("--metrics", metrics, "objective columns, e.g. test_metric_1,test_metric_2");
  report->add_flag("--accuracies", accuracies, "metrics are accuracies; convert to error rates");

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference audit of every preset");
  std::string gc_out;
  gc->add_option("--out", gc_out, "directory for gradcheck.txt (optional)");
  gc->add_option("--entries", entries, "sampled entries per parameter tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, !gen_seed->empty(), seed);
    if (train->parsed()) return cmd_train(config_path, out_dir, !train_seed->empty(), seed);
    if (sweep->parsed()) return cmd_sweep(config_path, out_dir, !sweep_par->empty(), parallelism);
    if (report->parsed()) return cmd_report(config_path, out_dir, metrics, accuracies);
    if (gc->parsed()) return cmd_gradcheck_cli(gc_out, entries);
  } catch (const mtl::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
