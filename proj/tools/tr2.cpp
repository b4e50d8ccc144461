#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tr2/checkpoint.hpp"
#include "tr2/trainer.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void spit(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << content;
}

std::string out_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

tr2::Dataset load_eval_dataset(const tr2::RunConfig& cfg) {
  if (!cfg.val_dataset_path.empty()) {
    return tr2::load_dataset(cfg, cfg.val_dataset_path, cfg.val_clip_path);
  }
  return tr2::load_dataset(cfg, cfg.dataset_path, cfg.clip_path);
}

int run_gen(const tr2::RunConfig& cfg) {
  if (cfg.dataset_path.empty() || cfg.clip_path.empty()) {
    throw std::runtime_error("gen requires dataset_path and clip_path");
  }
  tr2::SynthDataset data = tr2::generate(cfg.gen);
  tr2::write_dataset(data.videos, cfg.dataset_path);
  data.embeddings.write(cfg.clip_path);
  std::cout << "wrote " << data.videos.size() << " videos to "
            << cfg.dataset_path << "\n";
  return 0;
}

int run_train(const tr2::RunConfig& cfg) {
  tr2::Dataset train_data =
      tr2::load_dataset(cfg, cfg.dataset_path, cfg.clip_path);
  tr2::Dataset val_data;
  const bool has_val = !cfg.val_dataset_path.empty();
  if (has_val) {
    val_data = tr2::load_dataset(cfg, cfg.val_dataset_path, cfg.val_clip_path);
  }
  tr2::TrainResult result =
      tr2::train(cfg, train_data, has_val ? &val_data : nullptr);
  if (!cfg.report_dir.empty()) {
    std::filesystem::create_directories(cfg.report_dir);
    spit(out_path(cfg.report_dir, "run_record.json"),
         result.record.to_json());
    if (has_val) {
      spit(out_path(cfg.report_dir, "recall.csv"),
           tr2::recall_report_csv(result.record.val_recall));
    }
  }
  const auto& losses = result.record.epoch_losses;
  std::cout << "trained " << losses.size() << " epochs";
  if (!losses.empty()) {
    std::cout << ", final loss " << tr2::fmt_float(losses.back().total);
  }
  std::cout << "\n";
  return 0;
}

int run_eval(const tr2::RunConfig& cfg) {
  if (cfg.checkpoint_path.empty()) {
    throw std::runtime_error("eval requires checkpoint_path");
  }
  tr2::ParamStore store = tr2::load_checkpoint(cfg.checkpoint_path);
  tr2::Dataset data = load_eval_dataset(cfg);
  const auto rows = tr2::evaluate(cfg, store, data);
  const std::string csv = tr2::recall_report_csv(rows);
  if (!cfg.report_dir.empty()) {
    std::filesystem::create_directories(cfg.report_dir);
    spit(out_path(cfg.report_dir, "recall.csv"), csv);
  }
  std::cout << csv;
  return 0;
}

int run_ablate(const tr2::RunConfig& cfg,
               const std::vector<std::string>& variants,
               std::int64_t num_seeds) {
  tr2::Dataset train_data =
      tr2::load_dataset(cfg, cfg.dataset_path, cfg.clip_path);
  if (cfg.val_dataset_path.empty()) {
    throw std::runtime_error("ablate requires val_dataset_path");
  }
  tr2::Dataset val_data =
      tr2::load_dataset(cfg, cfg.val_dataset_path, cfg.val_clip_path);
  const auto rows =
      tr2::ablate(cfg, variants, num_seeds, train_data, val_data);
  const std::string csv = tr2::ablation_csv(rows);
  if (!cfg.report_dir.empty()) {
    std::filesystem::create_directories(cfg.report_dir);
    spit(out_path(cfg.report_dir, "ablation.csv"), csv);
  }
  std::cout << csv;
  return 0;
}

int run_gradcheck(const tr2::RunConfig& cfg) {
  const auto results = tr2::gradcheck(cfg);
  bool all_pass = true;
  for (const auto& r : results) {
    std::cout << "gradcheck " << r.variant << " "
              << (r.report.pass ? "pass" : "FAIL")
              << " max_rel_err=" << tr2::fmt_float(r.report.max_rel_err)
              << " worst=" << r.report.worst.param << "["
              << r.report.worst.index << "]\n";
    all_pass = all_pass && r.report.pass;
  }
  if (!all_pass) throw std::runtime_error("gradient check failed");
  return 0;
}

int run_report(const std::vector<std::string>& records,
               const std::string& out_dir) {
  std::string losses = "source,epoch,l_obj,l_rel,l_guidance,lambda,total\n";
  std::string recall = "source,task,strategy,K,recall\n";
  for (const auto& path : records) {
    const tr2::RunRecord rec = tr2::RunRecord::from_json(slurp(path));
    const std::string name = std::filesystem::path(path).stem().string();
    for (size_t e = 0; e < rec.epoch_losses.size(); ++e) {
      const auto& b = rec.epoch_losses[e];
      losses += name + "," + std::to_string(e) + "," +
                tr2::fmt_float(b.l_obj) + "," + tr2::fmt_float(b.l_rel) +
                "," + tr2::fmt_float(b.l_guidance) + "," +
                tr2::fmt_float(b.lambda) + "," + tr2::fmt_float(b.total) +
                "\n";
    }
    for (const auto& r : rec.val_recall) {
      recall += name + "," + tr2::to_string(r.task) + "," +
                tr2::to_string(r.strategy) + "," + std::to_string(r.k) + "," +
                tr2::fmt_float(r.recall) + "\n";
    }
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    spit(out_path(out_dir, "losses.csv"), losses);
    spit(out_path(out_dir, "recall.csv"), recall);
  } else {
    std::cout << losses << recall;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TR2 dynamic scene graph pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> variants = {"tr2", "tr2bin", "tr2minus", "eq4"};
  std::int64_t num_seeds = 3;
  std::vector<std::string> record_files;
  std::string out_dir;

  auto* gen = app.add_subcommand("gen", "write a synthetic dataset");
  gen->add_option("--config", config_path, "run config file")->required();

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "run config file")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "run config file")->required();

  auto* ablate = app.add_subcommand("ablate", "train and compare variants");
  ablate->add_option("--config", config_path, "run config file")->required();
  ablate->add_option("--variants", variants, "variant names");
  ablate->add_option("--seeds", num_seeds, "seeds per variant");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check");
  gradcheck->add_option("--config", config_path, "run config file");

  auto* report = app.add_subcommand("report", "merge run records to CSV");
  report->add_option("records", record_files, "run record JSON files")
      ->required();
  report->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) return run_report(record_files, out_dir);
    tr2::RunConfig cfg;
    if (!config_path.empty()) cfg = tr2::load_config(config_path);
    if (gen->parsed()) return run_gen(cfg);
    if (train->parsed()) return run_train(cfg);
    if (eval->parsed()) return run_eval(cfg);
    if (ablate->parsed()) return run_ablate(cfg, variants, num_seeds);
    if (gradcheck->parsed()) return run_gradcheck(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
