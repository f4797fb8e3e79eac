#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sao/sao.h"

using nlohmann::json;

namespace {

// Exit codes: 0 success, 1 validation/check failure, 2 I/O or format error.
int exit_code(sao_status s) {
  switch (s) {
    case SAO_OK: return 0;
    case SAO_ERROR_IO: return 2;
    default: return 1;
  }
}

int finish(sao_status s) {
  if (s != SAO_OK) std::cerr << "error: " << sao_last_error() << "\n";
  return exit_code(s);
}

bool write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    std::cerr << "error: cannot write " << path << "\n";
    return false;
  }
  out << text;
  return out.good();
}

struct TrainOptions {
  std::string config_path;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> max_lr;
  std::optional<double> ema_lambda;
  std::optional<double> mask_ratio;
  std::optional<uint64_t> seed;
  std::optional<std::string> precision;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (flags override it)");
    cmd->add_option("--epochs", epochs, "training epochs (default 30)");
    cmd->add_option("--batch-size", batch_size, "batch size (default 8)");
    cmd->add_option("--max-lr", max_lr, "peak learning rate (default 1e-4)");
    cmd->add_option("--ema-lambda", ema_lambda, "target EMA decay (default 0.99)");
    cmd->add_option("--mask-ratio", mask_ratio, "masked residue fraction (default 0.15)");
    cmd->add_option("--seed", seed, "random seed (default 0)");
    cmd->add_option("--precision", precision, "f32 or f64 (default f32)")
        ->check(CLI::IsMember({"f32", "f64"}));
  }

  /// File config plus flag overrides, as JSON text. Empty string on parse error.
  std::string merged() const {
    json j = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) {
        std::cerr << "error: cannot open config " << config_path << "\n";
        return "";
      }
      try {
        in >> j;
      } catch (const json::exception& e) {
        std::cerr << "error: config " << config_path << ": " << e.what() << "\n";
        return "";
      }
    }
    if (epochs) j["epochs"] = *epochs;
    if (batch_size) j["batch_size"] = *batch_size;
    if (max_lr) j["lr"]["max_lr"] = *max_lr;
    if (ema_lambda) j["ema_lambda"] = *ema_lambda;
    if (mask_ratio) j["mask_ratio"] = *mask_ratio;
    if (seed) j["seed"] = *seed;
    if (precision) j["precision"] = *precision;
    return j.dump();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Roto-translation-invariant protein structure encoder: synthetic paired "
      "datasets, bootstrap pretraining, multi-label fine-tuning, evaluation."};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic paired dataset");
  std::string gen_out;
  int n_train = 256, n_valid = 32, n_test = 64, len_min = 48, len_max = 96, n_labels = 8;
  double sigma_t = 0.8, sigma_r = 0.15;
  uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-train", n_train, "train pairs (default 256)");
  gen->add_option("--n-valid", n_valid, "validation pairs (default 32)");
  gen->add_option("--n-test", n_test, "test pairs (default 64)");
  gen->add_option("--len-min", len_min, "minimum protein length (default 48)");
  gen->add_option("--len-max", len_max, "maximum protein length (default 96)");
  gen->add_option("--sigma-t", sigma_t, "translation noise std, Angstrom (default 0.8)");
  gen->add_option("--sigma-r", sigma_r, "rotation noise std, radians (default 0.15)");
  gen->add_option("--n-labels", n_labels, "labels per protein (default 8)");
  gen->add_option("--seed", gen_seed, "dataset seed (default 7)");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Bootstrap pretraining on paired structures");
  std::string pre_data, pre_out, pre_metrics;
  TrainOptions pre_opts;
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "output checkpoint")->required();
  pre->add_option("--metrics", pre_metrics, "JSON-lines metrics output");
  pre_opts.attach(pre);

  // finetune
  auto* fin = app.add_subcommand("finetune", "Fine-tune for multi-label prediction");
  std::string fin_data, fin_mode, fin_init, fin_out, fin_metrics;
  TrainOptions fin_opts;
  fin->add_option("--data", fin_data, "dataset directory")->required();
  fin->add_option("--mode", fin_mode, "vanilla | tonp | mixed | sao")
      ->required()
      ->check(CLI::IsMember({"vanilla", "tonp", "mixed", "sao"}));
  fin->add_option("--init", fin_init, "pretraining checkpoint (required for sao)");
  fin->add_option("--out", fin_out, "output checkpoint")->required();
  fin->add_option("--metrics", fin_metrics, "JSON-lines metrics output");
  fin_opts.attach(fin);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate fmax/aupr and the performance gap");
  std::string ev_data, ev_model, ev_report, ev_split = "test";
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--model", ev_model, "fine-tuned checkpoint")->required();
  ev->add_option("--report", ev_report, "report JSON output path");
  ev->add_option("--split", ev_split, "dataset split (default test)");

  // bias
  auto* bi = app.add_subcommand("bias", "Measure paired embedding distance");
  std::string bi_data, bi_model, bi_out, bi_dump, bi_split = "test";
  bi->add_option("--data", bi_data, "dataset directory")->required();
  bi->add_option("--model", bi_model, "checkpoint")->required();
  bi->add_option("--out", bi_out, "report JSON output path");
  bi->add_option("--dump-embeddings", bi_dump, "raw embedding JSON-lines output");
  bi->add_option("--split", bi_split, "dataset split (default test)");

  // saliency
  auto* sal = app.add_subcommand("saliency", "Per-residue gradient saliency for one label");
  std::string sal_model, sal_protein, sal_out;
  int sal_label = 0;
  sal->add_option("--model", sal_model, "fine-tuned checkpoint")->required();
  sal->add_option("--protein", sal_protein, "protein JSON file")->required();
  sal->add_option("--label", sal_label, "label index (default 0)");
  sal->add_option("--out", sal_out, "saliency JSON output path");

  // check
  auto* chk = app.add_subcommand("check", "Run a property suite");
  std::string chk_suite;
  chk->add_option("suite", chk_suite, "frames | grads | equivariance")
      ->required()
      ->check(CLI::IsMember({"frames", "grads", "equivariance"}));

  // parse-pdb
  auto* pdb = app.add_subcommand("parse-pdb", "Convert PDB chains to protein JSON");
  std::string pdb_in, pdb_out_dir;
  bool pdb_strict = false;
  pdb->add_option("--in", pdb_in, "PDB file")->required();
  pdb->add_option("--out-dir", pdb_out_dir, "output directory")->required();
  pdb->add_flag("--strict", pdb_strict, "fail on incomplete residues");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    json cfg{{"n_train", n_train}, {"n_valid", n_valid}, {"n_test", n_test},
             {"len_min", len_min}, {"len_max", len_max}, {"sigma_t", sigma_t},
             {"sigma_r", sigma_r}, {"n_labels", n_labels}, {"seed", gen_seed}};
    return finish(sao_dataset_generate(gen_out.c_str(), cfg.dump().c_str()));
  }

  if (pre->parsed()) {
    std::string cfg = pre_opts.merged();
    if (cfg.empty()) return 2;
    return finish(sao_pretrain(pre_data.c_str(), cfg.c_str(), pre_out.c_str(),
                               pre_metrics.empty() ? nullptr : pre_metrics.c_str()));
  }

  if (fin->parsed()) {
    std::string cfg = fin_opts.merged();
    if (cfg.empty()) return 2;
    return finish(sao_finetune(fin_data.c_str(), fin_mode.c_str(),
                               fin_init.empty() ? nullptr : fin_init.c_str(),
                               cfg.c_str(), fin_out.c_str(),
                               fin_metrics.empty() ? nullptr : fin_metrics.c_str()));
  }

  if (ev->parsed() || bi->parsed() || sal->parsed()) {
    const std::string& path = ev->parsed() ? ev_model : bi->parsed() ? bi_model : sal_model;
    sao_model* model = nullptr;
    sao_status s = sao_model_load(path.c_str(), &model);
    if (s != SAO_OK) return finish(s);
    char* report = nullptr;
    if (ev->parsed()) {
      s = sao_model_eval(model, ev_data.c_str(), ev_split.c_str(), &report);
    } else if (bi->parsed()) {
      s = sao_model_bias(model, bi_data.c_str(), bi_split.c_str(),
                         bi_dump.empty() ? nullptr : bi_dump.c_str(), &report);
    } else {
      s = sao_model_saliency(model, sal_protein.c_str(), sal_label, &report);
    }
    int code = exit_code(s);
    if (s == SAO_OK) {
      std::cout << report << "\n";
      const std::string& out_path = ev->parsed() ? ev_report : bi->parsed() ? bi_out : sal_out;
      if (!out_path.empty() && !write_text_file(out_path, report)) code = 2;
      sao_string_free(report);
    } else {
      std::cerr << "error: " << sao_last_error() << "\n";
    }
    sao_model_free(model);
    return code;
  }

  if (chk->parsed()) {
    char* text = nullptr;
    sao_status s = sao_run_check(chk_suite.c_str(), &text);
    if (text != nullptr) {
      std::cout << text;
      sao_string_free(text);
    }
    if (s != SAO_OK) std::cerr << "check suite failed: " << chk_suite << "\n";
    return exit_code(s);
  }

  if (pdb->parsed()) {
    char* ids = nullptr;
    sao_status s = sao_parse_pdb(pdb_in.c_str(), pdb_out_dir.c_str(), pdb_strict ? 1 : 0, &ids);
    if (s == SAO_OK) {
      std::cout << "wrote chains: " << ids << "\n";
      sao_string_free(ids);
    }
    return finish(s);
  }

  return 0;
}
