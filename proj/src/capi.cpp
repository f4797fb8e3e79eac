#include "sao/sao.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "checks.hpp"
#include "metrics.hpp"
#include "trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

thread_local std::string g_last_error;

sao_status status_from(sao::ErrorCode code) {
  switch (code) {
    case sao::ErrorCode::IoError:
    case sao::ErrorCode::SchemaError:
    case sao::ErrorCode::MalformedLine:
    case sao::ErrorCode::FormatVersionMismatch:
    case sao::ErrorCode::ManifestLengthMismatch:
      return SAO_ERROR_IO;
    default:
      return SAO_ERROR_VALIDATION;
  }
}

template <typename Fn>
sao_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    return fn();
  } catch (const sao::Error& e) {
    g_last_error = e.what();
    return status_from(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SAO_ERROR_VALIDATION;
  }
}

sao_status arg_error(const std::string& msg) {
  g_last_error = msg;
  return SAO_ERROR_ARGUMENT;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) sao::fail(sao::ErrorCode::IoError, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

sao::synth::DatasetConfig dataset_config_from_json_text(const char* text) {
  sao::synth::DatasetConfig cfg;
  if (text == nullptr || *text == '\0') return cfg;
  json j;
  try {
    j = json::parse(text);
    cfg.n_train = j.value("n_train", cfg.n_train);
    cfg.n_valid = j.value("n_valid", cfg.n_valid);
    cfg.n_test = j.value("n_test", cfg.n_test);
    cfg.len_min = j.value("len_min", cfg.len_min);
    cfg.len_max = j.value("len_max", cfg.len_max);
    cfg.perturbation.sigma_t = j.value("sigma_t", cfg.perturbation.sigma_t);
    cfg.perturbation.sigma_r = j.value("sigma_r", cfg.perturbation.sigma_r);
    cfg.n_labels = j.value("n_labels", cfg.n_labels);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    sao::fail(sao::ErrorCode::SchemaError, std::string("dataset config: ") + e.what());
  }
  return cfg;
}

sao::train::TrainConfig train_config_from_text(const char* text) {
  if (text == nullptr || *text == '\0')
    return sao::train::TrainConfig{};
  return sao::train::train_config_from_json_text(text);
}

}  // namespace

struct sao_model {
  sao::train::LoadedCheckpoint checkpoint;
};

extern "C" {

const char* sao_last_error(void) { return g_last_error.c_str(); }

void sao_string_free(char* s) { std::free(s); }

sao_status sao_dataset_generate(const char* out_dir, const char* config_json) {
  if (out_dir == nullptr) return arg_error("sao_dataset_generate: out_dir is NULL");
  return guarded([&] {
    sao::synth::build_dataset(out_dir, dataset_config_from_json_text(config_json));
    return SAO_OK;
  });
}

sao_status sao_pretrain(const char* data_dir, const char* config_json,
                        const char* out_checkpoint, const char* metrics_path) {
  if (data_dir == nullptr || out_checkpoint == nullptr)
    return arg_error("sao_pretrain: data_dir and out_checkpoint are required");
  return guarded([&] {
    sao::train::TrainConfig cfg = train_config_from_text(config_json);
    std::vector<sao::synth::LabeledPair> train =
        sao::synth::load_split(data_dir, "train");
    sao::train::ModelState state = sao::train::pretrain(
        train, cfg, metrics_path == nullptr ? "" : metrics_path);
    sao::train::save_checkpoint(state, cfg, out_checkpoint);
    return SAO_OK;
  });
}

sao_status sao_finetune(const char* data_dir, const char* mode,
                        const char* init_checkpoint, const char* config_json,
                        const char* out_checkpoint, const char* metrics_path) {
  if (data_dir == nullptr || mode == nullptr || out_checkpoint == nullptr)
    return arg_error("sao_finetune: data_dir, mode, out_checkpoint are required");
  return guarded([&] {
    sao::train::TrainConfig cfg = train_config_from_text(config_json);
    sao::train::FinetuneMode m = sao::train::finetune_mode_from_string(mode);
    std::vector<sao::synth::LabeledPair> train =
        sao::synth::load_split(data_dir, "train");
    sao::train::ModelState* init = nullptr;
    sao::train::LoadedCheckpoint loaded;
    if (init_checkpoint != nullptr) {
      loaded = sao::train::load_checkpoint(init_checkpoint);
      init = &loaded.state;
    }
    sao::train::ModelState state = sao::train::finetune(
        train, m, init, cfg, metrics_path == nullptr ? "" : metrics_path);
    sao::train::save_checkpoint(state, cfg, out_checkpoint);
    return SAO_OK;
  });
}

sao_status sao_model_load(const char* checkpoint_path, sao_model** out_model) {
  if (checkpoint_path == nullptr || out_model == nullptr)
    return arg_error("sao_model_load: checkpoint_path and out_model are required");
  return guarded([&] {
    auto model = std::make_unique<sao_model>();
    model->checkpoint = sao::train::load_checkpoint(checkpoint_path);
    *out_model = model.release();
    return SAO_OK;
  });
}

void sao_model_free(sao_model* model) { delete model; }

sao_status sao_model_eval(const sao_model* model, const char* data_dir,
                          const char* split, char** out_report_json) {
  if (model == nullptr || data_dir == nullptr || split == nullptr ||
      out_report_json == nullptr)
    return arg_error("sao_model_eval: all arguments are required");
  return guarded([&] {
    std::vector<sao::synth::LabeledPair> pairs = sao::synth::load_split(data_dir, split);
    sao::metrics::EvalReport r = sao::metrics::performance_gap(
        model->checkpoint.state.online, model->checkpoint.config.encoder, pairs);
    json out{{"n_proteins", r.n_proteins},
             {"experimental", {{"fmax", r.fmax_experimental}, {"aupr", r.aupr_experimental}}},
             {"predicted", {{"fmax", r.fmax_predicted}, {"aupr", r.aupr_predicted}}},
             {"gap", {{"fmax", r.fmax_gap}, {"aupr", r.aupr_gap}}},
             {"config", json::parse(sao::train::train_config_to_json_text(
                            model->checkpoint.config))}};
    *out_report_json = dup_string(out.dump(2));
    return SAO_OK;
  });
}

sao_status sao_model_bias(const sao_model* model, const char* data_dir,
                          const char* split, const char* dump_path,
                          char** out_report_json) {
  if (model == nullptr || data_dir == nullptr || split == nullptr ||
      out_report_json == nullptr)
    return arg_error("sao_model_bias: model, data_dir, split, out are required");
  return guarded([&] {
    std::vector<sao::synth::LabeledPair> pairs = sao::synth::load_split(data_dir, split);
    sao::metrics::BiasReport r = sao::metrics::embedding_bias(
        model->checkpoint.state.online, model->checkpoint.config.encoder, pairs,
        dump_path == nullptr ? "" : dump_path);
    json out{{"mean_distance", r.mean_distance},
             {"per_pair", r.per_pair},
             {"n_pairs", r.per_pair.size()}};
    *out_report_json = dup_string(out.dump(2));
    return SAO_OK;
  });
}

sao_status sao_model_saliency(const sao_model* model, const char* protein_path,
                              int label_index, char** out_json) {
  if (model == nullptr || protein_path == nullptr || out_json == nullptr)
    return arg_error("sao_model_saliency: model, protein_path, out are required");
  return guarded([&] {
    sao::prot::Protein p = sao::prot::read_protein_json(read_file(protein_path));
    std::vector<double> sal = sao::metrics::saliency(
        model->checkpoint.state.online, model->checkpoint.config.encoder, p,
        label_index);
    json out{{"id", p.id}, {"label", label_index}, {"saliency", sal}};
    *out_json = dup_string(out.dump(2));
    return SAO_OK;
  });
}

sao_status sao_parse_pdb(const char* pdb_path, const char* out_dir, int strict,
                         char** out_ids_json) {
  if (pdb_path == nullptr || out_dir == nullptr)
    return arg_error("sao_parse_pdb: pdb_path and out_dir are required");
  return guarded([&] {
    sao::prot::ParseOptions opts;
    opts.strict = strict != 0;
    std::vector<sao::prot::Protein> chains =
        sao::prot::parse_pdb_lite(read_file(pdb_path), opts);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) sao::fail(sao::ErrorCode::IoError, "cannot create " + std::string(out_dir));
    json ids = json::array();
    for (const sao::prot::Protein& p : chains) {
      fs::path path = fs::path(out_dir) / (p.id + ".protein.json");
      std::ofstream out(path, std::ios::trunc);
      if (!out) sao::fail(sao::ErrorCode::IoError, "cannot write " + path.string());
      out << sao::prot::write_protein_json(p);
      ids.push_back(p.id);
    }
    if (out_ids_json != nullptr) *out_ids_json = dup_string(ids.dump());
    return SAO_OK;
  });
}

sao_status sao_run_check(const char* suite, char** out_text) {
  if (suite == nullptr) return arg_error("sao_run_check: suite is NULL");
  std::string name(suite);
  if (name != "frames" && name != "grads" && name != "equivariance")
    return arg_error("sao_run_check: unknown suite '" + name + "'");
  return guarded([&] {
    std::ostringstream buf;
    bool pass = sao::checks::run_suite(suite, buf);
    if (out_text != nullptr) *out_text = dup_string(buf.str());
    if (!pass) {
      g_last_error = "check suite failed: " + std::string(suite);
      return SAO_ERROR_VALIDATION;
    }
    return SAO_OK;
  });
}

}  // extern "C"
