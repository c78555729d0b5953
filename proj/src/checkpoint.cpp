#include "cmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cmoe {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "weights.bin is little-endian; byte-swapped platforms are not wired up");

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// --- keyed JSON readers; every failure names the offending key -------------

class KeyedObject {
 public:
  KeyedObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw std::runtime_error(where_ + ": expected a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;  // keep default
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw std::runtime_error(where_ + ": key \"" + key + "\" has the wrong type");
    }
    seen_.push_back(key);
  }

  void get_nested(const char* key, const std::function<void(const json&)>& fn) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    fn(*it);
    seen_.push_back(key);
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const std::string& s : seen_)
        if (s == it.key()) known = true;
      if (!known) throw std::runtime_error(where_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

std::string merge_name(MergeStrategy m) {
  return m == MergeStrategy::sum ? "sum" : "last_token";
}
MergeStrategy merge_from(const std::string& s) {
  if (s == "sum") return MergeStrategy::sum;
  if (s == "last_token") return MergeStrategy::last_token;
  throw std::runtime_error("config: key \"merge\" must be \"sum\" or \"last_token\"");
}

std::string router_name(RouterKind r) {
  switch (r) {
    case RouterKind::cosine: return "cosine";
    case RouterKind::linear: return "linear";
    default: return "fixed";
  }
}
RouterKind router_from(const std::string& s) {
  if (s == "cosine") return RouterKind::cosine;
  if (s == "linear") return RouterKind::linear;
  if (s == "fixed") return RouterKind::fixed;
  throw std::runtime_error("config: key \"router\" must be cosine|linear|fixed");
}

std::string noise_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::bernoulli: return "bernoulli";
    default: return "gaussian";
  }
}
NoiseKind noise_from(const std::string& s) {
  if (s == "none") return NoiseKind::none;
  if (s == "bernoulli") return NoiseKind::bernoulli;
  if (s == "gaussian") return NoiseKind::gaussian;
  throw std::runtime_error("config: key \"noise.kind\" must be none|bernoulli|gaussian");
}

}  // namespace

ModelConfig model_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("model config: invalid JSON: ") + e.what());
  }
  ModelConfig cfg;
  KeyedObject o(j, "model config");
  std::string arch = "concept_moe", merge = merge_name(cfg.merge), span = "ends_at_boundary";
  std::string router = router_name(cfg.router), ema = "recursive";
  o.get("arch", arch);
  o.get("d", cfg.d);
  o.get("d_c", cfg.d_c);
  o.get("L_E", cfg.L_E);
  o.get("L_C", cfg.L_C);
  o.get("L_D", cfg.L_D);
  o.get("L_loop", cfg.L_loop);
  o.get("n_heads", cfg.n_heads);
  o.get("d_ff", cfg.d_ff);
  o.get("concept_d_ff", cfg.concept_d_ff);
  o.get("n_experts", cfg.n_experts);
  o.get("k_active", cfg.k_active);
  o.get("concept_n_experts", cfg.concept_n_experts);
  o.get("concept_k_active", cfg.concept_k_active);
  o.get("R_target", cfg.R_target);
  o.get("merge", merge);
  o.get("sum_span", span);
  o.get_nested("noise", [&](const json& nj) {
    KeyedObject n(nj, "model config noise");
    std::string kind = noise_name(cfg.noise.kind);
    n.get("kind", kind);
    n.get("tau", cfg.noise.tau);
    n.get("sigma", cfg.noise.sigma);
    n.reject_unknown();
    cfg.noise.kind = noise_from(kind);
  });
  o.get("router", router);
  o.get("fixed_stride", cfg.fixed_stride);
  o.get("joint_decoding", cfg.joint_decoding);
  o.get("joint_layers", cfg.joint_layers);
  o.get("ema_mode", ema);
  o.get("lambda_aux", cfg.lambda_aux);
  o.get("seq_len", cfg.seq_len);
  o.get("vocab", cfg.vocab);
  o.get("concept_delta_residual", cfg.concept_delta_residual);
  o.reject_unknown();

  if (arch == "concept_moe")
    cfg.arch = Arch::concept_moe;
  else if (arch == "moe_baseline")
    cfg.arch = Arch::moe_baseline;
  else
    throw std::runtime_error("config: key \"arch\" must be concept_moe|moe_baseline");
  cfg.merge = merge_from(merge);
  if (span == "ends_at_boundary")
    cfg.sum_span = SumSpan::ends_at_boundary;
  else if (span == "starts_at_boundary")
    cfg.sum_span = SumSpan::starts_at_boundary;
  else
    throw std::runtime_error("config: key \"sum_span\" must be ends_at_boundary|starts_at_boundary");
  cfg.router = router_from(router);
  if (ema == "recursive")
    cfg.ema_mode = EmaMode::recursive;
  else if (ema == "one_step")
    cfg.ema_mode = EmaMode::one_step;
  else
    throw std::runtime_error("config: key \"ema_mode\" must be recursive|one_step");
  cfg.validate();
  return cfg;
}

std::string model_config_to_json_text(const ModelConfig& cfg) {
  json j;
  j["arch"] = cfg.arch == Arch::concept_moe ? "concept_moe" : "moe_baseline";
  j["d"] = cfg.d;
  j["d_c"] = cfg.d_c;
  j["L_E"] = cfg.L_E;
  j["L_C"] = cfg.L_C;
  j["L_D"] = cfg.L_D;
  j["L_loop"] = cfg.L_loop;
  j["n_heads"] = cfg.n_heads;
  j["d_ff"] = cfg.d_ff;
  j["concept_d_ff"] = cfg.concept_d_ff;
  j["n_experts"] = cfg.n_experts;
  j["k_active"] = cfg.k_active;
  j["concept_n_experts"] = cfg.concept_n_experts;
  j["concept_k_active"] = cfg.concept_k_active;
  j["R_target"] = cfg.R_target;
  j["merge"] = merge_name(cfg.merge);
  j["sum_span"] = cfg.sum_span == SumSpan::ends_at_boundary ? "ends_at_boundary" : "starts_at_boundary";
  j["noise"] = {{"kind", noise_name(cfg.noise.kind)}, {"tau", cfg.noise.tau}, {"sigma", cfg.noise.sigma}};
  j["router"] = router_name(cfg.router);
  j["fixed_stride"] = cfg.fixed_stride;
  j["joint_decoding"] = cfg.joint_decoding;
  j["joint_layers"] = cfg.joint_layers;
  j["ema_mode"] = cfg.ema_mode == EmaMode::recursive ? "recursive" : "one_step";
  j["lambda_aux"] = cfg.lambda_aux;
  j["seq_len"] = cfg.seq_len;
  j["vocab"] = cfg.vocab;
  j["concept_delta_residual"] = cfg.concept_delta_residual;
  return j.dump(2) + "\n";
}

ModelConfig load_model_config(const std::string& path) {
  return model_config_from_json_text(read_file(path));
}

TrainConfig train_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("train config: invalid JSON: ") + e.what());
  }
  TrainConfig cfg;
  KeyedObject o(j, "train config");
  std::string prec = "f32";
  std::vector<double> betas;
  o.get("steps", cfg.steps);
  o.get("batch", cfg.batch);
  o.get("seq_len", cfg.seq_len);
  o.get("lr_peak", cfg.lr_peak);
  o.get("lr_warmup_steps", cfg.lr_warmup_steps);
  o.get("lr_min", cfg.lr_min);
  o.get("weight_decay", cfg.weight_decay);
  o.get("betas", betas);
  o.get("seed", cfg.seed);
  o.get("eval_every", cfg.eval_every);
  o.get("lambda_aux", cfg.lambda_aux);
  o.get("R_target", cfg.R_target);
  o.get("grad_clip", cfg.grad_clip);
  o.get("eval_windows", cfg.eval_windows);
  o.get("precision", prec);
  o.reject_unknown();
  if (!betas.empty()) {
    if (betas.size() != 2) throw std::runtime_error("train config: key \"betas\" must have two entries");
    cfg.beta1 = betas[0];
    cfg.beta2 = betas[1];
  }
  if (prec == "f32")
    cfg.train_precision = Precision::f32;
  else if (prec == "f64")
    cfg.train_precision = Precision::f64;
  else
    throw std::runtime_error("train config: key \"precision\" must be f32|f64");
  cfg.validate();
  return cfg;
}

std::string train_config_to_json_text(const TrainConfig& cfg) {
  json j;
  j["steps"] = cfg.steps;
  j["batch"] = cfg.batch;
  j["seq_len"] = cfg.seq_len;
  j["lr_peak"] = cfg.lr_peak;
  j["lr_warmup_steps"] = cfg.lr_warmup_steps;
  j["lr_min"] = cfg.lr_min;
  j["weight_decay"] = cfg.weight_decay;
  j["betas"] = {cfg.beta1, cfg.beta2};
  j["seed"] = cfg.seed;
  j["eval_every"] = cfg.eval_every;
  j["lambda_aux"] = cfg.lambda_aux;
  j["R_target"] = cfg.R_target;
  j["grad_clip"] = cfg.grad_clip;
  j["eval_windows"] = cfg.eval_windows;
  j["precision"] = cfg.train_precision == Precision::f32 ? "f32" : "f64";
  return j.dump(2) + "\n";
}

TrainConfig load_train_config(const std::string& path) {
  return train_config_from_json_text(read_file(path));
}

void save_checkpoint(const std::string& dir, const ModelConfig& cfg, ModelWeights& w) {
  std::filesystem::create_directories(dir);
  json manifest = json::array();
  std::string blob;
  int64_t offset = 0;
  w.for_each([&](const std::string& name, Tensor& t) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["dtype"] = "f32";
    entry["byte_offset"] = offset;
    manifest.push_back(entry);
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      char bytes[4];
      std::memcpy(bytes, &f, 4);
      blob.append(bytes, 4);
    }
    offset += t.numel() * 4;
  });
  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  write_file(dir + "/weights.bin", blob);
  write_file(dir + "/config.json", model_config_to_json_text(cfg));
}

LoadedModel load_checkpoint(const std::string& dir) {
  LoadedModel lm;
  lm.cfg = load_model_config(dir + "/config.json");
  lm.weights = init_weights(lm.cfg, 0);

  json manifest;
  try {
    manifest = json::parse(read_file(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("manifest.json: invalid JSON: ") + e.what());
  }
  const std::string blob = read_file(dir + "/weights.bin");

  size_t entry_i = 0;
  lm.weights.for_each([&](const std::string& name, Tensor& t) {
    if (entry_i >= manifest.size())
      throw std::runtime_error("checkpoint: manifest has too few entries (missing " + name + ")");
    const json& entry = manifest[entry_i++];
    if (entry.at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint: expected tensor \"" + name + "\", manifest has \"" +
                               entry.at("name").get<std::string>() + "\"");
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != t.shape())
      throw std::runtime_error("checkpoint: tensor \"" + name + "\" has shape " +
                               shape_str(shape) + ", model expects " + shape_str(t.shape()));
    const int64_t off = entry.at("byte_offset").get<int64_t>();
    if (off + t.numel() * 4 > static_cast<int64_t>(blob.size()))
      throw std::runtime_error("checkpoint: weights.bin too small for tensor \"" + name + "\"");
    for (int64_t i = 0; i < t.numel(); ++i) {
      float f;
      std::memcpy(&f, blob.data() + off + i * 4, 4);
      t.data()[static_cast<size_t>(i)] = static_cast<double>(f);
    }
  });
  if (entry_i != manifest.size())
    throw std::runtime_error("checkpoint: manifest has more entries than the model has tensors");
  return lm;
}

}  // namespace cmoe
