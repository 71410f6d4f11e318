#include "mmgen/config.hpp"

#include "mmgen/error.hpp"

#include <fstream>
#include <set>
#include <string>

namespace mmgen {

using nlohmann::json;

namespace {

// Reads keys from a JSON object into fields, tracking which were consumed so
// leftovers can be reported.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(ErrorCode::kConfig, "expected a JSON object", where_.empty() ? "config" : where_);
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw Error(ErrorCode::kConfig, "unknown config key", path(key.c_str()));
    }
  }

  template <typename U>
  void get(const char* key, U& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<U>();
    } catch (const json::exception&) {
      throw Error(ErrorCode::kConfig, "config value has the wrong type", path(key));
    }
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json optimizer_to_json(const OptimizerConfig& c) {
  return {{"kind", std::string(optimizer_kind_name(c.kind))},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"grad_clip", c.grad_clip}};
}

OptimizerConfig optimizer_from_json(const json& j, const std::string& where, OptimizerConfig c) {
  Fields f(j, where);
  std::string kind(optimizer_kind_name(c.kind));
  f.get("kind", kind);
  try {
    c.kind = parse_optimizer_kind(kind);
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.message(), f.path("kind"));
  }
  f.get("learning_rate", c.learning_rate);
  f.get("momentum", c.momentum);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("epsilon", c.epsilon);
  f.get("grad_clip", c.grad_clip);
  return c;
}

json sampling_to_json(const SamplingParams& s) {
  return {{"temperature", s.temperature}, {"top_k", s.top_k}, {"top_p", s.top_p}};
}

SamplingParams sampling_from_json(const json& j, const std::string& where, SamplingParams s) {
  Fields f(j, where);
  f.get("temperature", s.temperature);
  f.get("top_k", s.top_k);
  f.get("top_p", s.top_p);
  return s;
}

void check(bool ok, const char* message, const char* context) {
  if (!ok) throw Error(ErrorCode::kConfig, message, context);
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
  // splitmix64 finalizer over (base, stream)
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

json vq_config_to_json(const VqConfig& c) {
  return {{"codebook_size", c.codebook_size},
          {"latent_dim", c.latent_dim},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"downsample", c.downsample},
          {"hidden_channels", c.hidden_channels},
          {"commitment_weight", c.commitment_weight},
          {"ema_decay", c.ema_decay},
          {"learning_rate", c.learning_rate},
          {"dead_code_threshold", c.dead_code_threshold},
          {"seed", c.seed}};
}

VqConfig vq_config_from_json(const json& j) {
  VqConfig c;
  Fields f(j, "vq");
  f.get("codebook_size", c.codebook_size);
  f.get("latent_dim", c.latent_dim);
  f.get("image_height", c.image_height);
  f.get("image_width", c.image_width);
  f.get("downsample", c.downsample);
  f.get("hidden_channels", c.hidden_channels);
  f.get("commitment_weight", c.commitment_weight);
  f.get("ema_decay", c.ema_decay);
  f.get("learning_rate", c.learning_rate);
  f.get("dead_code_threshold", c.dead_code_threshold);
  f.get("seed", c.seed);
  return c;
}

json model_config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},     {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  Fields f(j, "model");
  f.get("d_model", c.d_model);
  f.get("n_layers", c.n_layers);
  f.get("n_heads", c.n_heads);
  f.get("d_ff", c.d_ff);
  f.get("max_seq_len", c.max_seq_len);
  f.get("vocab_size", c.vocab_size);
  f.get("seed", c.seed);
  return c;
}

json layout_to_json(const VocabLayout& l) {
  return {{"text_size", l.text_size},
          {"image_size", l.image_size},
          {"image_block_length", l.image_block_length}};
}

VocabLayout layout_from_json(const json& j) {
  VocabLayout l;
  Fields f(j, "layout");
  f.get("text_size", l.text_size);
  f.get("image_size", l.image_size);
  f.get("image_block_length", l.image_block_length);
  l.validate();
  return l;
}

void RunConfig::apply_seed(uint64_t base) {
  seed = base;
  vq.seed = derive_seed(base, 1);
  model.seed = derive_seed(base, 2);
  finetune.seed = derive_seed(base, 3);
  generation.seed = derive_seed(base, 4);
}

void RunConfig::finalize() {
  try {
    vq.validate();
    const VocabLayout l = layout();
    l.validate();
    if (model.vocab_size == 0) model.vocab_size = l.total_size();
    check(model.vocab_size == l.total_size(), "model vocab_size disagrees with the vocabulary layout",
          "model.vocab_size");
    model.validate(l.image_block_length);
    generation.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfig) throw;
    throw Error(ErrorCode::kConfig, e.message(), e.context());
  }
  check(vq_train.steps >= 0, "must be non-negative", "vq_train.steps");
  check(vq_train.batch_size >= 1, "must be positive", "vq_train.batch_size");
  check(pretrain.epochs >= 0, "must be non-negative", "pretrain.epochs");
  check(pretrain.batch_size >= 1, "must be positive", "pretrain.batch_size");
  check(pretrain.image_loss_weight >= 0.0, "must be non-negative", "pretrain.image_loss_weight");
  check(pretrain.optimizer.learning_rate > 0.0, "must be positive", "pretrain.optimizer.learning_rate");
  check(finetune.epochs >= 0, "must be non-negative", "finetune.epochs");
  check(finetune.batch_size >= 1, "must be positive", "finetune.batch_size");
  check(finetune.max_steps >= 0, "must be non-negative", "finetune.max_steps");
  check(finetune.optimizer.learning_rate > 0.0, "must be positive", "finetune.optimizer.learning_rate");
  check(eval.heldout_count >= 1, "must be positive", "eval.heldout_count");
  check(eval.prompts >= 1, "must be positive", "eval.prompts");
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Fields f(j, "");
  uint64_t seed = 0;
  f.get("seed", seed);
  f.get("text_size", c.text_size);
  if (const json* s = f.sub("vq")) c.vq = vq_config_from_json(*s);
  if (const json* s = f.sub("vq_train")) {
    Fields g(*s, "vq_train");
    g.get("steps", c.vq_train.steps);
    g.get("batch_size", c.vq_train.batch_size);
  }
  if (const json* s = f.sub("model")) c.model = model_config_from_json(*s);
  if (const json* s = f.sub("pretrain")) {
    Fields g(*s, "pretrain");
    if (const json* o = g.sub("optimizer")) {
      c.pretrain.optimizer = optimizer_from_json(*o, "pretrain.optimizer", c.pretrain.optimizer);
    }
    g.get("epochs", c.pretrain.epochs);
    g.get("batch_size", c.pretrain.batch_size);
    g.get("image_loss_weight", c.pretrain.image_loss_weight);
  }
  if (const json* s = f.sub("finetune")) {
    Fields g(*s, "finetune");
    if (const json* o = g.sub("optimizer")) {
      c.finetune.optimizer = optimizer_from_json(*o, "finetune.optimizer", c.finetune.optimizer);
    }
    g.get("epochs", c.finetune.epochs);
    g.get("batch_size", c.finetune.batch_size);
    g.get("max_steps", c.finetune.max_steps);
    g.get("train_sentinel_rows", c.finetune.train_sentinel_rows);
  }
  if (const json* s = f.sub("generation")) {
    Fields g(*s, "generation");
    if (const json* t = g.sub("text")) c.generation.text = sampling_from_json(*t, "generation.text", c.generation.text);
    if (const json* t = g.sub("image")) {
      c.generation.image = sampling_from_json(*t, "generation.image", c.generation.image);
    }
    g.get("max_tokens", c.generation.max_tokens);
    g.get("max_images", c.generation.max_images);
  }
  if (const json* s = f.sub("eval")) {
    Fields g(*s, "eval");
    g.get("heldout_count", c.eval.heldout_count);
    g.get("heldout_seed", c.eval.heldout_seed);
    g.get("prompts", c.eval.prompts);
  }
  c.apply_seed(seed);
  c.finalize();
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json vq = vq_config_to_json(c.vq);
  vq.erase("seed");
  json model = model_config_to_json(c.model);
  model.erase("seed");
  return {{"seed", c.seed},
          {"text_size", c.text_size},
          {"vq", vq},
          {"vq_train", {{"steps", c.vq_train.steps}, {"batch_size", c.vq_train.batch_size}}},
          {"model", model},
          {"pretrain",
           {{"optimizer", optimizer_to_json(c.pretrain.optimizer)},
            {"epochs", c.pretrain.epochs},
            {"batch_size", c.pretrain.batch_size},
            {"image_loss_weight", c.pretrain.image_loss_weight}}},
          {"finetune",
           {{"optimizer", optimizer_to_json(c.finetune.optimizer)},
            {"epochs", c.finetune.epochs},
            {"batch_size", c.finetune.batch_size},
            {"max_steps", c.finetune.max_steps},
            {"train_sentinel_rows", c.finetune.train_sentinel_rows}}},
          {"generation",
           {{"text", sampling_to_json(c.generation.text)},
            {"image", sampling_to_json(c.generation.image)},
            {"max_tokens", c.generation.max_tokens},
            {"max_images", c.generation.max_images}}},
          {"eval",
           {{"heldout_count", c.eval.heldout_count},
            {"heldout_seed", c.eval.heldout_seed},
            {"prompts", c.eval.prompts}}}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config", path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, "config is not valid JSON", path.string());
  }
  return run_config_from_json(j);
}

}  // namespace mmgen
