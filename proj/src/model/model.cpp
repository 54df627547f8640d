// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/model/model.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "feddat/autodiff/ops.hpp"
#include "feddat/common/hash.hpp"

namespace feddat::model {

namespace {

Tensor random_normal(ad::Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(ad::numel_of(shape));
  for (double& x : v) x = normal(rng, 0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

Tensor random_uniform(ad::Shape shape, double bound, Rng& rng) {
  std::vector<double> v(ad::numel_of(shape));
  for (double& x : v) x = uniform(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::relu ? ad::relu(x) : ad::gelu(x);
}

void require_width(const Tensor& h, std::size_t d, const char* op) {
  if (h.ndim() < 1 || h.shape().back() != d) {
    throw ad::DimensionError(fmt::format("{}: input width {} does not match adapter width {}", op,
                                         ad::shape_str(h.shape()), d));
  }
}

Tensor bottleneck(const Tensor& h, const AdapterSite& a, Activation act) {
  return ad::matmul(activate(ad::matmul(h, a.down), act), a.up);
}

}  // namespace

std::string_view to_string(PeftMode mode) {
  switch (mode) {
    case PeftMode::adapter: return "adapter";
    case PeftMode::feddat: return "feddat";
    case PeftMode::lora: return "lora";
    case PeftMode::prompt: return "prompt";
    case PeftMode::bias: return "bias";
    case PeftMode::head_only: return "head_only";
    case PeftMode::full: return "full";
  }
  return "?";
}

PeftMode parse_peft_mode(std::string_view text) {
  for (PeftMode m : {PeftMode::adapter, PeftMode::feddat, PeftMode::lora, PeftMode::prompt,
                     PeftMode::bias, PeftMode::head_only, PeftMode::full}) {
    if (to_string(m) == text) return m;
  }
  throw std::invalid_argument(fmt::format("unknown PEFT mode '{}'", text));
}

std::string_view to_string(Activation act) { return act == Activation::relu ? "relu" : "gelu"; }

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::relu;
  if (text == "gelu") return Activation::gelu;
  throw std::invalid_argument(fmt::format("unknown activation '{}'", text));
}

std::string_view to_string(Branch branch) {
  switch (branch) {
    case Branch::base: return "base";
    case Branch::shared: return "shared";
    case Branch::dat: return "dat";
    case Branch::local: return "local";
    case Branch::frozen: return "frozen";
  }
  return "?";
}

void BackboneConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ffn == 0 || n_vision_tokens == 0 ||
      vision_token_dim == 0 || n_text_tokens == 0 || vocab_size == 0) {
    throw std::invalid_argument("backbone: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument(
        fmt::format("backbone: d_model {} not divisible by n_heads {}", d_model, n_heads));
  }
  if (d_model < 2) throw std::invalid_argument("backbone: d_model must be >= 2 for layer norm");
}

void PeftConfig::validate(const BackboneConfig& backbone) const {
  if (uses_adapters() && (adapter_r == 0 || adapter_r >= backbone.d_model)) {
    throw std::invalid_argument(fmt::format("peft: adapter_r must satisfy 0 < r < d_model ({}), got {}",
                                            backbone.d_model, adapter_r));
  }
  if (mode == PeftMode::lora) {
    if (lora_r == 0 || lora_r > backbone.d_model) {
      throw std::invalid_argument("peft: lora_r must be in [1, d_model]");
    }
    if (!lora_query && !lora_value) {
      throw std::invalid_argument("peft: lora needs at least one of query/value targets");
    }
  }
  if (mode == PeftMode::prompt && n_prompt_tokens == 0) {
    throw std::invalid_argument("peft: prompt mode needs n_prompt_tokens >= 1");
  }
}

std::size_t scalar_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

ParamList snapshot(const ParamList& params) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.detach()});
  return out;
}

void copy_values(const ParamList& source, const ParamList& target) {
  if (source.size() != target.size()) {
    throw ad::DimensionError(fmt::format("parameter list size mismatch: {} vs {}", source.size(),
                                         target.size()));
  }
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (source[i].name != target[i].name) {
      throw ad::DimensionError(
          fmt::format("parameter name mismatch: '{}' vs '{}'", source[i].name, target[i].name));
    }
    Tensor dst = target[i].tensor;
    dst.assign(source[i].tensor);
  }
}

std::uint64_t fingerprint(const ParamList& params) {
  Fnv1a h;
  for (const auto& p : params) {
    h.update(p.name);
    h.update(p.tensor.data());
  }
  return h.digest();
}

// --- adapters -------------------------------------------------------------

AdapterParams AdapterParams::init(std::size_t n_sites, std::size_t d, std::size_t r, Rng& rng) {
  AdapterParams out;
  const double bound = std::sqrt(6.0 / static_cast<double>(d));
  for (std::size_t i = 0; i < n_sites; ++i) {
    out.sites.push_back({random_uniform({d, r}, bound, rng), Tensor({r, d}, 0.0)});
  }
  return out;
}

AdapterParams AdapterParams::clone() const {
  AdapterParams out;
  for (const auto& s : sites) out.sites.push_back({s.down.clone(), s.up.clone()});
  return out;
}

void AdapterParams::set_trainable(bool on) {
  for (auto& s : sites) {
    s.down.set_requires_grad(on);
    s.up.set_requires_grad(on);
  }
}

ParamList AdapterParams::named(std::string_view prefix) const {
  ParamList out;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    out.push_back({fmt::format("{}.block{}.down", prefix, i), sites[i].down});
    out.push_back({fmt::format("{}.block{}.up", prefix, i), sites[i].up});
  }
  return out;
}

Tensor adapter_forward(const Tensor& h, const AdapterSite& adapter, Activation act) {
  require_width(h, adapter.down.dim(0), "adapter_forward");
  return ad::add(h, bottleneck(h, adapter, act));
}

Tensor dat_forward(const Tensor& h, const AdapterSite& frozen, const AdapterSite& local,
                   Activation act) {
  require_width(h, frozen.down.dim(0), "dat_forward");
  if (frozen.down.shape() != local.down.shape() || frozen.up.shape() != local.up.shape()) {
    throw ad::DimensionError("dat_forward: frozen and local adapters differ in geometry");
  }
  // Branch sum first: equal branches then reduce exactly to a single adapter.
  return ad::add(h, ad::add(ad::scale(bottleneck(h, frozen, act), 0.5),
                            ad::scale(bottleneck(h, local, act), 0.5)));
}

// --- other PEFT modules ----------------------------------------------------

LoraParams LoraParams::init(std::size_t n_layers, std::size_t d, std::size_t r, bool query,
                            bool value, Rng& rng) {
  LoraParams out;
  out.rank = r;
  const double bound = 1.0 / std::sqrt(static_cast<double>(r));
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (query) out.query.push_back({Tensor({d, r}, 0.0), random_uniform({r, d}, bound, rng)});
    if (value) out.value.push_back({Tensor({d, r}, 0.0), random_uniform({r, d}, bound, rng)});
  }
  return out;
}

ParamList LoraParams::named() const {
  ParamList out;
  const std::size_t layers = std::max(query.size(), value.size());
  for (std::size_t l = 0; l < layers; ++l) {
    if (l < query.size()) {
      out.push_back({fmt::format("lora.block{}.query.b", l), query[l].b});
      out.push_back({fmt::format("lora.block{}.query.a", l), query[l].a});
    }
    if (l < value.size()) {
      out.push_back({fmt::format("lora.block{}.value.b", l), value[l].b});
      out.push_back({fmt::format("lora.block{}.value.a", l), value[l].a});
    }
  }
  return out;
}

Tensor lora_forward(const Tensor& x, const Tensor& w_frozen, const LoraSite& site,
                    std::size_t rank) {
  if (site.b.dim(0) != w_frozen.dim(0) || site.a.dim(1) != w_frozen.dim(1) ||
      site.b.dim(1) != rank || site.a.dim(0) != rank) {
    throw ad::DimensionError("lora_forward: low-rank factors do not match the frozen projection");
  }
  Tensor update = ad::matmul(ad::matmul(x, site.b), site.a);
  return ad::add(ad::matmul(x, w_frozen), ad::scale(update, 1.0 / static_cast<double>(rank)));
}

Tensor prompt_prepend(const Tensor& seq, const Tensor& prompt) {
  if (prompt.ndim() != 2 || prompt.dim(0) == 0) return seq;
  if (seq.ndim() == 2) return ad::concat({prompt, seq}, 0);
  const std::size_t batch = seq.dim(0);
  Tensor row = ad::reshape(prompt, {1, prompt.dim(0), prompt.dim(1)});
  Tensor stacked = ad::concat(std::vector<Tensor>(batch, row), 0);
  return ad::concat({stacked, seq}, 1);
}

// --- backbone --------------------------------------------------------------

Backbone Backbone::init(const BackboneConfig& config) {
  config.validate();
  Rng rng = stream(config.seed, "backbone");
  const std::size_t d = config.d_model;
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
  Backbone b;
  b.config = config;
  b.vision_proj = random_normal({config.vision_token_dim, d},
                                1.0 / std::sqrt(static_cast<double>(config.vision_token_dim)), rng);
  b.vision_bias = Tensor({d}, 0.0);
  b.token_embedding = random_normal({config.vocab_size, d}, 1.0, rng);
  b.vision_type = random_normal({d}, 0.5, rng);
  b.text_type = random_normal({d}, 0.5, rng);
  b.vision_pos = random_normal({config.n_vision_tokens, d}, 0.5, rng);
  b.text_pos = random_normal({config.n_text_tokens, d}, 0.5, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockWeights w;
    w.wq = random_normal({d, d}, inv_d, rng);
    w.wk = random_normal({d, d}, inv_d, rng);
    w.wv = random_normal({d, d}, inv_d, rng);
    w.wo = random_normal({d, d}, inv_d, rng);
    w.bq = Tensor({d}, 0.0);
    w.bk = Tensor({d}, 0.0);
    w.bv = Tensor({d}, 0.0);
    w.bo = Tensor({d}, 0.0);
    w.ln1_gain = Tensor({d}, 1.0);
    w.ln1_bias = Tensor({d}, 0.0);
    w.w1 = random_normal({d, config.d_ffn}, inv_d, rng);
    w.b1 = Tensor({config.d_ffn}, 0.0);
    w.w2 = random_normal({config.d_ffn, d}, 1.0 / std::sqrt(static_cast<double>(config.d_ffn)), rng);
    w.b2 = Tensor({d}, 0.0);
    w.ln2_gain = Tensor({d}, 1.0);
    w.ln2_bias = Tensor({d}, 0.0);
    b.blocks.push_back(std::move(w));
  }
  return b;
}

Backbone Backbone::clone() const {
  // Member-wise copy shares storage; rebind every tensor to a deep copy.
  Backbone out = *this;
  out.vision_proj = vision_proj.clone();
  out.vision_bias = vision_bias.clone();
  out.token_embedding = token_embedding.clone();
  out.vision_type = vision_type.clone();
  out.text_type = text_type.clone();
  out.vision_pos = vision_pos.clone();
  out.text_pos = text_pos.clone();
  for (auto& w : out.blocks) {
    for (Tensor* t : {&w.wq, &w.bq, &w.wk, &w.bk, &w.wv, &w.bv, &w.wo, &w.bo, &w.ln1_gain,
                      &w.ln1_bias, &w.w1, &w.b1, &w.w2, &w.b2, &w.ln2_gain, &w.ln2_bias}) {
      *t = t->clone();
    }
  }
  return out;
}

ParamList Backbone::named() const {
  ParamList out{{"backbone.vision_proj", vision_proj},   {"backbone.vision_bias", vision_bias},
                {"backbone.token_embedding", token_embedding},
                {"backbone.vision_type", vision_type},   {"backbone.text_type", text_type},
                {"backbone.vision_pos", vision_pos},     {"backbone.text_pos", text_pos}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const BlockWeights& w = blocks[l];
    const std::pair<const char*, const Tensor*> fields[] = {
        {"wq", &w.wq}, {"bq", &w.bq}, {"wk", &w.wk}, {"bk", &w.bk},
        {"wv", &w.wv}, {"bv", &w.bv}, {"wo", &w.wo}, {"bo", &w.bo},
        {"ln1_gain", &w.ln1_gain}, {"ln1_bias", &w.ln1_bias},
        {"w1", &w.w1}, {"b1", &w.b1}, {"w2", &w.w2}, {"b2", &w.b2},
        {"ln2_gain", &w.ln2_gain}, {"ln2_bias", &w.ln2_bias}};
    for (const auto& [name, t] : fields) {
      out.push_back({fmt::format("backbone.block{}.{}", l, name), *t});
    }
  }
  return out;
}

ParamList Backbone::named_biases() const {
  ParamList out{{"backbone.vision_bias", vision_bias}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const BlockWeights& w = blocks[l];
    const std::pair<const char*, const Tensor*> fields[] = {
        {"bq", &w.bq}, {"bk", &w.bk}, {"bv", &w.bv}, {"bo", &w.bo}, {"ln1_bias", &w.ln1_bias},
        {"b1", &w.b1}, {"b2", &w.b2}, {"ln2_bias", &w.ln2_bias}};
    for (const auto& [name, t] : fields) {
      out.push_back({fmt::format("backbone.block{}.{}", l, name), *t});
    }
  }
  return out;
}

std::uint64_t Backbone::fingerprint() const { return model::fingerprint(named()); }

ClientHead ClientHead::init(std::size_t d, std::size_t num_classes, Rng& rng) {
  if (num_classes == 0) throw std::invalid_argument("head: answer pool must be non-empty");
  const double bound = std::sqrt(6.0 / static_cast<double>(d + num_classes));
  return {random_uniform({d, num_classes}, bound, rng), Tensor({num_classes}, 0.0)};
}

ParamList ClientHead::named() const { return {{"head.weight", weight}, {"head.bias", bias}}; }

// --- full model ------------------------------------------------------------

Model::Model(const BackboneConfig& backbone, const PeftConfig& peft, std::size_t num_classes,
             Rng& rng)
    : backbone_(Backbone::init(backbone)), peft_(peft) {
  peft_.validate(backbone);
  head_ = ClientHead::init(backbone.d_model, num_classes, rng);
  const std::size_t d = backbone.d_model;
  switch (peft_.mode) {
    case PeftMode::adapter:
      shared_ = AdapterParams::init(backbone.n_layers, d, peft_.adapter_r, rng);
      break;
    case PeftMode::feddat: {
      shared_ = AdapterParams::init(backbone.n_layers, d, peft_.adapter_r, rng);
      DatModule dat{shared_->clone(), AdapterParams::init(backbone.n_layers, d, peft_.adapter_r, rng)};
      dat_ = std::move(dat);
      break;
    }
    case PeftMode::lora:
      lora_ = LoraParams::init(backbone.n_layers, d, peft_.lora_r, peft_.lora_query,
                               peft_.lora_value, rng);
      break;
    case PeftMode::prompt:
      prompt_ = random_normal({peft_.n_prompt_tokens, d}, 0.02, rng);
      break;
    case PeftMode::bias:
    case PeftMode::head_only:
    case PeftMode::full:
      break;
  }
  set_trainable_flags();
}

void Model::set_trainable_flags() {
  for (auto& p : backbone_.named()) p.tensor.set_requires_grad(peft_.mode == PeftMode::full);
  if (peft_.mode == PeftMode::bias) {
    for (auto& p : backbone_.named_biases()) p.tensor.set_requires_grad(true);
  }
  for (auto& p : head_.named()) p.tensor.set_requires_grad(true);
  if (shared_) shared_->set_trainable(true);
  if (dat_) {
    dat_->frozen.set_trainable(false);
    dat_->local.set_trainable(true);
  }
  if (lora_) {
    for (auto& p : lora_->named()) p.tensor.set_requires_grad(true);
  }
  if (prompt_) prompt_->set_requires_grad(true);
}

Branch Model::default_branch() const { return shared_ ? Branch::shared : Branch::base; }

ParamList Model::communicated() const {
  switch (peft_.mode) {
    case PeftMode::adapter:
    case PeftMode::feddat: return shared_->named("shared");
    case PeftMode::lora: return lora_->named();
    case PeftMode::prompt: return {{"prompt", *prompt_}};
    case PeftMode::bias: return backbone_.named_biases();
    case PeftMode::head_only: return {};
    case PeftMode::full: return backbone_.named();
  }
  return {};
}

ParamList Model::state() const {
  ParamList out = backbone_.named();
  if (shared_) {
    auto s = shared_->named("shared");
    out.insert(out.end(), s.begin(), s.end());
  }
  if (dat_) {
    auto f = dat_->frozen.named("dat.frozen");
    auto l = dat_->local.named("dat.local");
    out.insert(out.end(), f.begin(), f.end());
    out.insert(out.end(), l.begin(), l.end());
  }
  if (lora_) {
    auto l = lora_->named();
    out.insert(out.end(), l.begin(), l.end());
  }
  if (prompt_) out.push_back({"prompt", *prompt_});
  auto h = head_.named();
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

void Model::freeze_shared_copy() {
  if (!dat_ || !shared_) throw std::logic_error("freeze_shared_copy: model is not in feddat mode");
  for (std::size_t i = 0; i < shared_->sites.size(); ++i) {
    dat_->frozen.sites[i].down.assign(shared_->sites[i].down);
    dat_->frozen.sites[i].up.assign(shared_->sites[i].up);
  }
}

Tensor Model::embed(const Batch& batch) const {
  const BackboneConfig& cfg = backbone_.config;
  const std::size_t n = batch.size();
  if (batch.vision.shape() != ad::Shape{n, cfg.n_vision_tokens, cfg.vision_token_dim}) {
    throw ad::DimensionError(fmt::format("forward: vision input {} does not match [{}x{}x{}]",
                                         ad::shape_str(batch.vision.shape()), n,
                                         cfg.n_vision_tokens, cfg.vision_token_dim));
  }
  if (batch.question.size() != n * cfg.n_text_tokens) {
    throw ad::DimensionError("forward: question token count does not match batch size");
  }
  Tensor xv = ad::add(ad::matmul(batch.vision, backbone_.vision_proj), backbone_.vision_bias);
  xv = ad::add(xv, backbone_.vision_type);
  Tensor xt = ad::reshape(ad::embedding(backbone_.token_embedding, batch.question),
                          {n, cfg.n_text_tokens, cfg.d_model});
  xt = ad::add(xt, backbone_.text_type);
  if (cfg.use_positions) {
    xv = ad::add(xv, backbone_.vision_pos);
    xt = ad::add(xt, backbone_.text_pos);
  }
  Tensor x = ad::concat({xv, xt}, 1);
  if (prompt_) x = prompt_prepend(x, *prompt_);
  return x;
}

Tensor Model::block(const Tensor& x, std::size_t layer) const {
  const BlockWeights& w = backbone_.blocks[layer];
  const BackboneConfig& cfg = backbone_.config;
  auto project = [&](const Tensor& weight, const std::vector<LoraSite>* sites) {
    if (sites && layer < sites->size()) return lora_forward(x, weight, (*sites)[layer], lora_->rank);
    return ad::matmul(x, weight);
  };
  Tensor q = ad::add(project(w.wq, lora_ ? &lora_->query : nullptr), w.bq);
  Tensor k = ad::add(ad::matmul(x, w.wk), w.bk);
  Tensor v = ad::add(project(w.wv, lora_ ? &lora_->value : nullptr), w.bv);

  const std::size_t dh = cfg.d_model / cfg.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Tensor qh = ad::slice(q, 2, h * dh, dh);
    Tensor kh = ad::slice(k, 2, h * dh, dh);
    Tensor vh = ad::slice(v, 2, h * dh, dh);
    Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    heads.push_back(ad::matmul(ad::softmax(scores), vh));
  }
  Tensor attn = ad::add(ad::matmul(heads.size() == 1 ? heads[0] : ad::concat(heads, 2), w.wo), w.bo);
  Tensor x1 = ad::layer_norm(ad::add(x, attn), w.ln1_gain, w.ln1_bias);
  Tensor ffn = ad::add(ad::matmul(ad::gelu(ad::add(ad::matmul(x1, w.w1), w.b1)), w.w2), w.b2);
  return ad::layer_norm(ad::add(x1, ffn), w.ln2_gain, w.ln2_bias);
}

Tensor Model::inject(const Tensor& h, std::size_t layer, Branch branch) const {
  const Activation act = peft_.activation;
  auto need = [&](bool ok) {
    if (!ok) {
      throw std::logic_error(fmt::format("forward: branch '{}' unavailable in mode '{}'",
                                         to_string(branch), to_string(peft_.mode)));
    }
  };
  switch (branch) {
    case Branch::base: return h;
    case Branch::shared:
      need(shared_.has_value());
      return adapter_forward(h, shared_->sites[layer], act);
    case Branch::dat:
      need(dat_.has_value());
      return dat_forward(h, dat_->frozen.sites[layer], dat_->local.sites[layer], act);
    case Branch::local:
      need(dat_.has_value());
      return adapter_forward(h, dat_->local.sites[layer], act);
    case Branch::frozen:
      need(dat_.has_value());
      return adapter_forward(h, dat_->frozen.sites[layer], act);
  }
  return h;
}

Tensor Model::forward(const Batch& batch, Branch branch) const {
  Tensor x = embed(batch);
  for (std::size_t l = 0; l < backbone_.config.n_layers; ++l) x = inject(block(x, l), l, branch);
  Tensor pooled = ad::mean(x, 1);
  return ad::add(ad::matmul(pooled, head_.weight), head_.bias);
}

std::size_t communicated_count(const BackboneConfig& backbone, const PeftConfig& peft) {
  Rng rng(0);
  Model m(backbone, peft, 2, rng);
  return scalar_count(m.communicated());
}

}  // namespace feddat::model
