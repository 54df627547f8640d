// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "feddat/autodiff/tensor.hpp"
#include "feddat/common/rng.hpp"

namespace feddat::model {

using ad::Tensor;

enum class Activation { relu, gelu };

enum class PeftMode { adapter, feddat, lora, prompt, bias, head_only, full };

std::string_view to_string(PeftMode mode);
PeftMode parse_peft_mode(std::string_view text);
std::string_view to_string(Activation act);
Activation parse_activation(std::string_view text);

struct BackboneConfig {
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 64;
  std::size_t n_vision_tokens = 4;
  std::size_t vision_token_dim = 4;
  std::size_t n_text_tokens = 3;
  std::size_t vocab_size = 8;
  bool use_positions = true;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on inconsistent geometry.
  void validate() const;
  std::size_t sequence_length() const { return n_vision_tokens + n_text_tokens; }
};

struct PeftConfig {
  PeftMode mode = PeftMode::feddat;
  std::size_t adapter_r = 4;
  std::size_t lora_r = 4;
  bool lora_query = true;
  bool lora_value = true;
  std::size_t n_prompt_tokens = 4;
  Activation activation = Activation::relu;

  void validate(const BackboneConfig& backbone) const;
  bool uses_adapters() const { return mode == PeftMode::adapter || mode == PeftMode::feddat; }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

std::size_t scalar_count(const ParamList& params);
/// Deep copies, detached from any graph.
ParamList snapshot(const ParamList& params);
/// Copies values from `source` into `target` by position; names and shapes must agree.
void copy_values(const ParamList& source, const ParamList& target);
std::uint64_t fingerprint(const ParamList& params);

// --- adapters -------------------------------------------------------------

struct AdapterSite {
  Tensor down;  // [d, r]
  Tensor up;    // [r, d]
};

/// One bottleneck adapter per transformer block.
struct AdapterParams {
  std::vector<AdapterSite> sites;

  /// Kaiming-uniform down projection, zero up projection.
  static AdapterParams init(std::size_t n_sites, std::size_t d, std::size_t r, Rng& rng);
  AdapterParams clone() const;
  void set_trainable(bool on);
  ParamList named(std::string_view prefix) const;
  std::size_t rank() const { return sites.empty() ? 0 : sites.front().down.dim(1); }
};

/// h + act(h W_down) W_up
Tensor adapter_forward(const Tensor& h, const AdapterSite& adapter,
                       Activation act = Activation::relu);

/// Frozen shared copy plus strictly local adapter.
struct DatModule {
  AdapterParams frozen;
  AdapterParams local;
};

/// h + 1/2 act(h W_frozen_down) W_frozen_up + 1/2 act(h W_local_down) W_local_up
Tensor dat_forward(const Tensor& h, const AdapterSite& frozen, const AdapterSite& local,
                   Activation act = Activation::relu);

// --- other PEFT modules ----------------------------------------------------

struct LoraSite {
  Tensor b;  // [d, r], zero-initialized
  Tensor a;  // [r, d]
};

struct LoraParams {
  std::vector<LoraSite> query;  // empty when the target is disabled
  std::vector<LoraSite> value;
  std::size_t rank = 0;

  static LoraParams init(std::size_t n_layers, std::size_t d, std::size_t r, bool query,
                         bool value, Rng& rng);
  ParamList named() const;
};

/// x W + (1/r) (x B) A
Tensor lora_forward(const Tensor& x, const Tensor& w_frozen, const LoraSite& site,
                    std::size_t rank);

/// Prepends p learnable rows to a [L,d] or [B,L,d] sequence.
Tensor prompt_prepend(const Tensor& seq, const Tensor& prompt);

// --- backbone --------------------------------------------------------------

struct BlockWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;
};

/// Randomly initialized two-stream, single-fusion transformer encoder. Plays
/// the role of the pre-trained foundation model and stays frozen except in
/// bias/full modes.
struct Backbone {
  BackboneConfig config;
  Tensor vision_proj, vision_bias;
  Tensor token_embedding;
  Tensor vision_type, text_type;
  Tensor vision_pos, text_pos;
  std::vector<BlockWeights> blocks;

  static Backbone init(const BackboneConfig& config);
  Backbone clone() const;
  ParamList named() const;
  /// Every bias vector, including layer-norm shifts.
  ParamList named_biases() const;
  std::uint64_t fingerprint() const;
};

struct ClientHead {
  Tensor weight;  // [d, C]
  Tensor bias;    // [C]

  static ClientHead init(std::size_t d, std::size_t num_classes, Rng& rng);
  std::size_t num_classes() const { return bias.numel(); }
  ParamList named() const;
};

// --- full model ------------------------------------------------------------

struct Batch {
  Tensor vision;              // [B, n_vision_tokens, vision_token_dim]
  std::vector<int> question;  // B * n_text_tokens token ids
  std::vector<int> labels;    // B local answer indices
  std::size_t size() const { return labels.size(); }
};

/// Which adapter injection a forward pass uses.
enum class Branch {
  base,    // no adapter
  shared,  // A_s
  dat,     // frozen A_s copy + A_c, averaged
  local,   // A_c alone
  frozen,  // frozen A_s copy alone
};

std::string_view to_string(Branch branch);

class Model {
 public:
  /// The backbone comes from `backbone.seed`; everything else draws from `rng`.
  Model(const BackboneConfig& backbone, const PeftConfig& peft, std::size_t num_classes,
        Rng& rng);

  /// Logits [B, C].
  Tensor forward(const Batch& batch, Branch branch) const;
  Branch default_branch() const;

  const BackboneConfig& backbone_config() const { return backbone_.config; }
  const PeftConfig& peft_config() const { return peft_; }
  std::size_t num_classes() const { return head_.num_classes(); }

  /// Parameters exchanged with the server in this mode. Never includes the
  /// head, the local adapter or the frozen copy.
  ParamList communicated() const;
  /// Every tensor a client keeps across rounds (for checkpoints).
  ParamList state() const;
  /// Refreshes the frozen copy from the current shared adapter (feddat only).
  void freeze_shared_copy();

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  ClientHead& head() { return head_; }
  const ClientHead& head() const { return head_; }
  std::optional<AdapterParams>& shared() { return shared_; }
  const std::optional<AdapterParams>& shared() const { return shared_; }
  std::optional<DatModule>& dat() { return dat_; }
  const std::optional<DatModule>& dat() const { return dat_; }
  const std::optional<LoraParams>& lora() const { return lora_; }
  const std::optional<Tensor>& prompt() const { return prompt_; }

 private:
  Tensor embed(const Batch& batch) const;
  Tensor block(const Tensor& x, std::size_t layer) const;
  Tensor inject(const Tensor& h, std::size_t layer, Branch branch) const;
  void set_trainable_flags();

  Backbone backbone_;
  PeftConfig peft_;
  ClientHead head_;
  std::optional<AdapterParams> shared_;
  std::optional<DatModule> dat_;
  std::optional<LoraParams> lora_;
  std::optional<Tensor> prompt_;
};

/// Communicated parameter list of a freshly built model in the given mode.
std::size_t communicated_count(const BackboneConfig& backbone, const PeftConfig& peft);

}  // namespace feddat::model
