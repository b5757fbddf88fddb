#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sfuida/autograd.hpp"
#include "sfuida/core.hpp"

namespace sfuida::model {

using ag::Matrix;
using ag::Var;

enum class ParamGroup { Extractor, Encoder, Classifier, Context, Heads };
std::string_view to_string(ParamGroup g);

struct Parameter {
  std::string name;
  ParamGroup group;
  Var var;
};

// Deep copy of every trainable array, keyed by stable parameter name.
struct ParameterSnapshot {
  std::vector<std::pair<std::string, Matrix>> arrays;

  friend bool operator==(const ParameterSnapshot& a, const ParameterSnapshot& b);
};

// B sequences of L epochs, flattened to rows ordered (sequence, position).
// Each row is one epoch, channel-major: [C * S].
struct SequenceBatch {
  int batch = 0;
  int length = 0;
  int channels = 0;
  int samples = 0;
  Matrix data;

  static SequenceBatch from_sequences(std::span<const SleepSequence> seqs);
  // Reorders the epochs of every sequence back to front.
  SequenceBatch reversed() const;
};

// Composite sleep staging network: per-epoch feature extractor, temporal
// encoder, per-timestep classifier, autoregressive context model and K
// prediction heads. Tensors flow as row-major matrices with rows ordered
// (batch item, timestep).
class SscModel {
 public:
  virtual ~SscModel() = default;

  virtual std::unique_ptr<SscModel> clone() const = 0;
  virtual std::string architecture() const = 0;
  // key=value description sufficient to rebuild an identical architecture.
  virtual std::string config_text() const = 0;

  virtual int channels() const = 0;
  virtual int samples() const = 0;
  virtual int latent_dim() const = 0;
  virtual int context_dim() const = 0;
  virtual int num_heads() const = 0;

  // [B*L, C*S] -> [B*L, D_z]
  virtual Var extract(const SequenceBatch& batch) const = 0;
  // [B*L, D_z] -> contextualized [B*L, D_z]
  virtual Var encode(const Var& latents, int batch, int length) const = 0;
  // [B*L, D_z] -> [B*L, 5]
  virtual Var classify(const Var& encoded) const = 0;
  // Prefix [B*t, D_z] -> [B, D_c]; only the prefix is ever visible.
  virtual Var context(const Var& prefix, int batch, int t) const = 0;
  // Head k in [0, K): [B, D_c] -> [B, D_z]
  virtual Var predict(int head, const Var& context) const = 0;

  // Re-draws context model and prediction head weights.
  virtual void reset_context_and_heads(std::uint64_t seed) = 0;

  Var encode_latents(const SequenceBatch& batch) const;
  Var forward_classify(const SequenceBatch& batch) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter*> parameters_in(std::initializer_list<ParamGroup> groups);
  void fill_group(ParamGroup group, double value);
  void zero_grad();
  std::size_t parameter_count() const;

  ParameterSnapshot snapshot() const;
  void load(const ParameterSnapshot& snapshot);  // throws StructureMismatch

  // Mutation counters: how many optimizer steps and EMA merges touched the
  // parameters of this instance.
  std::uint64_t optimizer_steps() const { return optimizer_steps_; }
  std::uint64_t ema_updates() const { return ema_updates_; }
  void note_optimizer_step() { ++optimizer_steps_; }
  void note_ema_update() { ++ema_updates_; }

 protected:
  SscModel() = default;
  SscModel(const SscModel&) = default;
  SscModel& operator=(const SscModel&) = default;

  Var& add_parameter(std::string name, ParamGroup group, Matrix init);
  Var& param(std::size_t index) { return params_[index].var; }
  const Var& param(std::size_t index) const { return params_[index].var; }
  void deep_copy_parameters();

 private:
  std::vector<Parameter> params_;
  std::uint64_t optimizer_steps_ = 0;
  std::uint64_t ema_updates_ = 0;
};

// ---------------------------------------------------------------------------
// Reference architecture: conv extractor with per-item normalization,
// bidirectional GRU encoder, single-layer causal self-attention context model
// with learned positions, K affine heads.

struct ModelConfig {
  int channels = 1;
  int samples = 3000;
  int conv1_filters = 16;
  int conv1_kernel = 50;
  int conv1_stride = 6;
  int conv2_filters = 32;
  int conv2_kernel = 8;
  int conv2_stride = 4;
  int latent_dim = 64;   // D_z
  int hidden_dim = 32;   // GRU units per direction
  int context_dim = 64;  // D_c
  int ffn_dim = 64;
  int seq_len = 20;      // L
  int context_steps = 17;  // T
  std::uint64_t seed = 0;

  int num_heads() const { return seq_len - context_steps; }

  static ModelConfig reference();
  // Desk-scale preset used by the synthetic benchmark and timing runs.
  static ModelConfig tiny(int channels = 1, int samples = 3000);
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void validate_model_config(const ModelConfig& c);

class ReferenceSscModel final : public SscModel {
 public:
  explicit ReferenceSscModel(const ModelConfig& config);

  std::unique_ptr<SscModel> clone() const override;
  std::string architecture() const override { return "reference"; }
  std::string config_text() const override { return config_.to_text(); }

  int channels() const override { return config_.channels; }
  int samples() const override { return config_.samples; }
  int latent_dim() const override { return config_.latent_dim; }
  int context_dim() const override { return config_.context_dim; }
  int num_heads() const override { return config_.num_heads(); }
  const ModelConfig& config() const { return config_; }

  Var extract(const SequenceBatch& batch) const override;
  Var encode(const Var& latents, int batch, int length) const override;
  Var classify(const Var& encoded) const override;
  Var context(const Var& prefix, int batch, int t) const override;
  Var predict(int head, const Var& context) const override;
  void reset_context_and_heads(std::uint64_t seed) override;

 private:
  ReferenceSscModel(const ReferenceSscModel&) = default;
  void initialize(ParamGroup group, std::uint64_t seed);
  int conv1_out() const;
  int conv2_out() const;
  Var gru_direction(const Var& inputs, int batch, int length, bool forward, std::size_t first) const;

  ModelConfig config_;
  // Indices into parameters() for each named block.
  struct Slots {
    std::size_t conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
    std::size_t gru_fwd, gru_bwd;  // first of (w_in, b_in, w_h, b_h)
    std::size_t enc_w, enc_b;
    std::size_t cls_w, cls_b;
    std::size_t ctx_in_w, ctx_in_b, ctx_pos, ctx_q, ctx_k, ctx_v, ctx_o, ctx_f1_w, ctx_f1_b, ctx_f2_w, ctx_f2_b;
    std::size_t heads;  // first of K (w, b) pairs
  } slots_{};
};

std::unique_ptr<SscModel> make_model(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Named-array container: magic "SFUIDAC1", u32 entry count, then per entry
// u32 name length, name bytes, u8 dtype (1 = f64, 2 = u8), u32 ndim,
// u64 dims..., little-endian payload.

struct NamedArrayFile {
  std::vector<std::pair<std::string, Matrix>> arrays;
  std::map<std::string, std::string> text;  // stored as u8 arrays
};

void write_named_arrays(const std::filesystem::path& path, const NamedArrayFile& file);
NamedArrayFile read_named_arrays(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const SscModel& model);
std::unique_ptr<SscModel> load_checkpoint(const std::filesystem::path& path);

}  // namespace sfuida::model
