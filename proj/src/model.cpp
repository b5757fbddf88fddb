#include "sfuida/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "sfuida/dataio.hpp"

namespace sfuida::model {

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Extractor: return "extractor";
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::Classifier: return "classifier";
    case ParamGroup::Context: return "context";
    case ParamGroup::Heads: return "heads";
  }
  return "?";
}

bool operator==(const ParameterSnapshot& a, const ParameterSnapshot& b) {
  if (a.arrays.size() != b.arrays.size()) return false;
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    if (a.arrays[i].first != b.arrays[i].first) return false;
    const Matrix& x = a.arrays[i].second;
    const Matrix& y = b.arrays[i].second;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

SequenceBatch SequenceBatch::from_sequences(std::span<const SleepSequence> seqs) {
  SequenceBatch b;
  if (seqs.empty()) throw Error(ErrorCode::ShapeMismatch, "empty sequence batch");
  b.batch = static_cast<int>(seqs.size());
  b.length = static_cast<int>(seqs.front().length());
  if (b.length == 0) throw Error(ErrorCode::ShapeMismatch, "zero-length sequence");
  b.channels = seqs.front().epochs.front()->channels();
  b.samples = seqs.front().epochs.front()->samples();
  const int width = b.channels * b.samples;
  b.data.resize(static_cast<Eigen::Index>(b.batch) * b.length, width);
  Eigen::Index row = 0;
  for (const auto& seq : seqs) {
    if (static_cast<int>(seq.length()) != b.length) {
      throw Error(ErrorCode::ShapeMismatch, "sequences in a batch must share length L");
    }
    for (const auto& e : seq.epochs) {
      if (e->channels() != b.channels || e->samples() != b.samples) {
        throw Error(ErrorCode::ShapeMismatch, "epoch shape differs within batch");
      }
      b.data.row(row++) = Eigen::Map<const Eigen::RowVectorXf>(e->data().data(), width).cast<double>();
    }
  }
  return b;
}

SequenceBatch SequenceBatch::reversed() const {
  SequenceBatch r = *this;
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < length; ++t) {
      r.data.row(static_cast<Eigen::Index>(b) * length + t) =
          data.row(static_cast<Eigen::Index>(b) * length + (length - 1 - t));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

Var SscModel::encode_latents(const SequenceBatch& batch) const {
  return encode(extract(batch), batch.batch, batch.length);
}

Var SscModel::forward_classify(const SequenceBatch& batch) const { return classify(encode_latents(batch)); }

std::vector<Parameter*> SscModel::parameters_in(std::initializer_list<ParamGroup> groups) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    for (auto g : groups) {
      if (p.group == g) {
        out.push_back(&p);
        break;
      }
    }
  }
  return out;
}

void SscModel::fill_group(ParamGroup group, double value) {
  for (auto& p : params_) {
    if (p.group == group) p.var.mutable_value().setConstant(value);
  }
}

void SscModel::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

std::size_t SscModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

ParameterSnapshot SscModel::snapshot() const {
  ParameterSnapshot s;
  s.arrays.reserve(params_.size());
  for (const auto& p : params_) s.arrays.emplace_back(p.name, p.var.value());
  return s;
}

void SscModel::load(const ParameterSnapshot& snapshot) {
  if (snapshot.arrays.size() != params_.size()) {
    throw Error(ErrorCode::StructureMismatch, "snapshot holds " + std::to_string(snapshot.arrays.size()) +
                                                  " arrays, model has " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, value] = snapshot.arrays[i];
    const Matrix& current = params_[i].var.value();
    if (name != params_[i].name || value.rows() != current.rows() || value.cols() != current.cols()) {
      throw Error(ErrorCode::StructureMismatch, "snapshot entry '" + name + "' does not match '" +
                                                    params_[i].name + "'");
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var.mutable_value() = snapshot.arrays[i].second;
}

Var& SscModel::add_parameter(std::string name, ParamGroup group, Matrix init) {
  params_.push_back({std::move(name), group, Var(std::move(init), true)});
  return params_.back().var;
}

void SscModel::deep_copy_parameters() {
  for (auto& p : params_) p.var = Var(Matrix(p.var.value()), true);
  optimizer_steps_ = 0;
  ema_updates_ = 0;
}

// ---------------------------------------------------------------------------

ModelConfig ModelConfig::reference() { return {}; }

ModelConfig ModelConfig::tiny(int channels, int samples) {
  ModelConfig c;
  c.channels = channels;
  c.samples = samples;
  c.conv1_filters = 8;
  c.conv1_kernel = 32;
  c.conv1_stride = 8;
  c.conv2_filters = 16;
  c.conv2_kernel = 8;
  c.conv2_stride = 4;
  c.latent_dim = 16;
  c.hidden_dim = 16;
  c.context_dim = 16;
  c.ffn_dim = 32;
  return c;
}

std::string ModelConfig::to_text() const {
  std::ostringstream s;
  s << "architecture=reference\n"
    << "channels=" << channels << "\nsamples=" << samples << "\nconv1_filters=" << conv1_filters
    << "\nconv1_kernel=" << conv1_kernel << "\nconv1_stride=" << conv1_stride << "\nconv2_filters=" << conv2_filters
    << "\nconv2_kernel=" << conv2_kernel << "\nconv2_stride=" << conv2_stride << "\nlatent_dim=" << latent_dim
    << "\nhidden_dim=" << hidden_dim << "\ncontext_dim=" << context_dim << "\nffn_dim=" << ffn_dim
    << "\nseq_len=" << seq_len << "\ncontext_steps=" << context_steps << "\nseed=" << seed << '\n';
  return s.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    auto as_int = [&] { return std::stoi(value); };
    if (key == "architecture") {
      if (value != "reference") throw Error(ErrorCode::StructureMismatch, "unknown architecture " + value);
    } else if (key == "channels") c.channels = as_int();
    else if (key == "samples") c.samples = as_int();
    else if (key == "conv1_filters") c.conv1_filters = as_int();
    else if (key == "conv1_kernel") c.conv1_kernel = as_int();
    else if (key == "conv1_stride") c.conv1_stride = as_int();
    else if (key == "conv2_filters") c.conv2_filters = as_int();
    else if (key == "conv2_kernel") c.conv2_kernel = as_int();
    else if (key == "conv2_stride") c.conv2_stride = as_int();
    else if (key == "latent_dim") c.latent_dim = as_int();
    else if (key == "hidden_dim") c.hidden_dim = as_int();
    else if (key == "context_dim") c.context_dim = as_int();
    else if (key == "ffn_dim") c.ffn_dim = as_int();
    else if (key == "seq_len") c.seq_len = as_int();
    else if (key == "context_steps") c.context_steps = as_int();
    else if (key == "seed") c.seed = std::stoull(value);
  }
  return c;
}

void validate_model_config(const ModelConfig& c) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, "model: " + what); };
  if (c.channels < 1 || c.samples < 1) fail("channels and samples must be positive");
  if (c.context_steps <= 1 || c.context_steps >= c.seq_len) fail("1 < context_steps < seq_len");
  if (c.conv1_kernel > c.samples) fail("conv1 kernel longer than an epoch");
  const int p1 = (c.samples - c.conv1_kernel) / c.conv1_stride + 1;
  if (c.conv2_kernel > p1) fail("conv2 kernel longer than conv1 output");
  if (c.latent_dim < 1 || c.hidden_dim < 1 || c.context_dim < 1 || c.ffn_dim < 1) fail("widths must be positive");
  if (c.conv1_filters < 1 || c.conv2_filters < 1 || c.conv1_stride < 1 || c.conv2_stride < 1) {
    fail("conv geometry must be positive");
  }
}

// ---------------------------------------------------------------------------

namespace {
constexpr double kNormEps = 1e-5;

Matrix zeros(Eigen::Index r, Eigen::Index c) { return Matrix::Zero(r, c); }

std::vector<Eigen::Index> iota_rows(Eigen::Index start, Eigen::Index step, Eigen::Index count) {
  std::vector<Eigen::Index> v(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) v[static_cast<std::size_t>(i)] = start + i * step;
  return v;
}
}  // namespace

ReferenceSscModel::ReferenceSscModel(const ModelConfig& config) : config_(config) {
  validate_model_config(config_);
  const auto& c = config_;
  const int h = c.hidden_dim;
  auto& s = slots_;
  auto next = [this] { return parameters().size(); };

  s.conv1_w = next();
  add_parameter("extractor.conv1.weight", ParamGroup::Extractor, zeros(c.conv1_filters, c.channels * c.conv1_kernel));
  s.conv1_b = next();
  add_parameter("extractor.conv1.bias", ParamGroup::Extractor, zeros(1, c.conv1_filters));
  s.conv2_w = next();
  add_parameter("extractor.conv2.weight", ParamGroup::Extractor, zeros(c.conv2_filters, c.conv1_filters * c.conv2_kernel));
  s.conv2_b = next();
  add_parameter("extractor.conv2.bias", ParamGroup::Extractor, zeros(1, c.conv2_filters));
  s.proj_w = next();
  add_parameter("extractor.proj.weight", ParamGroup::Extractor, zeros(c.conv2_filters, c.latent_dim));
  s.proj_b = next();
  add_parameter("extractor.proj.bias", ParamGroup::Extractor, zeros(1, c.latent_dim));

  for (const char* dir : {"fwd", "bwd"}) {
    (std::string(dir) == "fwd" ? s.gru_fwd : s.gru_bwd) = next();
    const std::string prefix = std::string("encoder.gru_") + dir;
    add_parameter(prefix + ".w_in", ParamGroup::Encoder, zeros(c.latent_dim, 3 * h));
    add_parameter(prefix + ".b_in", ParamGroup::Encoder, zeros(1, 3 * h));
    add_parameter(prefix + ".w_h", ParamGroup::Encoder, zeros(h, 3 * h));
    add_parameter(prefix + ".b_h", ParamGroup::Encoder, zeros(1, 3 * h));
  }
  s.enc_w = next();
  add_parameter("encoder.out.weight", ParamGroup::Encoder, zeros(2 * h, c.latent_dim));
  s.enc_b = next();
  add_parameter("encoder.out.bias", ParamGroup::Encoder, zeros(1, c.latent_dim));

  s.cls_w = next();
  add_parameter("classifier.weight", ParamGroup::Classifier, zeros(c.latent_dim, kNumStages));
  s.cls_b = next();
  add_parameter("classifier.bias", ParamGroup::Classifier, zeros(1, kNumStages));

  const int d = c.context_dim;
  s.ctx_in_w = next();
  add_parameter("context.in.weight", ParamGroup::Context, zeros(c.latent_dim, d));
  s.ctx_in_b = next();
  add_parameter("context.in.bias", ParamGroup::Context, zeros(1, d));
  s.ctx_pos = next();
  add_parameter("context.position", ParamGroup::Context, zeros(c.seq_len, d));
  s.ctx_q = next();
  add_parameter("context.attn.query", ParamGroup::Context, zeros(d, d));
  s.ctx_k = next();
  add_parameter("context.attn.key", ParamGroup::Context, zeros(d, d));
  s.ctx_v = next();
  add_parameter("context.attn.value", ParamGroup::Context, zeros(d, d));
  s.ctx_o = next();
  add_parameter("context.attn.out", ParamGroup::Context, zeros(d, d));
  s.ctx_f1_w = next();
  add_parameter("context.ffn1.weight", ParamGroup::Context, zeros(d, c.ffn_dim));
  s.ctx_f1_b = next();
  add_parameter("context.ffn1.bias", ParamGroup::Context, zeros(1, c.ffn_dim));
  s.ctx_f2_w = next();
  add_parameter("context.ffn2.weight", ParamGroup::Context, zeros(c.ffn_dim, d));
  s.ctx_f2_b = next();
  add_parameter("context.ffn2.bias", ParamGroup::Context, zeros(1, d));

  s.heads = next();
  for (int k = 0; k < c.num_heads(); ++k) {
    const std::string prefix = "heads." + std::to_string(k);
    add_parameter(prefix + ".weight", ParamGroup::Heads, zeros(d, c.latent_dim));
    add_parameter(prefix + ".bias", ParamGroup::Heads, zeros(1, c.latent_dim));
  }

  for (auto g : {ParamGroup::Extractor, ParamGroup::Encoder, ParamGroup::Classifier, ParamGroup::Context,
                 ParamGroup::Heads}) {
    initialize(g, derive_seed(c.seed, to_string(g)));
  }
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the row count of a
// weight, or of the matching weight for a bias.
void ReferenceSscModel::initialize(ParamGroup group, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Eigen::Index fan_in = 1;
  for (auto& p : parameters()) {
    if (p.group != group) continue;
    Matrix& m = p.var.mutable_value();
    const bool is_bias = m.rows() == 1 && p.name.find("bias") != std::string::npos;
    const bool is_conv = p.name.find("conv") != std::string::npos;
    if (!is_bias) fan_in = is_conv ? m.cols() : m.rows();
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    if (p.name == "context.position") bound = 0.1;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bound * unit(rng);
  }
}

void ReferenceSscModel::reset_context_and_heads(std::uint64_t seed) {
  initialize(ParamGroup::Context, derive_seed(seed, "context"));
  initialize(ParamGroup::Heads, derive_seed(seed, "heads"));
}

std::unique_ptr<SscModel> ReferenceSscModel::clone() const {
  auto copy = std::unique_ptr<ReferenceSscModel>(new ReferenceSscModel(*this));
  copy->deep_copy_parameters();
  return copy;
}

int ReferenceSscModel::conv1_out() const {
  return (config_.samples - config_.conv1_kernel) / config_.conv1_stride + 1;
}

int ReferenceSscModel::conv2_out() const {
  return (conv1_out() - config_.conv2_kernel) / config_.conv2_stride + 1;
}

Var ReferenceSscModel::extract(const SequenceBatch& batch) const {
  const auto& c = config_;
  if (batch.channels != c.channels || batch.samples != c.samples) {
    throw Error(ErrorCode::ShapeMismatch, "batch epochs are " + std::to_string(batch.channels) + "x" +
                                              std::to_string(batch.samples) + ", model expects " +
                                              std::to_string(c.channels) + "x" + std::to_string(c.samples));
  }
  const Eigen::Index n = batch.data.rows();
  // Per epoch-channel standardization, then per-item layer normalization
  // after the first convolution. Nothing mixes information across items.
  Var x = ag::constant(batch.data);
  x = ag::reshape(ag::normalize_rows(ag::reshape(x, n * c.channels, c.samples), kNormEps), n,
                  static_cast<Eigen::Index>(c.channels) * c.samples);
  Var h = ag::conv1d(x, param(slots_.conv1_w), param(slots_.conv1_b), c.channels, c.conv1_kernel, c.conv1_stride);
  h = ag::relu(ag::normalize_rows(h, kNormEps));
  h = ag::relu(ag::conv1d(h, param(slots_.conv2_w), param(slots_.conv2_b), c.conv1_filters, c.conv2_kernel,
                          c.conv2_stride));
  h = ag::reshape(ag::row_mean(ag::reshape(h, n * c.conv2_filters, conv2_out())), n, c.conv2_filters);
  return ag::affine(h, param(slots_.proj_w), param(slots_.proj_b));
}

// PyTorch-style GRU cell over one direction. Returns hidden states with rows
// ordered (batch item, timestep).
Var ReferenceSscModel::gru_direction(const Var& inputs, int batch, int length, bool forward,
                                     std::size_t first) const {
  const int h = config_.hidden_dim;
  const Var gates_in = ag::affine(inputs, param(first), param(first + 1));  // [B*L, 3H]
  const Var& w_h = param(first + 2);
  const Var& b_h = param(first + 3);
  Var state = ag::constant(Matrix::Zero(batch, h));
  std::vector<Var> steps(static_cast<std::size_t>(length));
  for (int step = 0; step < length; ++step) {
    const int t = forward ? step : length - 1 - step;
    const auto rows = iota_rows(t, length, batch);
    const Var x = ag::gather_rows(gates_in, rows);
    const Var hh = ag::affine(state, w_h, b_h);
    const Var r = ag::sigmoid(ag::add(ag::slice_cols(x, 0, h), ag::slice_cols(hh, 0, h)));
    const Var z = ag::sigmoid(ag::add(ag::slice_cols(x, h, h), ag::slice_cols(hh, h, h)));
    const Var cand = ag::tanh(ag::add(ag::slice_cols(x, 2 * h, h), ag::mul(r, ag::slice_cols(hh, 2 * h, h))));
    state = ag::add(cand, ag::mul(z, ag::sub(state, cand)));
    steps[static_cast<std::size_t>(t)] = state;
  }
  // steps stacked as (t, b); reorder to (b, t)
  const Var stacked = ag::concat_rows(steps);
  std::vector<Eigen::Index> order;
  order.reserve(static_cast<std::size_t>(batch) * length);
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < length; ++t) order.push_back(static_cast<Eigen::Index>(t) * batch + b);
  }
  return ag::gather_rows(stacked, order);
}

Var ReferenceSscModel::encode(const Var& latents, int batch, int length) const {
  if (latents.rows() != static_cast<Eigen::Index>(batch) * length || latents.cols() != config_.latent_dim) {
    throw Error(ErrorCode::ShapeMismatch, "encode: latents must be [B*L, D_z]");
  }
  const Var fwd = gru_direction(latents, batch, length, true, slots_.gru_fwd);
  const Var bwd = gru_direction(latents, batch, length, false, slots_.gru_bwd);
  const std::vector<Var> both{fwd, bwd};
  const Var mixed = ag::affine(ag::concat_cols(both), param(slots_.enc_w), param(slots_.enc_b));
  return ag::add(latents, mixed);
}

Var ReferenceSscModel::classify(const Var& encoded) const {
  if (encoded.cols() != config_.latent_dim) throw Error(ErrorCode::ShapeMismatch, "classify: width != D_z");
  return ag::affine(encoded, param(slots_.cls_w), param(slots_.cls_b));
}

Var ReferenceSscModel::context(const Var& prefix, int batch, int t) const {
  if (t < 1 || t >= config_.seq_len) throw Error(ErrorCode::ShapeMismatch, "context: need 1 <= t < L");
  if (prefix.rows() != static_cast<Eigen::Index>(batch) * t || prefix.cols() != config_.latent_dim) {
    throw Error(ErrorCode::ShapeMismatch, "context: prefix must be [B*t, D_z]");
  }
  std::vector<Eigen::Index> positions;
  positions.reserve(static_cast<std::size_t>(batch) * t);
  for (int b = 0; b < batch; ++b) {
    for (int s = 0; s < t; ++s) positions.push_back(s);
  }
  const Var h = ag::add(ag::affine(prefix, param(slots_.ctx_in_w), param(slots_.ctx_in_b)),
                        ag::gather_rows(param(slots_.ctx_pos), positions));
  // Under a causal mask the last position attends to the whole prefix, so
  // only its query is needed for the context vector.
  const Var last = ag::gather_rows(h, iota_rows(t - 1, t, batch));
  const Var q = ag::matmul(last, param(slots_.ctx_q));
  const Var k = ag::matmul(h, param(slots_.ctx_k));
  const Var v = ag::matmul(h, param(slots_.ctx_v));
  const Var attended = ag::add(last, ag::matmul(ag::last_query_attention(q, k, v, t), param(slots_.ctx_o)));
  const Var ffn = ag::affine(ag::relu(ag::affine(attended, param(slots_.ctx_f1_w), param(slots_.ctx_f1_b))),
                             param(slots_.ctx_f2_w), param(slots_.ctx_f2_b));
  return ag::add(attended, ffn);
}

Var ReferenceSscModel::predict(int head, const Var& ctx) const {
  if (head < 0 || head >= num_heads()) throw Error(ErrorCode::HeadCountMismatch, "head index out of range");
  if (ctx.cols() != config_.context_dim) throw Error(ErrorCode::ShapeMismatch, "predict: width != D_c");
  const std::size_t at = slots_.heads + 2 * static_cast<std::size_t>(head);
  return ag::affine(ctx, param(at), param(at + 1));
}

std::unique_ptr<SscModel> make_model(const ModelConfig& config) {
  return std::make_unique<ReferenceSscModel>(config);
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'F', 'U', 'I', 'D', 'A', 'C', '1'};
constexpr std::uint8_t kDtypeF64 = 1;
constexpr std::uint8_t kDtypeU8 = 2;

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "container writer assumes little-endian host");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& at) {
  if (at + sizeof(T) > in.size()) throw Error(ErrorCode::FormatError, "truncated named-array file");
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  at += sizeof(T);
  return v;
}

void put_entry_header(std::string& out, const std::string& name, std::uint8_t dtype,
                      std::initializer_list<std::uint64_t> dims) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, dtype);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put<std::uint64_t>(out, d);
}

}  // namespace

void write_named_arrays(const std::filesystem::path& path, const NamedArrayFile& file) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.arrays.size() + file.text.size()));
  for (const auto& [name, m] : file.arrays) {
    put_entry_header(out, name, kDtypeF64,
                     {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
    out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  for (const auto& [name, text] : file.text) {
    put_entry_header(out, name, kDtypeU8, {text.size()});
    out += text;
  }
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  dataio::write_file_atomic(path, out);
}

NamedArrayFile read_named_arrays(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string in = std::move(ss).str();
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::FormatError, path.string() + " is not a named-array container");
  }
  std::size_t at = sizeof kMagic;
  const auto count = take<std::uint32_t>(in, at);
  NamedArrayFile file;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = take<std::uint32_t>(in, at);
    if (at + name_len > in.size()) throw Error(ErrorCode::FormatError, "truncated entry name");
    std::string name = in.substr(at, name_len);
    at += name_len;
    const auto dtype = take<std::uint8_t>(in, at);
    const auto ndim = take<std::uint32_t>(in, at);
    std::vector<std::uint64_t> dims(ndim);
    std::uint64_t total = 1;
    for (auto& d : dims) {
      d = take<std::uint64_t>(in, at);
      total *= d;
    }
    if (dtype == kDtypeF64) {
      if (ndim != 2) throw Error(ErrorCode::FormatError, "f64 entry '" + name + "' must be 2-D");
      if (at + total * sizeof(double) > in.size()) throw Error(ErrorCode::FormatError, "truncated payload");
      Matrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
      std::memcpy(m.data(), in.data() + at, total * sizeof(double));
      at += total * sizeof(double);
      file.arrays.emplace_back(std::move(name), std::move(m));
    } else if (dtype == kDtypeU8) {
      if (at + total > in.size()) throw Error(ErrorCode::FormatError, "truncated payload");
      file.text[name] = in.substr(at, total);
      at += total;
    } else {
      throw Error(ErrorCode::FormatError, "unknown dtype in entry '" + name + "'");
    }
  }
  return file;
}

void save_checkpoint(const std::filesystem::path& path, const SscModel& model) {
  NamedArrayFile file;
  file.arrays = model.snapshot().arrays;
  file.text["meta.model_config"] = model.config_text();
  write_named_arrays(path, file);
}

std::unique_ptr<SscModel> load_checkpoint(const std::filesystem::path& path) {
  const NamedArrayFile file = read_named_arrays(path);
  auto it = file.text.find("meta.model_config");
  if (it == file.text.end()) throw Error(ErrorCode::FormatError, "checkpoint lacks model config");
  auto model = make_model(ModelConfig::from_text(it->second));
  model->load(ParameterSnapshot{file.arrays});
  return model;
}

}  // namespace sfuida::model
