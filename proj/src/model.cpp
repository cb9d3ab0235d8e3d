#include "thermo/model.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "thermo/error.hpp"
#include "thermo/rng.hpp"

namespace thermo::model {

namespace {

constexpr const char* kCheckpointMagic = "thermofatigue-checkpoint 1";
constexpr const char* kHeaderEnd = "---";

std::size_t parse_size(const std::string& key, const std::string& text) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    fail(ErrorCode::Config, "bad integer for " + key + ": '" + text + "'");
  }
  return value;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
  return out;
}

std::string join(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

// Kaiming-uniform with ReLU gain: U(-b, b), b = sqrt(2) * sqrt(3 / fan_in).
ad::Tensor kaiming_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

ConvBn make_conv_bn(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                    Rng& rng) {
  ConvBn layer;
  layer.weight = kaiming_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng);
  layer.gamma = ad::Tensor::full({out}, 1.0, true);
  layer.beta = ad::Tensor::zeros({out}, true);
  layer.stats = ad::BatchNormStats::identity(out);
  layer.stride = stride;
  layer.padding = kernel / 2;
  return layer;
}

ConvBn clone_layer(const ConvBn& src) {
  ConvBn dst = src;
  dst.weight = src.weight.clone();
  dst.gamma = src.gamma.clone();
  dst.beta = src.beta.clone();
  dst.stats.running_mean = src.stats.running_mean.clone();
  dst.stats.running_var = src.stats.running_var.clone();
  return dst;
}

void append_layer_params(ConvBn& layer, std::vector<ad::Tensor*>& out) {
  out.push_back(&layer.weight);
  out.push_back(&layer.gamma);
  out.push_back(&layer.beta);
}

void append_layer_state(ConvBn& layer, std::vector<ad::Tensor*>& out) {
  append_layer_params(layer, out);
  out.push_back(&layer.stats.running_mean);
  out.push_back(&layer.stats.running_var);
}

RegressorConfig read_header(std::istream& in, const std::filesystem::path& path,
                            std::size_t& tensor_count) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    fail(ErrorCode::Format, path.string() + ": not a checkpoint (bad magic line)");
  }
  RegressorConfig config;
  bool have_count = false;
  while (true) {
    if (!std::getline(in, line)) fail(ErrorCode::Format, path.string() + ": truncated header");
    if (line == kHeaderEnd) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::Format, path.string() + ": bad header line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "tensors") {
      tensor_count = parse_size(key, value);
      have_count = true;
    } else if (!config.set(key, value)) {
      fail(ErrorCode::Format, path.string() + ": unknown header key '" + key + "'");
    }
  }
  if (!have_count) fail(ErrorCode::Format, path.string() + ": header lacks tensor count");
  config.validate();
  return config;
}

void read_state(std::istream& in, ResidualRegressor& model, std::size_t tensor_count,
                const std::filesystem::path& path) {
  auto state = model.state();
  if (state.size() != tensor_count) {
    fail(ErrorCode::Format, path.string() + ": expected " + std::to_string(state.size()) +
                                " tensors, header declares " + std::to_string(tensor_count));
  }
  for (ad::Tensor* t : state) {
    ad::Tensor loaded = ad::read_tensor(in);
    if (loaded.shape() != t->shape()) {
      fail(ErrorCode::Format, path.string() + ": tensor shape " + ad::shape_string(loaded.shape()) +
                                  " does not match model " + ad::shape_string(t->shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t->data().begin());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorCode::Format, path.string() + ": trailing bytes after last tensor");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// RegressorConfig

void RegressorConfig::validate() const {
  require(in_channels >= 1 && stem_channels >= 1 && head_hidden >= 1,
          "model config: channel counts must be >= 1");
  require(!stage_blocks.empty(), "model config: at least one stage required");
  require(stage_blocks.size() == stage_channels.size(),
          "model config: stage_blocks and stage_channels lengths differ");
  for (std::size_t i = 0; i < stage_blocks.size(); ++i) {
    require(stage_blocks[i] >= 1, "model config: every stage needs >= 1 block");
    require(stage_channels[i] >= 1, "model config: channel counts must be >= 1");
  }
  require(input_size >= 1, "model config: input_size must be >= 1");
}

std::size_t RegressorConfig::final_feature_size() const {
  std::size_t s = input_size;
  // stride-2 first block for stages >= 2; 3x3 kernel, padding 1
  for (std::size_t i = 1; i < stage_blocks.size(); ++i) s = (s + 2 - 3) / 2 + 1;
  return s;
}

std::string RegressorConfig::to_key_values() const {
  std::ostringstream os;
  os << "input_size=" << input_size << '\n'
     << "in_channels=" << in_channels << '\n'
     << "stem_channels=" << stem_channels << '\n'
     << "stage_blocks=" << join(stage_blocks) << '\n'
     << "stage_channels=" << join(stage_channels) << '\n'
     << "head_hidden=" << head_hidden << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

bool RegressorConfig::set(const std::string& key, const std::string& value) {
  if (key == "input_size") input_size = parse_size(key, value);
  else if (key == "in_channels") in_channels = parse_size(key, value);
  else if (key == "stem_channels") stem_channels = parse_size(key, value);
  else if (key == "stage_blocks") stage_blocks = parse_list(key, value);
  else if (key == "stage_channels") stage_channels = parse_list(key, value);
  else if (key == "head_hidden") head_hidden = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Layers

ad::Tensor ConvBn::forward(const ad::Tensor& x, ad::Mode mode) {
  ad::Conv2dOptions opts;
  opts.stride = stride;
  opts.padding = padding;
  return ad::batchnorm2d(ad::conv2d(x, weight, ad::Tensor{}, opts), gamma, beta, stats, mode);
}

ad::Tensor BasicBlock::forward(const ad::Tensor& x, ad::Mode mode) {
  ad::Tensor h = ad::relu(conv1.forward(x, mode));
  h = conv2.forward(h, mode);
  ad::Tensor skip = projection ? projection->forward(x, mode) : x;
  return ad::relu(ad::add(h, skip));
}

// ---------------------------------------------------------------------------
// ResidualRegressor

ResidualRegressor ResidualRegressor::build(const RegressorConfig& config) {
  config.validate();
  ResidualRegressor m;
  m.config_ = config;
  Rng rng(config.seed);
  m.stem_ = make_conv_bn(config.in_channels, config.stem_channels, 3, 1, rng);
  std::size_t channels = config.stem_channels;
  for (std::size_t s = 0; s < config.stage_blocks.size(); ++s) {
    std::vector<BasicBlock> blocks;
    const std::size_t out = config.stage_channels[s];
    for (std::size_t b = 0; b < config.stage_blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      BasicBlock block;
      block.conv1 = make_conv_bn(channels, out, 3, stride, rng);
      block.conv2 = make_conv_bn(out, out, 3, 1, rng);
      if (stride != 1 || channels != out) block.projection = make_conv_bn(channels, out, 1, stride, rng);
      blocks.push_back(std::move(block));
      channels = out;
    }
    m.stages_.push_back(std::move(blocks));
  }
  m.fc1_w_ = kaiming_uniform({channels, config.head_hidden}, channels, rng);
  m.fc1_b_ = ad::Tensor::zeros({config.head_hidden}, true);
  m.fc2_w_ = kaiming_uniform({config.head_hidden, 1}, config.head_hidden, rng);
  // midpoint of the 0..100 label range
  m.fc2_b_ = ad::Tensor::full({1}, 50.0, true);
  return m;
}

ad::Tensor ResidualRegressor::run_stage(std::size_t stage, const ad::Tensor& x, ad::Mode mode) {
  ad::Tensor h = x;
  for (BasicBlock& block : stages_[stage]) h = block.forward(h, mode);
  return h;
}

ad::Tensor ResidualRegressor::run_head(const ad::Tensor& features, ad::Mode) {
  ad::Tensor pooled = ad::global_avg_pool(features);
  ad::Tensor hidden = ad::relu(ad::bias_add(ad::matmul(pooled, fc1_w_), fc1_b_));
  ad::Tensor out = ad::bias_add(ad::matmul(hidden, fc2_w_), fc2_b_);
  return ad::reshape(out, {out.dim(0)});
}

ad::Tensor ResidualRegressor::forward(const ad::Tensor& batch, ad::Mode mode, ForwardTrace* trace) {
  if (!batch.defined() || batch.rank() != 4 || batch.dim(1) != config_.in_channels ||
      batch.dim(2) != config_.input_size || batch.dim(3) != config_.input_size) {
    fail(ErrorCode::InvalidInput,
         "model input must be [N," + std::to_string(config_.in_channels) + "," +
             std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) +
             "], got " + (batch.defined() ? ad::shape_string(batch.shape()) : std::string("none")));
  }
  if (batch.dim(0) == 0) fail(ErrorCode::InvalidInput, "model input batch is empty");
  if (!batch.all_finite()) fail(ErrorCode::InvalidInput, "model input contains NaN or Inf");
  if (trace != nullptr) trace->layer_outputs.clear();
  ad::Tensor h = ad::relu(stem_.forward(batch, mode));
  if (trace != nullptr) trace->layer_outputs.push_back(h);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    h = run_stage(s, h, mode);
    if (trace != nullptr) trace->layer_outputs.push_back(h);
  }
  return run_head(h, mode);
}

ad::Tensor ResidualRegressor::forward_from(std::size_t layer, const ad::Tensor& activation,
                                           ad::Mode mode) {
  if (layer >= layer_count()) {
    fail(ErrorCode::InvalidInput, "layer id " + std::to_string(layer) + " out of range (model has " +
                                      std::to_string(layer_count()) + " layers)");
  }
  ad::Tensor h = activation;
  for (std::size_t s = layer; s < stages_.size(); ++s) h = run_stage(s, h, mode);
  return run_head(h, mode);
}

std::vector<ad::Tensor*> ResidualRegressor::parameters() {
  std::vector<ad::Tensor*> out;
  append_layer_params(stem_, out);
  for (auto& stage : stages_) {
    for (BasicBlock& block : stage) {
      append_layer_params(block.conv1, out);
      append_layer_params(block.conv2, out);
      if (block.projection) append_layer_params(*block.projection, out);
    }
  }
  out.insert(out.end(), {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_});
  return out;
}

std::vector<ad::Tensor*> ResidualRegressor::state() {
  std::vector<ad::Tensor*> out;
  append_layer_state(stem_, out);
  for (auto& stage : stages_) {
    for (BasicBlock& block : stage) {
      append_layer_state(block.conv1, out);
      append_layer_state(block.conv2, out);
      if (block.projection) append_layer_state(*block.projection, out);
    }
  }
  out.insert(out.end(), {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_});
  return out;
}

std::size_t ResidualRegressor::parameter_count() {
  std::size_t n = 0;
  for (ad::Tensor* t : parameters()) n += t->numel();
  return n;
}

void ResidualRegressor::zero_grad() {
  for (ad::Tensor* t : parameters()) t->zero_grad();
}

ResidualRegressor ResidualRegressor::clone() const {
  ResidualRegressor copy;
  copy.config_ = config_;
  copy.stem_ = clone_layer(stem_);
  for (const auto& stage : stages_) {
    std::vector<BasicBlock> blocks;
    for (const BasicBlock& block : stage) {
      BasicBlock b;
      b.conv1 = clone_layer(block.conv1);
      b.conv2 = clone_layer(block.conv2);
      if (block.projection) b.projection = clone_layer(*block.projection);
      blocks.push_back(std::move(b));
    }
    copy.stages_.push_back(std::move(blocks));
  }
  copy.fc1_w_ = fc1_w_.clone();
  copy.fc1_b_ = fc1_b_.clone();
  copy.fc2_w_ = fc2_w_.clone();
  copy.fc2_b_ = fc2_b_.clone();
  return copy;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(ResidualRegressor& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  const auto state = model.state();
  out << kCheckpointMagic << '\n'
      << model.config().to_key_values() << "tensors=" << state.size() << '\n'
      << kHeaderEnd << '\n';
  for (const ad::Tensor* t : state) ad::write_tensor(out, *t);
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

ResidualRegressor load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::size_t count = 0;
  const RegressorConfig config = read_header(in, path, count);
  ResidualRegressor model = ResidualRegressor::build(config);
  read_state(in, model, count, path);
  return model;
}

void load_checkpoint_into(ResidualRegressor& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::size_t count = 0;
  RegressorConfig config = read_header(in, path, count);
  RegressorConfig expected = model.config();
  config.seed = expected.seed;  // initialization seed does not affect shapes
  if (!(config == expected)) {
    fail(ErrorCode::InvalidInput, path.string() + ": checkpoint config is incompatible with the model");
  }
  read_state(in, model, count, path);
}

}  // namespace thermo::model
