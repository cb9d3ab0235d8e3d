#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "thermo/autodiff.hpp"

namespace thermo::model {

struct RegressorConfig {
  std::size_t input_size = 96;
  std::size_t in_channels = 1;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> stage_blocks{2, 2, 2};
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t head_hidden = 128;
  std::uint64_t seed = 0;

  void validate() const;

  // Spatial size of the last stage's feature map.
  std::size_t final_feature_size() const;

  // key=value lines, one per field, in declaration order.
  std::string to_key_values() const;

  // Applies one key=value assignment; returns false for unknown keys.
  bool set(const std::string& key, const std::string& value);

  bool operator==(const RegressorConfig&) const = default;
};

// Convolution (no bias) followed by batch normalization.
struct ConvBn {
  ad::Tensor weight;  // [out, in, k, k]
  ad::Tensor gamma;
  ad::Tensor beta;
  ad::BatchNormStats stats;
  std::size_t stride = 1;
  std::size_t padding = 0;

  ad::Tensor forward(const ad::Tensor& x, ad::Mode mode);
};

struct BasicBlock {
  ConvBn conv1;
  ConvBn conv2;
  std::optional<ConvBn> projection;  // 1x1 skip when shape changes

  ad::Tensor forward(const ad::Tensor& x, ad::Mode mode);
};

// Activations captured during a forward pass: index 0 is the stem output,
// index s (1-based) the output of stage s.
struct ForwardTrace {
  std::vector<ad::Tensor> layer_outputs;
};

class ResidualRegressor {
 public:
  static ResidualRegressor build(const RegressorConfig& config);

  const RegressorConfig& config() const noexcept { return config_; }

  // batch: [N, in_channels, input_size, input_size], levels scaled to [0, 1].
  // Returns predictions of shape [N]. Eval mode mutates nothing; Train mode
  // updates only batch-norm running statistics.
  ad::Tensor forward(const ad::Tensor& batch, ad::Mode mode, ForwardTrace* trace = nullptr);

  // Runs the network from the output of `layer` (see ForwardTrace) to the
  // prediction. Used to differentiate with respect to an intermediate map.
  ad::Tensor forward_from(std::size_t layer, const ad::Tensor& activation, ad::Mode mode);

  std::size_t layer_count() const noexcept { return 1 + stages_.size(); }
  std::size_t backbone_dim() const noexcept { return config_.stage_channels.back(); }

  // Trainable tensors in declared order.
  std::vector<ad::Tensor*> parameters();
  // Parameters and batch-norm running statistics, in checkpoint order.
  std::vector<ad::Tensor*> state();
  std::size_t parameter_count();

  void zero_grad();

  // Deep copy sharing no storage with this model.
  ResidualRegressor clone() const;

  // Direct access for hand-built models in tests.
  ConvBn& stem() { return stem_; }
  std::vector<std::vector<BasicBlock>>& stages() { return stages_; }
  ad::Tensor& fc1_weight() { return fc1_w_; }
  ad::Tensor& fc1_bias() { return fc1_b_; }
  ad::Tensor& fc2_weight() { return fc2_w_; }
  ad::Tensor& fc2_bias() { return fc2_b_; }

 private:
  ad::Tensor run_stage(std::size_t stage, const ad::Tensor& x, ad::Mode mode);
  ad::Tensor run_head(const ad::Tensor& features, ad::Mode mode);

  RegressorConfig config_;
  ConvBn stem_;
  std::vector<std::vector<BasicBlock>> stages_;
  ad::Tensor fc1_w_;  // [backbone_dim, head_hidden]
  ad::Tensor fc1_b_;
  ad::Tensor fc2_w_;  // [head_hidden, 1]
  ad::Tensor fc2_b_;
};

void save_checkpoint(ResidualRegressor& model, const std::filesystem::path& path);
ResidualRegressor load_checkpoint(const std::filesystem::path& path);
// Loads weights into an existing model; the embedded config must match.
void load_checkpoint_into(ResidualRegressor& model, const std::filesystem::path& path);

}  // namespace thermo::model
