#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "cmam/tensor.hpp"

namespace cmam {

/// Affine map; weight is [out×in], bias [out].
struct LinearParams {
  Var weight;
  Var bias;
};

Var linear(Var weight, Var bias, Var x);
inline Var linear(const LinearParams& p, Var x) { return linear(p.weight, p.bias, x); }

/// LSTM cell. weight is [4H × (input+H)] acting on [x, h_prev]; bias is [4H].
/// Gate rows are ordered input, forget, output, candidate.
struct LstmParams {
  Var weight;
  Var bias;

  std::size_t hidden_size() const { return weight.dim(0) / 4; }
  std::size_t input_size() const { return weight.dim(1) - hidden_size(); }
};

Shape lstm_weight_shape(std::size_t input_size, std::size_t hidden_size);

struct LstmOutput {
  Var h;
  Var c;
  Var o;  // the cell output is its hidden state
};

LstmOutput lstm_step(const LstmParams& p, Var x, Var h_prev, Var c_prev);

struct Conv2dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t pad_h = 1;
  std::size_t pad_w = 1;
};

struct Pool2dSpec {
  std::size_t window_h = 2;
  std::size_t window_w = 2;
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
};

struct ReluSpec {};

using StackLayer = std::variant<Conv2dSpec, ReluSpec, Pool2dSpec>;

struct MapExtent {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Column-wise convolutional encoder: layers applied in order, then every
/// column of the final C×H_f×T map (all channels, all rows) is projected to
/// `feature_width`.
struct ConvStack {
  std::size_t input_height = 32;
  std::vector<StackLayer> layers;
  std::size_t feature_width = 64;

  /// conv3×3 → relu → pool2×2, twice, then conv3×3 → relu → pool(2×1), twice.
  /// With the default channels a 32×W image becomes 64×2×(W/4).
  static ConvStack default_stack(std::vector<std::size_t> channels = {16, 32, 48, 64},
                                 std::size_t feature_width = 64);

  MapExtent output_extent(std::size_t image_width) const;
  std::size_t sequence_length(std::size_t image_width) const { return output_extent(image_width).width; }
  std::size_t column_features() const;
  std::vector<Conv2dSpec> convolutions() const;
};

MapExtent conv2d_extent(const Conv2dSpec& spec, const MapExtent& in);
MapExtent maxpool2d_extent(const Pool2dSpec& spec, const MapExtent& in);

/// Cross-correlation of a C_in×H×W image with [C_out×C_in×kh×kw] filters plus bias.
Var conv2d(const Conv2dSpec& spec, Var image, Var weight, Var bias);
/// Window maximum; windows that do not fit are truncated; gradient goes to the
/// first maximal element of each window.
Var maxpool2d(const Pool2dSpec& spec, Var image);

struct ConvWeights {
  Var weight;
  Var bias;
};

struct ConvStackParams {
  std::vector<ConvWeights> convs;  // one per Conv2dSpec, in order
  LinearParams projection;         // [feature_width × column_features]
};

/// Applies the stack and returns the feature map reordered as [T × C·H_f].
Var cnn_columns(const ConvStack& stack, const ConvStackParams& params, Var image);
/// Returns the projected column sequence as a [T × feature_width] matrix.
Var cnn_encode_matrix(const ConvStack& stack, const ConvStackParams& params, Var image);
/// Returns x_1..x_T, one vector of width feature_width per output column.
std::vector<Var> cnn_encode(const ConvStack& stack, const ConvStackParams& params, Var image);

}  // namespace cmam
