#include "cmam/layers.hpp"

#include <algorithm>
#include <string>

namespace cmam {

Var linear(Var weight, Var bias, Var x) { return add(matvec(weight, x), bias); }

Shape lstm_weight_shape(std::size_t input_size, std::size_t hidden_size) {
  return {4 * hidden_size, input_size + hidden_size};
}

LstmOutput lstm_step(const LstmParams& p, Var x, Var h_prev, Var c_prev) {
  const std::size_t hidden = p.hidden_size();
  if (x.size() != p.input_size() || h_prev.size() != hidden || c_prev.size() != hidden) {
    throw ShapeError("lstm_step: cell " + std::to_string(p.input_size()) + "->" + std::to_string(hidden) +
                     " given x " + shape_str(x.shape()) + ", h " + shape_str(h_prev.shape()) + ", c " +
                     shape_str(c_prev.shape()));
  }
  Var gates = linear(p.weight, p.bias, concat({x, h_prev}));
  Var in_gate = sigmoid(slice(gates, 0, 0, hidden));
  Var forget_gate = sigmoid(slice(gates, 0, hidden, 2 * hidden));
  Var out_gate = sigmoid(slice(gates, 0, 2 * hidden, 3 * hidden));
  Var candidate = tanh(slice(gates, 0, 3 * hidden, 4 * hidden));
  Var c = forget_gate * c_prev + in_gate * candidate;
  Var h = out_gate * tanh(c);
  return {h, c, h};
}

// ---------------------------------------------------------------------------
// Convolution stack

ConvStack ConvStack::default_stack(std::vector<std::size_t> channels, std::size_t feature_width) {
  if (channels.size() != 4) throw ConfigError("default conv stack takes exactly 4 channel counts");
  ConvStack stack;
  stack.feature_width = feature_width;
  const Pool2dSpec halve_both{2, 2, 2, 2};
  const Pool2dSpec halve_height{2, 1, 2, 1};
  std::size_t in = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    stack.layers.push_back(Conv2dSpec{in, channels[i], 3, 3, 1, 1, 1});
    stack.layers.push_back(ReluSpec{});
    stack.layers.push_back(i < 2 ? halve_both : halve_height);
    in = channels[i];
  }
  return stack;
}

MapExtent conv2d_extent(const Conv2dSpec& s, const MapExtent& in) {
  if (in.channels != s.in_channels) {
    throw ShapeError("conv2d: expects " + std::to_string(s.in_channels) + " input channels, got " +
                     std::to_string(in.channels));
  }
  if (s.stride == 0 || in.height + 2 * s.pad_h < s.kernel_h || in.width + 2 * s.pad_w < s.kernel_w) {
    throw ShapeError("conv2d: non-positive output extent for input " + std::to_string(in.height) + "x" +
                     std::to_string(in.width) + " with kernel " + std::to_string(s.kernel_h) + "x" +
                     std::to_string(s.kernel_w));
  }
  return {s.out_channels, (in.height + 2 * s.pad_h - s.kernel_h) / s.stride + 1,
          (in.width + 2 * s.pad_w - s.kernel_w) / s.stride + 1};
}

MapExtent maxpool2d_extent(const Pool2dSpec& s, const MapExtent& in) {
  if (s.window_h == 0 || s.window_w == 0 || s.stride_h == 0 || s.stride_w == 0) {
    throw ShapeError("maxpool2d: zero window or stride");
  }
  if (s.window_h > in.height || s.window_w > in.width) {
    throw ShapeError("maxpool2d: window " + std::to_string(s.window_h) + "x" + std::to_string(s.window_w) +
                     " larger than input " + std::to_string(in.height) + "x" + std::to_string(in.width));
  }
  return {in.channels, (in.height - s.window_h) / s.stride_h + 1, (in.width - s.window_w) / s.stride_w + 1};
}

MapExtent ConvStack::output_extent(std::size_t image_width) const {
  MapExtent e{1, input_height, image_width};
  for (const StackLayer& layer : layers) {
    if (const auto* c = std::get_if<Conv2dSpec>(&layer)) e = conv2d_extent(*c, e);
    else if (const auto* p = std::get_if<Pool2dSpec>(&layer)) e = maxpool2d_extent(*p, e);
  }
  return e;
}

std::size_t ConvStack::column_features() const {
  // Height collapse does not depend on width; probe with a wide enough image.
  std::size_t width = 1;
  for (;;) {
    try {
      const MapExtent e = output_extent(width);
      return e.channels * e.height;
    } catch (const ShapeError&) {
      if (width > (1u << 16)) throw;
      width *= 2;
    }
  }
}

std::vector<Conv2dSpec> ConvStack::convolutions() const {
  std::vector<Conv2dSpec> out;
  for (const StackLayer& layer : layers)
    if (const auto* c = std::get_if<Conv2dSpec>(&layer)) out.push_back(*c);
  return out;
}

namespace {

MapExtent image_extent(const Var& image) {
  const Shape& s = image.shape();
  if (s.size() == 3) return {s[0], s[1], s[2]};
  if (s.size() == 2) return {1, s[0], s[1]};
  throw ShapeError("expected an image of rank 2 or 3, got " + shape_str(s));
}

// Output columns ox for which ox*stride + kx - pad lands in [0, width).
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t stride,
                                                std::size_t width, std::size_t out_width) {
  const long lo_num = static_cast<long>(pad) - static_cast<long>(k);
  const long first = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  const long hi_num = static_cast<long>(width) - 1 + static_cast<long>(pad) - static_cast<long>(k);
  if (hi_num < 0) return {0, 0};
  const long last = std::min<long>(hi_num / static_cast<long>(stride), static_cast<long>(out_width) - 1);
  if (last < first) return {0, 0};
  return {static_cast<std::size_t>(first), static_cast<std::size_t>(last) + 1};
}

}  // namespace

Var conv2d(const Conv2dSpec& s, Var image, Var weight, Var bias) {
  const MapExtent in = image_extent(image);
  const MapExtent out = conv2d_extent(s, in);
  const Shape wshape{s.out_channels, s.in_channels, s.kernel_h, s.kernel_w};
  if (weight.shape() != wshape || bias.size() != s.out_channels) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match filters " + shape_str(wshape));
  }
  const std::size_t H = in.height, W = in.width, Ho = out.height, Wo = out.width;
  const std::size_t Ci = s.in_channels, Co = s.out_channels, KH = s.kernel_h, KW = s.kernel_w;
  auto x = image.values();
  auto w = weight.values();
  auto b = bias.values();
  std::vector<double> y(Co * Ho * Wo);
  for (std::size_t co = 0; co < Co; ++co) {
    double* yc = y.data() + co * Ho * Wo;
    std::fill(yc, yc + Ho * Wo, b[co]);
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const double* xc = x.data() + ci * H * W;
      for (std::size_t ky = 0; ky < KH; ++ky) {
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const double wv = w[((co * Ci + ci) * KH + ky) * KW + kx];
          const auto [ox0, ox1] = valid_range(kx, s.pad_w, s.stride, W, Wo);
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad_h);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const double* xr = xc + static_cast<std::size_t>(iy) * W;
            double* yr = yc + oy * Wo;
            if (s.stride == 1) {
              const double* src = xr + kx - s.pad_w;
              for (std::size_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * src[ox];
            } else {
              for (std::size_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[ox * s.stride + kx - s.pad_w];
            }
          }
        }
      }
    }
  }
  const auto ix = image.id(), iw = weight.id(), ib = bias.id();
  return image.tape().record(
      {Co, Ho, Wo}, std::move(y), {image, weight, bias},
      [=](Tape& t, std::uint32_t self) {
        auto dy = t.out_grad(self);
        if (t.requires_grad(ib)) {
          auto db = t.grad_buffer(ib);
          for (std::size_t co = 0; co < Co; ++co) {
            double acc = 0.0;
            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += dy[co * Ho * Wo + i];
            db[co] += acc;
          }
        }
        const bool want_x = t.requires_grad(ix), want_w = t.requires_grad(iw);
        if (!want_x && !want_w) return;
        auto x = t.value(ix);
        auto w = t.value(iw);
        std::span<double> dx = want_x ? t.grad_buffer(ix) : std::span<double>();
        std::span<double> dw = want_w ? t.grad_buffer(iw) : std::span<double>();
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gc = dy.data() + co * Ho * Wo;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* xc = x.data() + ci * H * W;
            double* dxc = want_x ? dx.data() + ci * H * W : nullptr;
            for (std::size_t ky = 0; ky < KH; ++ky) {
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const std::size_t widx = ((co * Ci + ci) * KH + ky) * KW + kx;
                const double wv = w[widx];
                const auto [ox0, ox1] = valid_range(kx, s.pad_w, s.stride, W, Wo);
                double wacc = 0.0;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad_h);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  const std::size_t row = static_cast<std::size_t>(iy) * W;
                  const double* gr = gc + oy * Wo;
                  for (std::size_t ox = ox0; ox < ox1; ++ox) {
                    const std::size_t xi = row + ox * s.stride + kx - s.pad_w;
                    wacc += gr[ox] * xc[xi];
                    if (dxc) dxc[xi] += wv * gr[ox];
                  }
                }
                if (want_w) dw[widx] += wacc;
              }
            }
          }
        }
      });
}

Var maxpool2d(const Pool2dSpec& s, Var image) {
  const MapExtent in = image_extent(image);
  const MapExtent out = maxpool2d_extent(s, in);
  const std::size_t C = in.channels, H = in.height, W = in.width, Ho = out.height, Wo = out.width;
  auto x = image.values();
  std::vector<double> y(C * Ho * Wo);
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = c * H * W + (oy * s.stride_h) * W + ox * s.stride_w;
        for (std::size_t wy = 0; wy < s.window_h; ++wy) {
          for (std::size_t wx = 0; wx < s.window_w; ++wx) {
            const std::size_t idx = c * H * W + (oy * s.stride_h + wy) * W + ox * s.stride_w + wx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (c * Ho + oy) * Wo + ox;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  Shape out_shape = image.rank() == 3 ? Shape{C, Ho, Wo} : Shape{Ho, Wo};
  const auto ix = image.id();
  return image.tape().record(std::move(out_shape), std::move(y), {image},
                             [ix, argmax = std::move(argmax)](Tape& t, std::uint32_t self) {
                               auto dy = t.out_grad(self);
                               auto dx = t.grad_buffer(ix);
                               for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
                             });
}

Var cnn_columns(const ConvStack& stack, const ConvStackParams& params, Var image) {
  const MapExtent in = image_extent(image);
  if (in.height != stack.input_height || in.channels != 1) {
    throw ShapeError("cnn_encode: expected a 1x" + std::to_string(stack.input_height) + "xW image, got " +
                     shape_str(image.shape()));
  }
  Var x = image.rank() == 3 ? image : reshape(image, {1, in.height, in.width});
  std::size_t conv_index = 0;
  for (const StackLayer& layer : stack.layers) {
    if (const auto* c = std::get_if<Conv2dSpec>(&layer)) {
      if (conv_index >= params.convs.size()) throw ShapeError("cnn_encode: missing convolution weights");
      const ConvWeights& cw = params.convs[conv_index++];
      x = conv2d(*c, x, cw.weight, cw.bias);
    } else if (std::holds_alternative<ReluSpec>(layer)) {
      x = relu(x);
    } else {
      x = maxpool2d(std::get<Pool2dSpec>(layer), x);
    }
  }
  const std::size_t C = x.dim(0), Hf = x.dim(1), T = x.dim(2);
  auto xv = x.values();
  std::vector<double> cols(T * C * Hf);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < Hf; ++h)
      for (std::size_t t = 0; t < T; ++t) cols[t * C * Hf + c * Hf + h] = xv[(c * Hf + h) * T + t];
  const auto id = x.id();
  return x.tape().record({T, C * Hf}, std::move(cols), {x}, [id, C, Hf, T](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto dx = t.grad_buffer(id);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < Hf; ++h)
        for (std::size_t s = 0; s < T; ++s) dx[(c * Hf + h) * T + s] += dy[s * C * Hf + c * Hf + h];
  });
}

Var cnn_encode_matrix(const ConvStack& stack, const ConvStackParams& params, Var image) {
  Var cols = cnn_columns(stack, params, image);
  return add_rows(matmul(cols, transpose(params.projection.weight)), params.projection.bias);
}

std::vector<Var> cnn_encode(const ConvStack& stack, const ConvStackParams& params, Var image) {
  Var features = cnn_encode_matrix(stack, params, image);
  std::vector<Var> xs;
  xs.reserve(features.dim(0));
  for (std::size_t t = 0; t < features.dim(0); ++t) xs.push_back(row(features, t));
  return xs;
}

}  // namespace cmam
