#pragma once

// String-keyed op entry point. The gradient checker drives every registered
// op through this table; unknown names raise UnsupportedOpError so callers
// can tell a missing registration from a shape bug.

#include <string>
#include <vector>

#include "nn_ops.hpp"
#include "ops.hpp"
#include "sampling.hpp"
#include "tensor.hpp"

namespace apsflow {

template <typename T>
Tensor<T> forward_op(const std::string& name, const std::vector<Tensor<T>>& inputs,
                     const OpAttrs& attrs = {}) {
  auto arity = [&](size_t n) {
    APSFLOW_CHECK(inputs.size() == n, ContractError,
                  "op '" << name << "' expects " << n << " inputs, got "
                         << inputs.size());
  };
  if (name == "add") { arity(2); return add(inputs[0], inputs[1]); }
  if (name == "sub") { arity(2); return sub(inputs[0], inputs[1]); }
  if (name == "mul") { arity(2); return mul(inputs[0], inputs[1]); }
  if (name == "div") { arity(2); return div(inputs[0], inputs[1]); }
  if (name == "add_scalar") { arity(1); return add_scalar(inputs[0], static_cast<T>(attrs.require("value"))); }
  if (name == "mul_scalar") { arity(1); return mul_scalar(inputs[0], static_cast<T>(attrs.require("value"))); }
  if (name == "neg") { arity(1); return neg(inputs[0]); }
  if (name == "abs") { arity(1); return abs(inputs[0]); }
  if (name == "square") { arity(1); return square(inputs[0]); }
  if (name == "sqrt") { arity(1); return sqrt(inputs[0]); }
  if (name == "exp") { arity(1); return exp(inputs[0]); }
  if (name == "log") { arity(1); return log(inputs[0]); }
  if (name == "sigmoid") { arity(1); return sigmoid(inputs[0]); }
  if (name == "leaky_relu") { arity(1); return leaky_relu(inputs[0], static_cast<T>(attrs.get("slope", 0.1))); }
  if (name == "pow_scalar") { arity(1); return pow_scalar(inputs[0], static_cast<T>(attrs.require("value"))); }
  if (name == "reduce_sum") { arity(1); return reduce_sum(inputs[0]); }
  if (name == "reduce_mean") { arity(1); return reduce_mean(inputs[0]); }
  if (name == "channel_sum") { arity(1); return channel_sum(inputs[0]); }
  if (name == "channel_mean") { arity(1); return channel_mean(inputs[0]); }
  if (name == "softmax_channel") { arity(1); return softmax_channel(inputs[0]); }
  if (name == "broadcast_channel") { arity(1); return broadcast_channel(inputs[0], attrs.get_int("channels", 1)); }
  if (name == "reshape") {
    arity(1);
    Shape s{attrs.get_int("d0", 1), attrs.get_int("d1", 1), attrs.get_int("d2", 1)};
    while (s.size() > 1 && s.back() == 1 && attrs.values.count("d" + std::to_string(s.size() - 1)) == 0)
      s.pop_back();
    return reshape(inputs[0], s);
  }
  if (name == "slice") {
    arity(1);
    return slice_channels(inputs[0], attrs.get_int("c0", 0), attrs.get_int("count", 1));
  }
  if (name == "concat") { return concat_channels(inputs); }
  if (name == "flip_horizontal") { arity(1); return flip_horizontal(inputs[0]); }
  if (name == "shift2d") { arity(1); return shift2d(inputs[0], attrs.get_int("dy", 0), attrs.get_int("dx", 0)); }
  if (name == "pad_replicate") { arity(1); return pad_replicate(inputs[0], attrs.get_int("pad", 0)); }
  if (name == "matmul") { arity(2); return matmul(inputs[0], inputs[1]); }
  if (name == "stop_gradient") { arity(1); return stop_gradient(inputs[0]); }
  if (name == "conv2d") {
    arity(3);
    return conv2d(inputs[0], inputs[1], inputs[2], attrs.get_int("stride", 1),
                  attrs.get_int("dilation", 1));
  }
  if (name == "avg_pool") { arity(1); return avg_pool(inputs[0], attrs.get_int("factor", 2)); }
  if (name == "max_pool") { arity(1); return max_pool(inputs[0], attrs.get_int("factor", 2)); }
  if (name == "resize_nearest") {
    arity(1);
    return resize_nearest(inputs[0], attrs.get_int("oh", inputs[0].dim(0)),
                          attrs.get_int("ow", inputs[0].dim(1)));
  }
  if (name == "resize_bilinear") {
    arity(1);
    return resize_bilinear(inputs[0], attrs.get_int("oh", inputs[0].dim(0)),
                           attrs.get_int("ow", inputs[0].dim(1)));
  }
  if (name == "warp_bilinear") {
    arity(2);
    return warp_bilinear(inputs[0], inputs[1],
                         attrs.get_int("zero_border", 0) ? WarpBorder::kZero
                                                         : WarpBorder::kClamp,
                         attrs.get_int("offset", 0));
  }
  if (name == "corr_volume") {
    arity(2);
    return corr_volume(inputs[0], inputs[1], attrs.get_int("radius", 4));
  }
  if (name == "normalize_l2") { arity(1); return normalize_l2(inputs[0]); }
  if (name == "adaptive_gumbel_softmax") {
    arity(1);
    auto map = split_sampling_map(inputs[0], MapRole::kCapG);
    return adaptive_gumbel_softmax(map, static_cast<T>(attrs.get("rho", 0.01)));
  }
  if (name == "cap_pool") {
    arity(2);
    return cap_pool(inputs[0], inputs[1], attrs.get_int("r", 2));
  }
  if (name == "cap_pool_normalized") {
    arity(2);
    return cap_pool_normalized(inputs[0], inputs[1], attrs.get_int("r", 2));
  }
  if (name == "afu_upsample") {
    arity(2);
    return afu_upsample(inputs[0], inputs[1], attrs.get_int("r", 2),
                        attrs.get_int("scale_values", 0) != 0);
  }
  if (name == "bilinear_upsample") {
    arity(1);
    return bilinear_upsample(inputs[0], attrs.get_int("r", 2),
                             attrs.get_int("scale_values", 0) != 0);
  }
  throw UnsupportedOpError("unsupported op '" + name + "'");
}

}  // namespace apsflow
