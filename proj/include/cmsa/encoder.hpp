#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cmsa/ops.hpp"
#include "cmsa/optim.hpp"
#include "cmsa/rng.hpp"

namespace cmsa {

/// Three visual feature maps sharing one spatial resolution.
template <class T>
struct LevelFeatures {
  std::array<Tensor<T>, 3> levels;  // [C_vi x H x W]
};

struct EncoderConfig {
  std::array<std::size_t, 3> channels{32, 64, 96};
  std::size_t stride = 8;  // three stride-2 stem convolutions
};

struct ConvLayerSpec {
  std::size_t in, out, stride, dilation;
};

/// Small dilated backbone: a stride-8 stem (three stride-2 3x3 convs) and
/// three blocks of two 3x3 convs with dilation 1, 2, 4. Each block's output
/// is one level; every conv is followed by a per-channel bias and ReLU.
template <class T>
class VisualEncoder {
 public:
  VisualEncoder() = default;

  VisualEncoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.stride != 8) throw ConfigError("visual encoder supports output stride 8 only");
    if (!(cfg.channels[0] <= cfg.channels[1] && cfg.channels[1] <= cfg.channels[2]) || cfg.channels[0] == 0)
      throw ConfigError("encoder channels must be positive and non-decreasing");
    const auto c = cfg.channels;
    specs_ = {{3, c[0], 2, 1},    {c[0], c[0], 2, 1}, {c[0], c[0], 2, 1},  // stem
              {c[0], c[0], 1, 1}, {c[0], c[0], 1, 1},                      // block 1
              {c[0], c[1], 1, 2}, {c[1], c[1], 1, 2},                      // block 2
              {c[1], c[2], 1, 4}, {c[2], c[2], 1, 4}};                     // block 3
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      const double bound = std::sqrt(6.0 / double(s.in * 9));
      const std::string name = "encoder.conv" + std::to_string(i);
      weights_.push_back(store.add(name + ".weight", uniform_tensor<T>({s.out, s.in, 3, 3}, -bound, bound, rng)));
      biases_.push_back(store.add(name + ".bias", Tensor<T>::zeros({s.out, 1, 1})));
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  /// image: [3 x H x W] with values in [0, 1]; H and W multiples of the stride.
  LevelFeatures<T> encode(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) throw InputError("encode_image: expected a [3 x H x W] image");
    if (image.dim(1) % cfg_.stride != 0 || image.dim(2) % cfg_.stride != 0)
      throw InputError("encode_image: image size " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                       " is not a multiple of the output stride " + std::to_string(cfg_.stride));
    LevelFeatures<T> out;
    Tensor<T> x = image;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      ConvOptions opt{specs_[i].stride, specs_[i].dilation, true};
      x = relu(add(conv2d(x, weights_[i], opt), biases_[i]));
      if (i == 4) out.levels[0] = x;
      if (i == 6) out.levels[1] = x;
      if (i == 8) out.levels[2] = x;
    }
    return out;
  }

 private:
  EncoderConfig cfg_;
  std::vector<ConvLayerSpec> specs_;
  std::vector<Tensor<T>> weights_, biases_;
};

}  // namespace cmsa
