// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "maskinv/bicubic.hpp"
#include "maskinv/container.hpp"
#include "maskinv/errors.hpp"
#include "maskinv/types.hpp"

namespace maskinv {

struct PreprocessConfig {
  std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> stddev{0.26862954, 0.26130258, 0.27577711};
};

struct ModelConfig {
  int layers = 0;
  int heads = 0;
  int width = 0;
  int joint_dim = 0;
  int patch_size = 0;
  int image_size = 0;
  double mlp_ratio = 4.0;
  double layernorm_eps = 1e-5;
  PreprocessConfig preprocess;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return 1 + grid() * grid(); }
  int head_dim() const { return width / heads; }
  int mlp_width() const {
    return static_cast<int>(std::lround(mlp_ratio * width));
  }
  int patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    if (layers < 1 || heads < 1 || width < 1 || joint_dim < 1 ||
        patch_size < 1 || image_size < 1) {
      throw ArgumentError("model config: all dimensions must be positive");
    }
    if (image_size % patch_size != 0) {
      throw ArgumentError("model config: image_size must be divisible by patch_size");
    }
    if (width % heads != 0) {
      throw ArgumentError("model config: width must be divisible by heads");
    }
    if (mlp_width() < 1) {
      throw ArgumentError("model config: mlp_ratio * width must be at least 1");
    }
    if (!(layernorm_eps > 0.0)) {
      throw ArgumentError("model config: layernorm_eps must be positive");
    }
  }
};

// JSON round trip for the config file format.
ModelConfig load_model_config(const std::string& path);
void save_model_config(const std::string& path, const ModelConfig& cfg);

// Linear weights follow the [out, in] convention: y = x * W^T + b for row x.
// The fused qkv weight stacks the query, key and value projections in that
// order along the output axis.
template <class S>
struct BlockWeights {
  Vec<S> ln1_w, ln1_b;
  Mat<S> qkv_w;  // 3*width x width
  Vec<S> qkv_b;  // 3*width
  Mat<S> out_w;  // width x width
  Vec<S> out_b;  // width
  Vec<S> ln2_w, ln2_b;
  Mat<S> fc1_w;  // mlp_width x width
  Vec<S> fc1_b;  // mlp_width
  Mat<S> fc2_w;  // width x mlp_width
  Vec<S> fc2_b;  // width
};

namespace detail {
inline std::uint64_t next_weight_uid() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace detail

// The uid identifies the weight block instance; cached activations carry it so
// that a replay against a different model is rejected. Copies get a fresh uid.
template <class S>
struct WeightSet {
  Mat<S> patch_w;  // width x 3*patch*patch, kernel flattened channel-major
  Vec<S> patch_b;  // width
  Vec<S> cls;      // width
  Mat<S> pos;      // tokens x width, row 0 is the class-token position
  std::vector<BlockWeights<S>> blocks;
  Vec<S> lnf_w, lnf_b;
  Mat<S> proj;  // width x joint_dim, applied as tokens * proj, no bias
  std::uint64_t uid = detail::next_weight_uid();

  WeightSet() = default;
  WeightSet(const WeightSet& other)
      : patch_w(other.patch_w), patch_b(other.patch_b), cls(other.cls),
        pos(other.pos), blocks(other.blocks), lnf_w(other.lnf_w),
        lnf_b(other.lnf_b), proj(other.proj), uid(detail::next_weight_uid()) {}
  WeightSet(WeightSet&& other) noexcept
      : patch_w(std::move(other.patch_w)), patch_b(std::move(other.patch_b)),
        cls(std::move(other.cls)), pos(std::move(other.pos)),
        blocks(std::move(other.blocks)), lnf_w(std::move(other.lnf_w)),
        lnf_b(std::move(other.lnf_b)), proj(std::move(other.proj)),
        uid(detail::next_weight_uid()) {}
  WeightSet& operator=(const WeightSet&) = delete;
  WeightSet& operator=(WeightSet&&) = delete;
};

namespace detail {

template <class S>
void check_shape(const char* key, const Mat<S>& m, Index rows, Index cols) {
  if (m.rows() != rows || m.cols() != cols) {
    throw LoadError("weight '" + std::string(key) + "': expected shape [" +
                    std::to_string(rows) + ", " + std::to_string(cols) +
                    "], got [" + std::to_string(m.rows()) + ", " +
                    std::to_string(m.cols()) + "]");
  }
}

template <class S>
void check_shape(const char* key, const Vec<S>& v, Index size) {
  if (v.size() != size) {
    throw LoadError("weight '" + std::string(key) + "': expected " +
                    std::to_string(size) + " values, got " +
                    std::to_string(v.size()));
  }
}

// Patch-position rows resampled between square grids with bicubic
// interpolation; the class-token row passes through unchanged.
template <class S>
Mat<S> resample_pos_rows(const Mat<S>& pos, int grid_old, int grid_new) {
  const Index width = pos.cols();
  Mat<S> out(1 + static_cast<Index>(grid_new) * grid_new, width);
  out.row(0) = pos.row(0);
  Mat<S> plane(grid_old, grid_old);
  for (Index c = 0; c < width; ++c) {
    for (int gy = 0; gy < grid_old; ++gy) {
      for (int gx = 0; gx < grid_old; ++gx) {
        plane(gy, gx) = pos(1 + gy * grid_old + gx, c);
      }
    }
    Mat<S> re = bicubic_resample(plane, grid_new, grid_new, true);
    for (int gy = 0; gy < grid_new; ++gy) {
      for (int gx = 0; gx < grid_new; ++gx) {
        out(1 + gy * grid_new + gx, c) = re(gy, gx);
      }
    }
  }
  return out;
}

}  // namespace detail

template <class S>
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, WeightSet<S> weights)
      : config_(std::move(cfg)),
        weights_(std::make_shared<WeightSet<S>>(std::move(weights))) {
    config_.validate();
    validate_weights();
  }

  const ModelConfig& config() const { return config_; }
  const WeightSet<S>& weights() const { return *weights_; }
  std::uint64_t uid() const { return weights_ ? weights_->uid : 0; }
  bool empty() const { return !weights_; }

 private:
  void validate_weights() const {
    const ModelConfig& c = config_;
    const WeightSet<S>& w = *weights_;
    detail::check_shape("patch_embed.weight", w.patch_w, c.width, c.patch_dim());
    detail::check_shape("patch_embed.bias", w.patch_b, c.width);
    detail::check_shape("cls_token", w.cls, c.width);
    detail::check_shape("pos_embed", w.pos, c.tokens(), c.width);
    if (static_cast<int>(w.blocks.size()) != c.layers) {
      throw LoadError("expected " + std::to_string(c.layers) +
                      " transformer blocks, got " +
                      std::to_string(w.blocks.size()));
    }
    for (int i = 0; i < c.layers; ++i) {
      const auto& b = w.blocks[static_cast<std::size_t>(i)];
      const std::string p = "blocks." + std::to_string(i) + ".";
      detail::check_shape((p + "ln1.weight").c_str(), b.ln1_w, c.width);
      detail::check_shape((p + "ln1.bias").c_str(), b.ln1_b, c.width);
      detail::check_shape((p + "attn.qkv.weight").c_str(), b.qkv_w, 3 * c.width,
                          c.width);
      detail::check_shape((p + "attn.qkv.bias").c_str(), b.qkv_b, 3 * c.width);
      detail::check_shape((p + "attn.out.weight").c_str(), b.out_w, c.width,
                          c.width);
      detail::check_shape((p + "attn.out.bias").c_str(), b.out_b, c.width);
      detail::check_shape((p + "ln2.weight").c_str(), b.ln2_w, c.width);
      detail::check_shape((p + "ln2.bias").c_str(), b.ln2_b, c.width);
      detail::check_shape((p + "mlp.fc1.weight").c_str(), b.fc1_w,
                          c.mlp_width(), c.width);
      detail::check_shape((p + "mlp.fc1.bias").c_str(), b.fc1_b, c.mlp_width());
      detail::check_shape((p + "mlp.fc2.weight").c_str(), b.fc2_w, c.width,
                          c.mlp_width());
      detail::check_shape((p + "mlp.fc2.bias").c_str(), b.fc2_b, c.width);
    }
    detail::check_shape("ln_final.weight", w.lnf_w, c.width);
    detail::check_shape("ln_final.bias", w.lnf_b, c.width);
    detail::check_shape("proj", w.proj, c.width, c.joint_dim);
  }

  ModelConfig config_;
  std::shared_ptr<const WeightSet<S>> weights_;
};

namespace detail {

template <class S>
Mat<S> tensor_to_mat(const std::string& key, const NamedTensor& t) {
  if (t.shape.size() != 2) {
    throw LoadError("weight '" + key + "': expected a rank-2 tensor, got rank " +
                    std::to_string(t.shape.size()));
  }
  Mat<S> m(static_cast<Index>(t.shape[0]), static_cast<Index>(t.shape[1]));
  for (Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<S>(t.values[static_cast<std::size_t>(i)]);
  }
  return m;
}

template <class S>
Vec<S> tensor_to_vec(const std::string& key, const NamedTensor& t) {
  if (t.shape.size() != 1) {
    throw LoadError("weight '" + key + "': expected a rank-1 tensor, got rank " +
                    std::to_string(t.shape.size()));
  }
  Vec<S> v(static_cast<Index>(t.shape[0]));
  for (Index i = 0; i < v.size(); ++i) {
    v(i) = static_cast<S>(t.values[static_cast<std::size_t>(i)]);
  }
  return v;
}

inline const NamedTensor& require_tensor(const TensorMap& tensors,
                                         const std::string& key) {
  auto it = tensors.find(key);
  if (it == tensors.end()) {
    throw LoadError("weight container is missing key '" + key + "'");
  }
  return it->second;
}

template <class S>
NamedTensor mat_to_tensor(const Mat<S>& m) {
  NamedTensor t;
  t.shape = {static_cast<std::int64_t>(m.rows()),
             static_cast<std::int64_t>(m.cols())};
  t.values.resize(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) {
    t.values[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  }
  return t;
}

template <class S>
NamedTensor vec_to_tensor(const Vec<S>& v) {
  NamedTensor t;
  t.shape = {static_cast<std::int64_t>(v.size())};
  t.values.resize(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) {
    t.values[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
  }
  return t;
}

}  // namespace detail

// Builds a model from container tensors. When resample_pos is set, a
// positional embedding for a different square grid is accepted and resampled
// to the configured grid; otherwise its shape must match the config exactly.
template <class S>
Model<S> model_from_tensors(const ModelConfig& cfg, const TensorMap& tensors,
                            bool resample_pos = false) {
  cfg.validate();
  WeightSet<S> w;
  w.patch_w = detail::tensor_to_mat<S>(
      "patch_embed.weight", detail::require_tensor(tensors, "patch_embed.weight"));
  w.patch_b = detail::tensor_to_vec<S>(
      "patch_embed.bias", detail::require_tensor(tensors, "patch_embed.bias"));
  w.cls = detail::tensor_to_vec<S>("cls_token",
                                   detail::require_tensor(tensors, "cls_token"));
  w.pos = detail::tensor_to_mat<S>("pos_embed",
                                   detail::require_tensor(tensors, "pos_embed"));
  w.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) {
    auto& b = w.blocks[static_cast<std::size_t>(i)];
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto mat = [&](const char* suffix) {
      const std::string key = p + suffix;
      return detail::tensor_to_mat<S>(key, detail::require_tensor(tensors, key));
    };
    auto vec = [&](const char* suffix) {
      const std::string key = p + suffix;
      return detail::tensor_to_vec<S>(key, detail::require_tensor(tensors, key));
    };
    b.ln1_w = vec("ln1.weight");
    b.ln1_b = vec("ln1.bias");
    b.qkv_w = mat("attn.qkv.weight");
    b.qkv_b = vec("attn.qkv.bias");
    b.out_w = mat("attn.out.weight");
    b.out_b = vec("attn.out.bias");
    b.ln2_w = vec("ln2.weight");
    b.ln2_b = vec("ln2.bias");
    b.fc1_w = mat("mlp.fc1.weight");
    b.fc1_b = vec("mlp.fc1.bias");
    b.fc2_w = mat("mlp.fc2.weight");
    b.fc2_b = vec("mlp.fc2.bias");
  }
  w.lnf_w = detail::tensor_to_vec<S>(
      "ln_final.weight", detail::require_tensor(tensors, "ln_final.weight"));
  w.lnf_b = detail::tensor_to_vec<S>(
      "ln_final.bias", detail::require_tensor(tensors, "ln_final.bias"));
  w.proj = detail::tensor_to_mat<S>("proj",
                                    detail::require_tensor(tensors, "proj"));

  if (w.pos.rows() != cfg.tokens() && w.pos.cols() == cfg.width) {
    const auto patches = w.pos.rows() - 1;
    const auto grid_old =
        static_cast<int>(std::lround(std::sqrt(static_cast<double>(patches))));
    const bool square =
        patches > 0 && static_cast<Index>(grid_old) * grid_old == patches;
    if (square && resample_pos) {
      w.pos = detail::resample_pos_rows(w.pos, grid_old, cfg.grid());
    } else if (square) {
      throw LoadError(
          "weight 'pos_embed': container holds a " + std::to_string(grid_old) +
          "x" + std::to_string(grid_old) + " grid but the config requires " +
          std::to_string(cfg.grid()) + "x" + std::to_string(cfg.grid()) +
          "; pass resample_pos to convert");
    }
  }
  return Model<S>(cfg, std::move(w));
}

template <class S>
Model<S> load_model(const std::string& path, const ModelConfig& cfg,
                    bool resample_pos = false) {
  return model_from_tensors<S>(cfg, read_tensor_container(path), resample_pos);
}

template <class S>
TensorMap model_to_tensors(const Model<S>& model) {
  const WeightSet<S>& w = model.weights();
  TensorMap t;
  t["patch_embed.weight"] = detail::mat_to_tensor(w.patch_w);
  t["patch_embed.bias"] = detail::vec_to_tensor(w.patch_b);
  t["cls_token"] = detail::vec_to_tensor(w.cls);
  t["pos_embed"] = detail::mat_to_tensor(w.pos);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& b = w.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    t[p + "ln1.weight"] = detail::vec_to_tensor(b.ln1_w);
    t[p + "ln1.bias"] = detail::vec_to_tensor(b.ln1_b);
    t[p + "attn.qkv.weight"] = detail::mat_to_tensor(b.qkv_w);
    t[p + "attn.qkv.bias"] = detail::vec_to_tensor(b.qkv_b);
    t[p + "attn.out.weight"] = detail::mat_to_tensor(b.out_w);
    t[p + "attn.out.bias"] = detail::vec_to_tensor(b.out_b);
    t[p + "ln2.weight"] = detail::vec_to_tensor(b.ln2_w);
    t[p + "ln2.bias"] = detail::vec_to_tensor(b.ln2_b);
    t[p + "mlp.fc1.weight"] = detail::mat_to_tensor(b.fc1_w);
    t[p + "mlp.fc1.bias"] = detail::vec_to_tensor(b.fc1_b);
    t[p + "mlp.fc2.weight"] = detail::mat_to_tensor(b.fc2_w);
    t[p + "mlp.fc2.bias"] = detail::vec_to_tensor(b.fc2_b);
  }
  t["ln_final.weight"] = detail::vec_to_tensor(w.lnf_w);
  t["ln_final.bias"] = detail::vec_to_tensor(w.lnf_b);
  t["proj"] = detail::mat_to_tensor(w.proj);
  return t;
}

template <class S>
void save_model(const std::string& path, const Model<S>& model) {
  write_tensor_container(path, model_to_tensors(model));
}

// Returns a model accepting new_image_size inputs: the patch-position rows of
// the embedding are bicubically resampled to the new grid. The input model is
// untouched.
template <class S>
Model<S> resample_pos_embed(const Model<S>& model, int new_image_size) {
  const ModelConfig& old_cfg = model.config();
  if (new_image_size < 1 || new_image_size % old_cfg.patch_size != 0) {
    throw ArgumentError(
        "resample_pos_embed: new image size must be a positive multiple of "
        "patch_size " +
        std::to_string(old_cfg.patch_size));
  }
  ModelConfig cfg = old_cfg;
  cfg.image_size = new_image_size;
  WeightSet<S> w(model.weights());  // copy, fresh uid
  w.pos = detail::resample_pos_rows(w.pos, old_cfg.grid(), cfg.grid());
  return Model<S>(cfg, std::move(w));
}

// Converts an 8-bit RGB image to the model input tensor: bicubic resize to
// image_size (pixel-center mapping), scale to [0,1], then per-channel
// mean/stddev normalization.
template <class S>
ImageTensor<S> preprocess(const RgbImage& image, const ModelConfig& cfg) {
  if (image.width < 1 || image.height < 1) {
    throw ArgumentError("preprocess: empty image");
  }
  const int side = cfg.image_size;
  ImageTensor<S> out(side);
  for (int c = 0; c < 3; ++c) {
    Mat<S> plane(image.height, image.width);
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        plane(y, x) = static_cast<S>(image.at(x, y, c) / 255.0);
      }
    }
    if (image.width != side || image.height != side) {
      plane = bicubic_resample(plane, side, side, false);
    }
    const S mean = static_cast<S>(cfg.preprocess.mean[static_cast<std::size_t>(c)]);
    const S stddev =
        static_cast<S>(cfg.preprocess.stddev[static_cast<std::size_t>(c)]);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        out.at(c, y, x) = (plane(y, x) - mean) / stddev;
      }
    }
  }
  return out;
}

}  // namespace maskinv
