// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "maskinv/encoder.hpp"
#include "maskinv/errors.hpp"
#include "maskinv/inversion.hpp"
#include "maskinv/maskops.hpp"
#include "maskinv/model.hpp"
#include "maskinv/types.hpp"

namespace maskinv {

// Pixel-level intersection over union. Two empty masks are identical, so
// their overlap counts as perfect.
inline double iou(const QueryMask& a, const QueryMask& b) {
  if (a.pixels.width != b.pixels.width || a.pixels.height != b.pixels.height) {
    throw ArgumentError("iou: mask dimensions differ");
  }
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.data.size(); ++i) {
    const bool pa = a.pixels.data[i] != 0;
    const bool pb = b.pixels.data[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Named reference embeddings ranked against query embeddings by cosine.
struct TextBank {
  std::vector<std::pair<std::string, Eigen::VectorXd>> entries;

  const Eigen::VectorXd* find(const std::string& label) const {
    for (const auto& [name, vec] : entries) {
      if (name == label) return &vec;
    }
    return nullptr;
  }
  int index_of(const std::string& label) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first == label) return static_cast<int>(i);
    }
    return -1;
  }
};

struct RetrievalPerItem {
  std::string query;
  int rank = 0;       // 1-based rank of the ground truth, 0 means unranked
  double iou = 0.0;   // meaningful for the referring task only
};

struct RetrievalReport {
  std::string task;
  std::map<int, double> acc_at;
  double miou = 0.0;
  double oiou = 0.0;
  std::vector<RetrievalPerItem> per_item;
};

namespace detail {

// 1-based rank of entry `truth` under descending score; ties resolve in
// favor of the earlier index.
inline int rank_of(const std::vector<double>& scores, int truth) {
  int rank = 1;
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (i == truth) continue;
    if (scores[static_cast<std::size_t>(i)] >
            scores[static_cast<std::size_t>(truth)] ||
        (scores[static_cast<std::size_t>(i)] ==
             scores[static_cast<std::size_t>(truth)] &&
         i < truth)) {
      ++rank;
    }
  }
  return rank;
}

inline double cosine_d(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

inline void fill_acc(RetrievalReport& report, const std::vector<int>& ks,
                     const std::vector<int>& ranks) {
  for (int k : ks) {
    int hits = 0;
    for (int r : ranks) hits += r > 0 && r <= k;
    report.acc_at[k] = ranks.empty()
                           ? 0.0
                           : static_cast<double>(hits) /
                                 static_cast<double>(ranks.size());
  }
}

}  // namespace detail

template <class S>
struct LabeledEmbedding {
  std::string query;  // identifier for the report
  std::string label;  // ground-truth bank label
  Vec<S> embedding;
};

// Ranks each embedding against the bank by cosine and scores Acc@k for the
// ground-truth label.
template <class S>
RetrievalReport class_retrieval(const std::vector<LabeledEmbedding<S>>& items,
                                const TextBank& bank,
                                const std::vector<int>& ks) {
  RetrievalReport report;
  report.task = "class";
  std::vector<int> ranks;
  ranks.reserve(items.size());
  for (const auto& item : items) {
    const int truth = bank.index_of(item.label);
    if (truth < 0) {
      throw DataError("label '" + item.label + "' is not in the text bank");
    }
    RetrievalPerItem per;
    per.query = item.query;
    if (item.embedding.size() > 0) {
      Eigen::VectorXd q = item.embedding.template cast<double>();
      std::vector<double> scores;
      scores.reserve(bank.entries.size());
      for (const auto& [name, vec] : bank.entries) {
        scores.push_back(detail::cosine_d(q, vec));
      }
      per.rank = detail::rank_of(scores, truth);
    }
    ranks.push_back(per.rank);
    report.per_item.push_back(std::move(per));
  }
  detail::fill_acc(report, ks, ranks);
  return report;
}

struct ReferringExpression {
  std::string id;
  Eigen::VectorXd embedding;
  std::string truth_mask_id;
  std::vector<std::string> candidate_ids;  // empty means the full pool
};

template <class S>
struct ReferringCandidate {
  std::string mask_id;
  Vec<S> embedding;
  QueryMask mask;
};

// For each expression, ranks its candidate masks by embedding cosine; Acc@k
// scores the true mask's rank, mIoU averages the top-1 overlap per
// expression and oIoU pools intersections and unions over all expressions.
template <class S>
RetrievalReport referring_retrieval(
    const std::vector<ReferringExpression>& expressions,
    const std::vector<ReferringCandidate<S>>& candidates,
    const std::vector<int>& ks) {
  RetrievalReport report;
  report.task = "referring";
  std::map<std::string, int> by_id;
  for (int i = 0; i < static_cast<int>(candidates.size()); ++i) {
    by_id[candidates[static_cast<std::size_t>(i)].mask_id] = i;
  }

  std::vector<int> ranks;
  ranks.reserve(expressions.size());
  double iou_sum = 0.0;
  long long pooled_inter = 0, pooled_union = 0;
  for (const auto& expr : expressions) {
    std::vector<int> pool;
    if (expr.candidate_ids.empty()) {
      pool.resize(candidates.size());
      std::iota(pool.begin(), pool.end(), 0);
    } else {
      for (const auto& id : expr.candidate_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) {
          throw DataError("candidate mask '" + id + "' is unknown");
        }
        pool.push_back(it->second);
      }
    }
    auto truth_it = by_id.find(expr.truth_mask_id);
    if (truth_it == by_id.end()) {
      throw DataError("ground-truth mask '" + expr.truth_mask_id +
                      "' is unknown");
    }
    int truth_pos = -1;
    std::vector<double> scores;
    scores.reserve(pool.size());
    for (int p = 0; p < static_cast<int>(pool.size()); ++p) {
      const auto& cand = candidates[static_cast<std::size_t>(
          pool[static_cast<std::size_t>(p)])];
      if (cand.mask_id == expr.truth_mask_id) truth_pos = p;
      scores.push_back(detail::cosine_d(
          expr.embedding, cand.embedding.template cast<double>()));
    }
    if (truth_pos < 0) {
      throw DataError("expression '" + expr.id +
                      "' does not list its ground-truth mask as a candidate");
    }
    const int rank = detail::rank_of(scores, truth_pos);
    ranks.push_back(rank);

    int best = 0;
    for (int p = 1; p < static_cast<int>(scores.size()); ++p) {
      if (scores[static_cast<std::size_t>(p)] >
          scores[static_cast<std::size_t>(best)]) {
        best = p;
      }
    }
    const auto& top = candidates[static_cast<std::size_t>(
        pool[static_cast<std::size_t>(best)])];
    const auto& truth = candidates[static_cast<std::size_t>(truth_it->second)];
    const double item_iou = iou(top.mask, truth.mask);
    iou_sum += item_iou;
    for (std::size_t px = 0; px < truth.mask.pixels.data.size(); ++px) {
      const bool pa = top.mask.pixels.data[px] != 0;
      const bool pb = truth.mask.pixels.data[px] != 0;
      pooled_inter += pa && pb;
      pooled_union += pa || pb;
    }

    RetrievalPerItem per;
    per.query = expr.id;
    per.rank = rank;
    per.iou = item_iou;
    report.per_item.push_back(std::move(per));
  }
  detail::fill_acc(report, ks, ranks);
  report.miou = expressions.empty()
                    ? 0.0
                    : iou_sum / static_cast<double>(expressions.size());
  report.oiou = pooled_union == 0 ? 1.0
                                  : static_cast<double>(pooled_inter) /
                                        static_cast<double>(pooled_union);
  return report;
}

// ---------------------------------------------------------------------------
// Synthetic fixture
// ---------------------------------------------------------------------------

namespace detail {

// Deterministic draws independent of the standard library's distribution
// implementations.
inline double rand_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double rand_normal(std::mt19937_64& rng) {
  double u1 = rand_unit(rng);
  while (u1 <= 0.0) u1 = rand_unit(rng);
  const double u2 = rand_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.141592653589793 * u2);
}

inline int rand_int(std::mt19937_64& rng, int lo, int hi) {
  const int span = hi - lo + 1;
  return lo + static_cast<int>(rand_unit(rng) * span) % span;
}

// Weights are drawn as float-representable values so that container round
// trips and both precision modes see identical numbers.
template <class S>
Mat<S> random_mat(std::mt19937_64& rng, Index rows, Index cols, double sigma) {
  Mat<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    m.data()[i] =
        static_cast<S>(static_cast<float>(sigma * rand_normal(rng)));
  }
  return m;
}

template <class S>
Vec<S> random_vec(std::mt19937_64& rng, Index size, double sigma,
                  double mean = 0.0) {
  Vec<S> v(size);
  for (Index i = 0; i < size; ++i) {
    v(i) = static_cast<S>(static_cast<float>(mean + sigma * rand_normal(rng)));
  }
  return v;
}

}  // namespace detail

// Random frozen encoder with conventional initialization scales.
template <class S>
Model<S> random_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double inv_sqrt_w = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  WeightSet<S> w;
  w.patch_w = detail::random_mat<S>(
      rng, cfg.width, cfg.patch_dim(),
      1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
  w.patch_b = detail::random_vec<S>(rng, cfg.width, 0.02);
  w.cls = detail::random_vec<S>(rng, cfg.width, 0.3);
  w.pos = detail::random_mat<S>(rng, cfg.tokens(), cfg.width, 0.2);
  w.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& b : w.blocks) {
    b.ln1_w = detail::random_vec<S>(rng, cfg.width, 0.05, 1.0);
    b.ln1_b = detail::random_vec<S>(rng, cfg.width, 0.05);
    b.qkv_w = detail::random_mat<S>(rng, 3 * cfg.width, cfg.width, inv_sqrt_w);
    b.qkv_b = detail::random_vec<S>(rng, 3 * cfg.width, 0.02);
    b.out_w = detail::random_mat<S>(rng, cfg.width, cfg.width, inv_sqrt_w);
    b.out_b = detail::random_vec<S>(rng, cfg.width, 0.02);
    b.ln2_w = detail::random_vec<S>(rng, cfg.width, 0.05, 1.0);
    b.ln2_b = detail::random_vec<S>(rng, cfg.width, 0.05);
    b.fc1_w = detail::random_mat<S>(rng, cfg.mlp_width(), cfg.width, inv_sqrt_w);
    b.fc1_b = detail::random_vec<S>(rng, cfg.mlp_width(), 0.02);
    b.fc2_w = detail::random_mat<S>(
        rng, cfg.width, cfg.mlp_width(),
        1.0 / std::sqrt(static_cast<double>(cfg.mlp_width())));
    b.fc2_b = detail::random_vec<S>(rng, cfg.width, 0.02);
  }
  w.lnf_w = detail::random_vec<S>(rng, cfg.width, 0.05, 1.0);
  w.lnf_b = detail::random_vec<S>(rng, cfg.width, 0.05);
  w.proj = detail::random_mat<S>(rng, cfg.width, cfg.joint_dim, inv_sqrt_w);
  return Model<S>(cfg, std::move(w));
}

struct FixtureRegion {
  QueryMask mask;
  std::string label;
};

template <class S>
struct Fixture {
  Model<S> model;
  std::vector<RgbImage> images;
  std::vector<ImageTensor<S>> inputs;             // preprocessed images
  std::vector<std::vector<FixtureRegion>> regions;  // per image
  TextBank bank;
};

struct FixtureSpec {
  int num_images = 24;
  int regions_min = 3;
  int regions_max = 4;
  int num_classes = 6;
  ModelConfig model;

  // Single block on purpose: with more depth the random attention blends
  // every token toward the image mean and the color classes stop being
  // separable from region embeddings.
  FixtureSpec() {
    model.layers = 1;
    model.heads = 4;
    model.width = 128;
    model.joint_dim = 32;
    model.patch_size = 16;
    model.image_size = 112;
    model.mlp_ratio = 2.0;
    model.preprocess.mean = {0.5, 0.5, 0.5};
    model.preprocess.stddev = {0.5, 0.5, 0.5};
  }
};

namespace detail {

struct FixturePalette {
  std::array<const char*, 6> names{"red",    "green",   "blue",
                                   "yellow", "magenta", "cyan"};
  std::array<std::array<std::uint8_t, 3>, 6> rgb{{{230, 50, 40},
                                                  {60, 200, 70},
                                                  {50, 90, 230},
                                                  {235, 215, 50},
                                                  {210, 60, 200},
                                                  {60, 215, 215}}};
};

inline RgbImage flat_color_image(int side, std::array<std::uint8_t, 3> rgb) {
  RgbImage img(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(x, y, c) = rgb[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

}  // namespace detail

// Deterministic toy benchmark: colored rectangles on a gray background, one
// ground-truth mask and color label per rectangle. The bank entry for each
// color is the model's global embedding of a full-frame image of that color.
template <class S>
Fixture<S> synth_fixture(std::uint64_t seed, const FixtureSpec& spec = {}) {
  if (spec.num_classes < 2 || spec.num_classes > 6) {
    throw ArgumentError("synth_fixture: num_classes must lie in [2, 6]");
  }
  if (spec.regions_min < 1 || spec.regions_max < spec.regions_min ||
      spec.regions_max > 4) {
    throw ArgumentError("synth_fixture: regions per image must lie in [1, 4]");
  }
  if (spec.regions_max > spec.num_classes) {
    throw ArgumentError(
        "synth_fixture: need at least as many classes as regions per image");
  }

  Fixture<S> fx;
  fx.model = random_model<S>(spec.model, seed);
  const int side = spec.model.image_size;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  detail::FixturePalette palette;

  for (int img_idx = 0; img_idx < spec.num_images; ++img_idx) {
    RgbImage img(side, side);
    for (auto& v : img.data) v = 128;

    const int regions =
        detail::rand_int(rng, spec.regions_min, spec.regions_max);
    // Distinct colors per image, chosen by a partial shuffle.
    std::vector<int> classes(static_cast<std::size_t>(spec.num_classes));
    std::iota(classes.begin(), classes.end(), 0);
    for (int i = 0; i < regions; ++i) {
      const int j = detail::rand_int(rng, i, spec.num_classes - 1);
      std::swap(classes[static_cast<std::size_t>(i)],
                classes[static_cast<std::size_t>(j)]);
    }
    // Distinct quadrants keep the rectangles disjoint.
    std::vector<int> slots{0, 1, 2, 3};
    for (int i = 0; i < regions; ++i) {
      const int j = detail::rand_int(rng, i, 3);
      std::swap(slots[static_cast<std::size_t>(i)],
                slots[static_cast<std::size_t>(j)]);
    }

    std::vector<FixtureRegion> img_regions;
    const int half = side / 2;
    for (int r = 0; r < regions; ++r) {
      const int slot = slots[static_cast<std::size_t>(r)];
      const int ox = (slot % 2) * half;
      const int oy = (slot / 2) * half;
      const int min_side = std::max(half / 2, 8);
      const int max_side = half - 4;
      const int rw = detail::rand_int(rng, min_side, max_side);
      const int rh = detail::rand_int(rng, min_side, max_side);
      const int x0 = ox + detail::rand_int(rng, 2, half - rw - 2);
      const int y0 = oy + detail::rand_int(rng, 2, half - rh - 2);

      const int cls = classes[static_cast<std::size_t>(r)];
      const auto& rgb = palette.rgb[static_cast<std::size_t>(cls)];
      for (int y = y0; y < y0 + rh; ++y) {
        for (int x = x0; x < x0 + rw; ++x) {
          for (int c = 0; c < 3; ++c) {
            img.at(x, y, c) = rgb[static_cast<std::size_t>(c)];
          }
        }
      }
      FixtureRegion region;
      region.mask = box_to_mask(x0, y0, x0 + rw - 1, y0 + rh - 1, side, side);
      region.label = palette.names[static_cast<std::size_t>(cls)];
      img_regions.push_back(std::move(region));
    }
    fx.inputs.push_back(preprocess<S>(img, spec.model));
    fx.images.push_back(std::move(img));
    fx.regions.push_back(std::move(img_regions));
  }

  for (int cls = 0; cls < spec.num_classes; ++cls) {
    const RgbImage frame = detail::flat_color_image(
        side, palette.rgb[static_cast<std::size_t>(cls)]);
    const auto acts = encode(fx.model, preprocess<S>(frame, spec.model));
    fx.bank.entries.emplace_back(
        palette.names[static_cast<std::size_t>(cls)],
        acts.zbar.template cast<double>());
  }
  return fx;
}

// ---------------------------------------------------------------------------
// Fixture evaluation helpers
// ---------------------------------------------------------------------------

using MaskTransform = std::function<QueryMask(const QueryMask&)>;

// Runs mask inversion for every fixture region (optionally with transformed
// query masks) and scores class retrieval against the fixture bank. Masks
// that lose all foreground under the transform count as misses.
template <class S>
RetrievalReport fixture_class_eval(const Fixture<S>& fx,
                                   const InversionConfig& cfg,
                                   const std::vector<int>& ks,
                                   const MaskTransform& transform = {},
                                   int threads = 1) {
  std::vector<LabeledEmbedding<S>> items;
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    std::vector<QueryMask> masks;
    std::vector<std::size_t> region_for_mask;
    std::vector<std::size_t> dropped;
    for (std::size_t r = 0; r < fx.regions[i].size(); ++r) {
      QueryMask mask = fx.regions[i][r].mask;
      if (transform) mask = transform(mask);
      if (mask.area() == 0 ||
          resample_to_grid(mask, fx.model.config().patch_size).sum() <= 0.0) {
        dropped.push_back(r);
        continue;
      }
      masks.push_back(std::move(mask));
      region_for_mask.push_back(r);
    }
    std::vector<LocalizedEmbedding<S>> inv;
    if (!masks.empty()) {
      inv = mask_inversion_batch(fx.model, fx.inputs[i], masks, cfg, threads);
    }
    auto query_name = [&](std::size_t r) {
      return "img" + std::to_string(i) + ":" + std::to_string(r);
    };
    for (std::size_t m = 0; m < inv.size(); ++m) {
      const std::size_t r = region_for_mask[m];
      items.push_back({query_name(r), fx.regions[i][r].label,
                       std::move(inv[m].vector)});
    }
    for (std::size_t r : dropped) {
      // Unscorable query: empty embedding ranks as a miss at every k.
      items.push_back({query_name(r), fx.regions[i][r].label, Vec<S>()});
    }
  }
  return class_retrieval(items, fx.bank, ks);
}

// Baseline that ignores the mask: every region of an image is represented by
// the image's global class-token embedding.
template <class S>
RetrievalReport fixture_global_cls_eval(const Fixture<S>& fx,
                                        const std::vector<int>& ks) {
  std::vector<LabeledEmbedding<S>> items;
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    const auto acts = encode(fx.model, fx.inputs[i]);
    for (std::size_t r = 0; r < fx.regions[i].size(); ++r) {
      items.push_back({"img" + std::to_string(i) + ":" + std::to_string(r),
                       fx.regions[i][r].label, acts.cls});
    }
  }
  return class_retrieval(items, fx.bank, ks);
}

// ---------------------------------------------------------------------------
// Mask-quality sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  int radius = 0;
  double acc_clean = 0.0;
  double acc_erode = 0.0;
  double acc_dilate = 0.0;
  double acc_box = 0.0;
};

// Acc@1 of fixture class retrieval under degraded query masks, one row per
// structuring-element radius. Clean and bounding-box columns do not depend
// on the radius and repeat across rows.
template <class S>
std::vector<SweepRow> mask_quality_sweep(const Fixture<S>& fx,
                                         const std::vector<int>& radii,
                                         const InversionConfig& cfg,
                                         int threads = 1) {
  const std::vector<int> ks{1};
  const double clean = fixture_class_eval(fx, cfg, ks, {}, threads).acc_at.at(1);
  const MaskTransform to_box = [](const QueryMask& m) {
    const auto b = mask_bounds(m);
    return box_to_mask(b, m.pixels.width, m.pixels.height);
  };
  const double box = fixture_class_eval(fx, cfg, ks, to_box, threads).acc_at.at(1);

  std::vector<SweepRow> rows;
  for (int radius : radii) {
    SweepRow row;
    row.radius = radius;
    row.acc_clean = clean;
    row.acc_box = box;
    row.acc_erode =
        fixture_class_eval(
            fx, cfg, ks,
            [radius](const QueryMask& m) { return erode(m, radius); }, threads)
            .acc_at.at(1);
    row.acc_dilate =
        fixture_class_eval(
            fx, cfg, ks,
            [radius](const QueryMask& m) { return dilate(m, radius); }, threads)
            .acc_at.at(1);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Decomposition benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
  int masks = 0;
  double vanilla_seconds = 0.0;
  double decomposed_seconds = 0.0;
  double max_rel_diff = 0.0;  // embedding discrepancy between the two paths
};

namespace detail {

inline std::vector<QueryMask> bench_masks(int count, int side, int patch,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<QueryMask> masks;
  masks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int min_side = 2 * patch;
    const int max_side = std::max(min_side + 1, side / 2);
    const int w = rand_int(rng, min_side, max_side);
    const int h = rand_int(rng, min_side, max_side);
    const int x0 = rand_int(rng, 0, side - w - 1);
    const int y0 = rand_int(rng, 0, side - h - 1);
    masks.push_back(box_to_mask(x0, y0, x0 + w - 1, y0 + h - 1, side, side));
  }
  return masks;
}

template <class S>
double median_seconds(std::vector<double>& samples) {
  std::sort(samples.begin(), samples.end());
  const std::size_t mid = samples.size() / 2;
  if (samples.size() % 2 == 1) return samples[mid];
  return 0.5 * (samples[mid - 1] + samples[mid]);
}

}  // namespace detail

// Wall-clock comparison of the two gradient paths on growing mask counts.
// Runs single-threaded; reports the median over repeats plus the largest
// relative embedding discrepancy between the paths.
template <class S>
std::vector<BenchRow> bench_decomposition(const Model<S>& model,
                                          const ImageTensor<S>& image,
                                          const std::vector<int>& counts,
                                          int steps, int repeats,
                                          std::uint64_t mask_seed = 1234) {
  if (repeats < 1) throw ArgumentError("bench: repeats must be >= 1");
  InversionConfig cfg;
  cfg.steps = steps;
  cfg.record_trace = false;

  std::vector<BenchRow> rows;
  for (int count : counts) {
    const auto masks = detail::bench_masks(count, model.config().image_size,
                                           model.config().patch_size, mask_seed);
    BenchRow row;
    row.masks = count;

    std::vector<LocalizedEmbedding<S>> vanilla_result, decomposed_result;
    std::vector<double> vanilla_times, decomposed_times;
    for (int rep = 0; rep < repeats; ++rep) {
      cfg.grad_path = GradPath::vanilla;
      auto t0 = std::chrono::steady_clock::now();
      vanilla_result = mask_inversion_batch(model, image, masks, cfg, 1);
      auto t1 = std::chrono::steady_clock::now();
      vanilla_times.push_back(std::chrono::duration<double>(t1 - t0).count());

      cfg.grad_path = GradPath::decomposed;
      t0 = std::chrono::steady_clock::now();
      decomposed_result = mask_inversion_batch(model, image, masks, cfg, 1);
      t1 = std::chrono::steady_clock::now();
      decomposed_times.push_back(
          std::chrono::duration<double>(t1 - t0).count());
    }
    row.vanilla_seconds = detail::median_seconds<S>(vanilla_times);
    row.decomposed_seconds = detail::median_seconds<S>(decomposed_times);

    for (std::size_t i = 0; i < masks.size(); ++i) {
      const double denom =
          std::max({vanilla_result[i].vector.template cast<double>().norm(),
                    decomposed_result[i].vector.template cast<double>().norm(),
                    1e-30});
      const double diff = (vanilla_result[i].vector.template cast<double>() -
                           decomposed_result[i].vector.template cast<double>())
                              .norm();
      row.max_rel_diff = std::max(row.max_rel_diff, diff / denom);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace maskinv
