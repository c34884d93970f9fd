// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskinv/harness.hpp"
#include "maskinv/manifest.hpp"
#include "maskinv/maskops.hpp"
#include "maskinv/model.hpp"
#include "maskinv/png_io.hpp"

namespace maskinv::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

int thread_count() {
  const char* env = std::getenv("MASKINV_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  if (v < 1) {
    throw ArgumentError("MASKINV_THREADS must be a positive integer");
  }
  return v;
}

struct CommonOptions {
  std::string model_path;
  std::string config_path;
  std::string precision = "single";
};

struct InversionOptions {
  int steps = 10;
  double alpha = 0.0;
  double learning_rate = 0.1;
  double epsilon = 1e-6;
  std::string grad_path = "vanilla";
};

void add_common_flags(CLI::App* sub, CommonOptions& opt) {
  sub->add_option("--model", opt.model_path, "weight container path")
      ->required();
  sub->add_option("--config", opt.config_path, "model config JSON path")
      ->required();
  sub->add_option("--precision", opt.precision, "arithmetic precision")
      ->check(CLI::IsMember({"single", "double"}));
}

void add_inversion_flags(CLI::App* sub, InversionOptions& opt) {
  sub->add_option("--steps", opt.steps, "optimization steps")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--alpha", opt.alpha, "class-token regularizer weight")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--lr", opt.learning_rate, "AdamW learning rate");
  sub->add_option("--epsilon", opt.epsilon, "Dice smoothing epsilon");
  sub->add_option("--grad-path", opt.grad_path, "gradient computation path")
      ->check(CLI::IsMember({"vanilla", "decomposed"}));
}

InversionConfig to_inversion_config(const InversionOptions& opt) {
  InversionConfig cfg;
  cfg.steps = opt.steps;
  cfg.alpha = opt.alpha;
  cfg.learning_rate = opt.learning_rate;
  cfg.epsilon = opt.epsilon;
  cfg.grad_path = opt.grad_path == "decomposed" ? GradPath::decomposed
                                                : GradPath::vanilla;
  return cfg;
}

template <class S>
Model<S> load_cli_model(const CommonOptions& opt) {
  const ModelConfig cfg = load_model_config(opt.config_path);
  return load_model<S>(opt.model_path, cfg);
}

// Masks are binary at the model's input resolution; anything else is
// rejected up front with both sizes in the message.
template <class S>
QueryMask load_cli_mask(const std::string& path, const Model<S>& model) {
  const int side = model.config().image_size;
  return load_mask(path, side, side);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << text;
  if (!out) throw LoadError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// invert
// ---------------------------------------------------------------------------

struct InvertOptions {
  CommonOptions common;
  InversionOptions inv;
  std::string image_path;
  std::vector<std::string> mask_paths;
  std::string out_path;
};

template <class S>
json embedding_record(const std::string& image_path,
                      const std::string& mask_id,
                      const LocalizedEmbedding<S>& emb) {
  json rec;
  rec["image"] = image_path;
  rec["mask"] = mask_id;
  rec["dim"] = emb.vector.size();
  rec["degenerate"] = emb.degenerate;
  json trace = json::array();
  for (const auto& step : emb.loss_trace) {
    trace.push_back({{"dice", static_cast<double>(step[0])},
                     {"reg", static_cast<double>(step[1])},
                     {"total", static_cast<double>(step[2])}});
  }
  rec["trace"] = std::move(trace);
  json vec = json::array();
  for (Index i = 0; i < emb.vector.size(); ++i) {
    vec.push_back(static_cast<double>(emb.vector(i)));
  }
  rec["embedding"] = std::move(vec);
  return rec;
}

template <class S>
int run_invert(const InvertOptions& opt) {
  const Model<S> model = load_cli_model<S>(opt.common);
  const RgbImage image = read_png_rgb(opt.image_path);
  const ImageTensor<S> input = preprocess<S>(image, model.config());

  std::vector<QueryMask> masks;
  masks.reserve(opt.mask_paths.size());
  for (const auto& path : opt.mask_paths) {
    masks.push_back(load_cli_mask(path, model));
  }
  const auto results = mask_inversion_batch(
      model, input, masks, to_inversion_config(opt.inv), thread_count());

  std::ostringstream out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    out << embedding_record(opt.image_path, opt.mask_paths[i], results[i])
               .dump()
        << "\n";
  }
  write_text(opt.out_path, out.str());
  return 0;
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

struct ExplainOptions {
  CommonOptions common;
  InversionOptions inv;
  std::string image_path;
  std::vector<std::string> mask_paths;
  std::string out_dir;
  bool per_step = false;
};

template <class S>
GrayImage map_to_image(const ExplainabilityMap<S>& map) {
  const int g = static_cast<int>(map.grid.rows());
  GrayImage img(g, g);
  for (int y = 0; y < g; ++y) {
    for (int x = 0; x < g; ++x) {
      const double v = static_cast<double>(map.grid(y, x));
      img.at(x, y) = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

std::string step_name(int step) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "step_%03d.png", step);
  return buf;
}

template <class S>
int run_explain(const ExplainOptions& opt) {
  const Model<S> model = load_cli_model<S>(opt.common);
  const RgbImage image = read_png_rgb(opt.image_path);
  const ImageTensor<S> input = preprocess<S>(image, model.config());
  const auto acts = encode(model, input);
  const InversionConfig cfg = to_inversion_config(opt.inv);

  fs::create_directories(opt.out_dir);
  const bool single = opt.mask_paths.size() == 1;
  for (std::size_t m = 0; m < opt.mask_paths.size(); ++m) {
    const QueryMask mask = load_cli_mask(opt.mask_paths[m], model);
    const std::string prefix =
        single ? std::string() : "mask" + std::to_string(m) + "_";
    StepCallback<S> on_step;
    if (opt.per_step) {
      on_step = [&](int step, const ExplainabilityMap<S>& map) {
        const fs::path file = fs::path(opt.out_dir) / (prefix + step_name(step));
        write_png_gray(file.string(), map_to_image(map));
      };
    }
    const auto result = mask_inversion(model, acts, mask, cfg, on_step);
    if (!opt.per_step) {
      const fs::path file = fs::path(opt.out_dir) / (prefix + "map.png");
      write_png_gray(file.string(), map_to_image(result.final_map));
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateOptions {
  CommonOptions common;
  InversionOptions inv;
  std::string manifest_path;
  std::string bank_path;
  std::string task = "auto";
  std::vector<int> ks{1, 5};
  std::string out_path;
};

// Manifest paths resolve relative to the manifest file's directory.
std::string resolve_path(const std::string& manifest_path,
                         const std::string& ref) {
  const fs::path p(ref);
  if (p.is_absolute()) return ref;
  return (fs::path(manifest_path).parent_path() / p).string();
}

template <class S>
int run_evaluate(const EvaluateOptions& opt) {
  const Model<S> model = load_cli_model<S>(opt.common);
  const Manifest manifest = load_manifest(opt.manifest_path);
  const TextBank bank = load_text_bank(opt.bank_path);
  const InversionConfig cfg = to_inversion_config(opt.inv);
  const int threads = thread_count();
  const int side = model.config().image_size;

  std::vector<LabeledEmbedding<S>> labeled;
  std::vector<ReferringExpression> expressions;
  std::vector<ReferringCandidate<S>> candidates;

  for (std::size_t i = 0; i < manifest.images.size(); ++i) {
    const ManifestImage& entry = manifest.images[i];
    const RgbImage image =
        read_png_rgb(resolve_path(opt.manifest_path, entry.path));
    const ImageTensor<S> input = preprocess<S>(image, model.config());

    std::vector<QueryMask> masks;
    std::vector<std::string> scoped_ids;
    for (const ManifestMask& mq : entry.masks) {
      QueryMask mask =
          mq.has_box
              ? box_to_mask(mq.box, side, side)
              : load_mask(resolve_path(opt.manifest_path, mq.path), side, side);
      masks.push_back(std::move(mask));
      scoped_ids.push_back(std::to_string(i) + ":" + mq.id);
    }
    const auto results =
        mask_inversion_batch(model, input, masks, cfg, threads);

    for (std::size_t m = 0; m < entry.masks.size(); ++m) {
      const ManifestMask& mq = entry.masks[m];
      if (!mq.label.empty()) {
        labeled.push_back({scoped_ids[m], mq.label, results[m].vector});
      }
      if (!mq.expression_id.empty()) {
        const Eigen::VectorXd* text = bank.find(mq.expression_id);
        if (text == nullptr) {
          throw DataError("expression '" + mq.expression_id +
                          "' is not in the text bank");
        }
        ReferringExpression expr;
        expr.id = scoped_ids[m];
        expr.embedding = *text;
        expr.truth_mask_id = scoped_ids[m];
        expr.candidate_ids = scoped_ids;
        expressions.push_back(std::move(expr));
      }
      candidates.push_back({scoped_ids[m], results[m].vector, masks[m]});
    }
  }

  std::string task = opt.task;
  if (task == "auto") {
    if (!labeled.empty() && !expressions.empty()) {
      throw ArgumentError(
          "manifest mixes labels and expressions; pass --task");
    }
    task = expressions.empty() ? "class" : "referring";
  }

  RetrievalReport report;
  if (task == "class") {
    if (labeled.empty()) throw DataError("manifest has no labeled masks");
    report = class_retrieval(labeled, bank, opt.ks);
  } else {
    if (expressions.empty()) {
      throw DataError("manifest has no referring expressions");
    }
    report = referring_retrieval(expressions, candidates, opt.ks);
  }
  write_text(opt.out_path, report_to_json(report));
  std::cout << render_report_table(report);
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOptions {
  CommonOptions common;
  std::string image_path;
  std::vector<int> counts{5, 10, 50, 100};
  int steps = 10;
  int repeats = 3;
  std::uint64_t mask_seed = 1234;
  std::string out_path;
};

template <class S>
int run_bench(const BenchOptions& opt) {
  const Model<S> model = load_cli_model<S>(opt.common);
  const RgbImage image = read_png_rgb(opt.image_path);
  const ImageTensor<S> input = preprocess<S>(image, model.config());
  const auto rows = bench_decomposition(model, input, opt.counts, opt.steps,
                                        opt.repeats, opt.mask_seed);
  if (!opt.out_path.empty()) write_text(opt.out_path, bench_to_json(rows));
  std::cout << render_bench_table(rows);
  return 0;
}

// ---------------------------------------------------------------------------
// fixture
// ---------------------------------------------------------------------------

struct FixtureOptions {
  std::string out_dir;
  std::uint64_t seed = 7;
  int images = 24;
  int classes = 6;
};

std::string zero_pad(int value, int width) {
  std::string s = std::to_string(value);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

// Writes a complete desk-scale dataset: toy model, config, images, masks,
// manifest (labels and expression ids both filled) and the text bank.
int run_fixture(const FixtureOptions& opt) {
  FixtureSpec spec;
  spec.num_images = opt.images;
  spec.num_classes = opt.classes;
  const Fixture<double> fx = synth_fixture<double>(opt.seed, spec);

  const fs::path root(opt.out_dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  save_model_config((root / "config.json").string(), spec.model);
  save_model((root / "model.st").string(), fx.model);
  save_text_bank((root / "bank.json").string(), fx.bank);

  Manifest manifest;
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    const std::string stem = "img" + zero_pad(static_cast<int>(i), 3);
    const std::string image_rel = "images/" + stem + ".png";
    write_png_rgb((root / image_rel).string(), fx.images[i]);

    ManifestImage entry;
    entry.path = image_rel;
    for (std::size_t r = 0; r < fx.regions[i].size(); ++r) {
      const FixtureRegion& region = fx.regions[i][r];
      const std::string mask_rel =
          "masks/" + stem + "_r" + std::to_string(r) + ".png";
      save_mask((root / mask_rel).string(), region.mask);

      ManifestMask mq;
      mq.id = stem + "_r" + std::to_string(r);
      mq.path = mask_rel;
      mq.label = region.label;
      mq.expression_id = region.label;
      entry.masks.push_back(std::move(mq));
    }
    manifest.images.push_back(std::move(entry));
  }
  save_manifest((root / "manifest.json").string(), manifest);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"region embeddings from a frozen encoder via mask inversion"};
  app.require_subcommand(1);

  InvertOptions invert_opt;
  CLI::App* invert = app.add_subcommand(
      "invert", "optimize one embedding per query mask, write JSON lines");
  add_common_flags(invert, invert_opt.common);
  add_inversion_flags(invert, invert_opt.inv);
  invert->add_option("--image", invert_opt.image_path, "input image PNG")
      ->required();
  invert->add_option("--mask", invert_opt.mask_paths, "query mask PNG")
      ->required();
  invert->add_option("--out", invert_opt.out_path, "output JSONL path")
      ->required();

  ExplainOptions explain_opt;
  CLI::App* explain = app.add_subcommand(
      "explain", "write explainability maps as grayscale PNGs");
  add_common_flags(explain, explain_opt.common);
  add_inversion_flags(explain, explain_opt.inv);
  explain->add_option("--image", explain_opt.image_path, "input image PNG")
      ->required();
  explain->add_option("--mask", explain_opt.mask_paths, "query mask PNG")
      ->required();
  explain->add_option("--out-dir", explain_opt.out_dir, "output directory")
      ->required();
  explain->add_flag("--per-step", explain_opt.per_step,
                    "one map per optimization step");

  EvaluateOptions eval_opt;
  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "score a dataset manifest against a text bank");
  add_common_flags(evaluate, eval_opt.common);
  add_inversion_flags(evaluate, eval_opt.inv);
  evaluate->add_option("--manifest", eval_opt.manifest_path, "manifest JSON")
      ->required();
  evaluate->add_option("--bank", eval_opt.bank_path, "text bank JSON")
      ->required();
  evaluate->add_option("--task", eval_opt.task, "retrieval task")
      ->check(CLI::IsMember({"auto", "class", "referring"}));
  evaluate->add_option("--ks", eval_opt.ks, "accuracy cutoffs");
  evaluate->add_option("--out", eval_opt.out_path, "report JSON path")
      ->required();

  BenchOptions bench_opt;
  CLI::App* bench = app.add_subcommand(
      "bench", "time the two gradient paths over growing mask counts");
  add_common_flags(bench, bench_opt.common);
  bench->add_option("--image", bench_opt.image_path, "input image PNG")
      ->required();
  bench->add_option("--counts", bench_opt.counts, "mask counts");
  bench->add_option("--steps", bench_opt.steps, "optimization steps")
      ->check(CLI::NonNegativeNumber);
  bench->add_option("--repeats", bench_opt.repeats, "timing repeats")
      ->check(CLI::PositiveNumber);
  bench->add_option("--mask-seed", bench_opt.mask_seed, "query mask seed");
  bench->add_option("--out", bench_opt.out_path, "timing table JSON path");

  FixtureOptions fixture_opt;
  CLI::App* fixture = app.add_subcommand(
      "fixture", "generate the synthetic rectangle dataset");
  fixture->add_option("--out-dir", fixture_opt.out_dir, "output directory")
      ->required();
  fixture->add_option("--seed", fixture_opt.seed, "generation seed");
  fixture->add_option("--images", fixture_opt.images, "image count")
      ->check(CLI::PositiveNumber);
  fixture->add_option("--classes", fixture_opt.classes, "color class count");

  try {
    std::vector<std::string> full = args;
    full.insert(full.begin(), "maskinv");
    std::vector<char*> argv;
    argv.reserve(full.size());
    for (auto& s : full) argv.push_back(s.data());
    app.parse(static_cast<int>(argv.size()), argv.data());

    const bool dbl = invert_opt.common.precision == "double" ||
                     explain_opt.common.precision == "double" ||
                     eval_opt.common.precision == "double" ||
                     bench_opt.common.precision == "double";
    if (app.got_subcommand(invert)) {
      return dbl ? run_invert<double>(invert_opt) : run_invert<float>(invert_opt);
    }
    if (app.got_subcommand(explain)) {
      return dbl ? run_explain<double>(explain_opt)
                 : run_explain<float>(explain_opt);
    }
    if (app.got_subcommand(evaluate)) {
      return dbl ? run_evaluate<double>(eval_opt)
                 : run_evaluate<float>(eval_opt);
    }
    if (app.got_subcommand(bench)) {
      return dbl ? run_bench<double>(bench_opt) : run_bench<float>(bench_opt);
    }
    if (app.got_subcommand(fixture)) {
      return run_fixture(fixture_opt);
    }
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace maskinv::cli
