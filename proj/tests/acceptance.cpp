// Acceptance suite: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "abm/num/gradcheck.hpp"
#include "abm/run.hpp"

using namespace abm;
using num::NormMode;
namespace fs = std::filesystem;

namespace {

constexpr int kSkipCode = 77;

struct Outcome {
  bool pass = false;
  bool skipped = false;
  std::string detail;
  nlohmann::json data = nlohmann::json::object();
};

struct Context {
  fs::path work_dir;
  fs::path data_dir;
  std::optional<fs::path> omniglot_dir;
  std::size_t threads = 1;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ull;
  return h;
}

std::uint64_t fingerprint(const Dataset& d) {
  std::uint64_t h = fnv1a(&d.height, sizeof d.height);
  for (const auto& c : d.classes) {
    h = fnv1a(c.name.data(), c.name.size(), h);
    for (const auto& img : c.images) h = fnv1a(img.data(), img.size() * sizeof(float), h);
  }
  return h;
}

struct Trained {
  Checkpoint best;
  Metrics validation;
  bool cached = false;
  double seconds = 0.0;
};

// Trains once per (configs, data) and reuses the checkpoint from the work
// directory afterwards; training is deterministic so the cache is exact.
Trained train_cached(const Context& ctx, const std::string& name, const ModelConfig& model, const TrainConfig& train_cfg,
                     const Dataset& train_set, const Dataset& val_set) {
  const std::string key_text = to_json(model).dump() + to_json(train_cfg).dump() +
                               std::to_string(fingerprint(train_set)) + std::to_string(fingerprint(val_set));
  const std::string key = std::to_string(fnv1a(key_text.data(), key_text.size()));
  const fs::path path = ctx.work_dir / (name + ".abm");
  if (fs::exists(path)) {
    try {
      Checkpoint c = load_checkpoint(path);
      if (c.metadata.value("cache_key", std::string()) == key) {
        Trained t;
        t.best = std::move(c);
        t.cached = true;
        t.validation.accuracy = t.best.metadata.value("val_accuracy", 0.0);
        t.validation.f1 = t.best.metadata.value("val_f1", 0.0);
        t.seconds = t.best.metadata.value("train_seconds", 0.0);
        return t;
      }
    } catch (const Error&) {
    }
  }
  const auto t0 = Clock::now();
  std::cerr << "  training " << name << " (" << train_cfg.epochs * train_cfg.episodes_per_epoch << " episodes)\n";
  TrainResult r = train(model, train_cfg, train_set, val_set, [&](const EpochLog& e) {
    std::cerr << "    " << to_json(e, model.self_weight() > 0).dump() << '\n';
  });
  Trained t;
  t.best = std::move(r.best);
  t.validation = r.best_validation;
  t.seconds = seconds_since(t0);
  t.best.metadata["cache_key"] = key;
  t.best.metadata["train_seconds"] = t.seconds;
  fs::create_directories(ctx.work_dir);
  save_checkpoint(t.best, path);
  return t;
}

// 1. Gradient oracle

Outcome criterion_gradient(const Context&) {
  const auto t0 = Clock::now();
  SyntheticSpec spec;
  spec.seed = 101;
  spec.classes = 4;
  spec.images_per_class = 4;
  spec.size = 8;
  const Dataset data = make_synthetic(spec);
  ModelConfig cfg;
  cfg.encoder.height = cfg.encoder.width = 8;
  cfg.encoder.block_channels = {4, 6};
  cfg.method = Method::abm_selfreg;
  cfg.head.lambda = 1.0;
  cfg.test_fraction = 0.25;
  cfg.reference_fraction = 0.5;
  auto model = Model<double>::build(cfg, 7);
  model.tau().mutable_value()[0] = -0.2;
  model.log_scale().mutable_value()[0] = std::log(4.0);
  const Episode episode = sample_episode(data, {2, 1, 2, true}, 31);
  const auto params = model.parameters();
  num::GradCheckOptions opts;
  opts.coordinates = 120;
  opts.seed = 5;
  const auto report = num::grad_check(
      [&] { return episode_loss(model, episode, NormMode::batch, 17).loss; }, params, opts);
  const double elapsed = seconds_since(t0);
  Outcome o;
  o.pass = report.checked >= 50 && report.max_relative_error < 1e-4 && elapsed < 60.0;
  o.detail = "max rel. error " + sci(report.max_relative_error) + " over " +
             std::to_string(report.checked) + " coordinates (" + std::to_string(report.skipped_kinks) +
             " kink-crossing skipped), required < 1e-4 on >= 50 in < 60 s; " + fmt(elapsed, 1) + " s";
  o.data = {{"max_relative_error", report.max_relative_error}, {"checked", report.checked}, {"seconds", elapsed}};
  return o;
}

// 2. Alignment oracle

double brute_force_min(const CostMatrix& c) {
  std::vector<std::size_t> cols(c.cols);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  // Injective row -> column maps: permutations of all columns, first `rows` used.
  do {
    double total = 0.0;
    for (std::size_t r = 0; r < c.rows; ++r) total += c.at(r, cols[r]);
    best = std::min(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

Outcome criterion_alignment_oracle(const Context&) {
  const auto t0 = Clock::now();
  Rng rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 7);
  std::uniform_real_distribution<float> value(-1.0f, 1.0f);
  std::uniform_int_distribution<int> level(-4, 4);
  std::size_t hungarian_ok = 0, greedy_ok = 0;
  const std::size_t trials = 200;
  for (std::size_t t = 0; t < trials; ++t) {
    CostMatrix c;
    c.cols = dim(rng);
    c.rows = std::uniform_int_distribution<std::size_t>(1, c.cols)(rng);
    c.costs.resize(c.rows * c.cols);
    // Odd trials use a coarse grid so that ties occur.
    for (float& v : c.costs) v = t % 2 ? static_cast<float>(level(rng)) / 4.0f : value(rng);
    c.row_pixels.resize(c.rows);
    c.col_pixels.resize(c.cols);
    std::iota(c.row_pixels.begin(), c.row_pixels.end(), std::size_t{0});
    std::iota(c.col_pixels.begin(), c.col_pixels.end(), std::size_t{0});

    const AlignmentResult h = hungarian_align(c, Aggregation::sum);
    hungarian_ok += h.zeta == brute_force_min(c);

    const AlignmentResult g = greedy_align(c, Aggregation::sum);
    bool rows_ok = true;
    for (std::size_t r = 0; r < c.rows; ++r) {
      float m = c.at(r, 0);
      for (std::size_t j = 1; j < c.cols; ++j) m = std::min(m, c.at(r, j));
      rows_ok = rows_ok && g.row_costs[r] == static_cast<double>(m);
    }
    greedy_ok += rows_ok;
  }
  const double elapsed = seconds_since(t0);
  Outcome o;
  o.pass = hungarian_ok == trials && greedy_ok == trials && elapsed < 10.0;
  o.detail = "hungarian == exhaustive minimum on " + std::to_string(hungarian_ok) + "/" + std::to_string(trials) +
             ", greedy row minima exact on " + std::to_string(greedy_ok) + "/" + std::to_string(trials) +
             " (up to 7x7); " + fmt(elapsed, 2) + " s, limit 10 s";
  o.data = {{"hungarian_exact", hungarian_ok}, {"greedy_exact", greedy_ok}, {"trials", trials}, {"seconds", elapsed}};
  return o;
}

// 3. Self-alignment invariant

Outcome criterion_self_alignment(const Context&) {
  const auto t0 = Clock::now();
  std::size_t ok = 0, pixels_checked = 0;
  double worst = 0.0;
  const std::size_t trials = 100;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(3, t));
    EncoderConfig ec;
    // Masks keep the full-resolution block: coarser blocks alone are
    // upsampled and give neighbouring pixels identical hypercolumns.
    if (t % 4 == 1) ec.layer_mask = {1, 2 + (t / 4) % 3};
    if (t % 4 == 2) ec.unit_norm_layers = true;
    if (t % 4 == 3) ec.block_channels = {8, 16, 16, 16};
    Encoder<float> enc = Encoder<float>::build(ec, rng);
    std::vector<float> image(ec.height * ec.width);
    std::uniform_real_distribution<float> pix(0.0f, 1.0f);
    for (float& v : image) v = pix(rng);
    AlignOptions opts;
    opts.self_alignment = true;
    opts.mode = NormMode::batch;
    opts.method = t % 2 ? Aligner::hungarian : Aligner::greedy;
    const AlignOutput out = align_images(image, image, enc, enc, opts, rng);
    bool identity = true;
    for (std::size_t r = 0; r < out.cost.rows; ++r) {
      const std::size_t own = out.cost.row_pixels[r];
      identity = identity && out.cost.col_pixels[out.result.columns[r]] == own;
      const auto probs = match_probabilities(out.cost.row(r));
      const std::size_t arg = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      identity = identity && out.cost.col_pixels[arg] == own;
      ++pixels_checked;
    }
    const double err = std::abs(out.result.zeta + 1.0);
    worst = std::max(worst, err);
    ok += identity && err <= 1e-4;
  }
  Outcome o;
  o.pass = ok == trials;
  o.detail = std::to_string(ok) + "/" + std::to_string(trials) +
             " random encoder/image pairs give zeta = -1 within 1e-4 with identity argmax (worst |zeta+1| " +
             sci(worst) + ", " + std::to_string(pixels_checked) + " sampled pixels); " + fmt(seconds_since(t0), 1) + " s";
  o.data = {{"passing_pairs", ok}, {"worst_abs_error", worst}, {"pixels", pixels_checked}};
  return o;
}

// 4. Normalization suite

Outcome criterion_normalization(const Context&) {
  Rng rng(4);
  std::uniform_real_distribution<double> z(-1.5, 1.5), logscale(std::log(0.01), std::log(100.0));
  std::uniform_int_distribution<std::size_t> n(1, 20), width(1, 784);
  double worst = 0.0;
  bool nonneg = true, rule = true;
  std::size_t calls = 0, rule_checks = 0;
  auto sum_check = [&](const std::vector<double>& p) {
    double s = 0.0;
    for (double v : p) {
      s += v;
      nonneg = nonneg && v >= 0.0;
    }
    worst = std::max(worst, std::abs(s - 1.0));
    ++calls;
  };
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> zetas(n(rng));
    for (double& v : zetas) v = z(rng);
    const double scale = std::exp(logscale(rng));
    const OpenSetHead head{z(rng), scale};
    sum_check(abm_posterior(zetas, scale).probabilities);
    const LabelPosterior open = openmax_posterior(zetas, head);
    sum_check(open.probabilities);
    const double min_z = *std::min_element(zetas.begin(), zetas.end());
    rule = rule && ((open.predicted == 0) == (min_z > head.tau));
    ++rule_checks;
    std::vector<float> costs(width(rng));
    for (float& v : costs) v = static_cast<float>(z(rng));
    sum_check(match_probabilities(costs));
    std::vector<double> dcosts(costs.begin(), costs.end());
    sum_check(match_probabilities(dcosts));
  }
  // Exhaustive grid including exact ties between tau and zeta.
  const double grid[] = {-1.0, -0.5, 0.0, 0.5, 1.0};
  for (std::size_t len = 1; len <= 3; ++len) {
    std::vector<std::size_t> idx(len, 0);
    while (true) {
      std::vector<double> zetas(len);
      for (std::size_t i = 0; i < len; ++i) zetas[i] = grid[idx[i]];
      for (double tau : grid) {
        for (double scale : {0.5, 10.0}) {
          const LabelPosterior p = openmax_posterior(zetas, {tau, scale});
          sum_check(p.probabilities);
          const double min_z = *std::min_element(zetas.begin(), zetas.end());
          rule = rule && ((p.predicted == 0) == (min_z > tau));
          ++rule_checks;
        }
      }
      std::size_t k = 0;
      while (k < len && ++idx[k] == std::size(grid)) idx[k++] = 0;
      if (k == len) break;
    }
  }
  Outcome o;
  o.pass = worst <= 1e-6 && nonneg && rule;
  o.detail = std::to_string(calls) + " distributions, max |sum - 1| = " + sci(worst) +
             " (limit 1e-6), all non-negative: " + (nonneg ? "yes" : "no") + "; open <=> min zeta > tau on " +
             std::to_string(rule_checks) + " inputs: " + (rule ? "holds" : "violated");
  o.data = {{"calls", calls}, {"max_sum_error", worst}, {"rule_holds", rule}, {"rule_checks", rule_checks}};
  return o;
}

// Shared MNIST protocol: classes 0-4 train, 5-9 split into validation and
// test image halves.

struct MnistSplits {
  Splits parts;
};

MnistSplits load_mnist(const Context& ctx) {
  const Dataset all = load_idx(ctx.data_dir / "mnist");
  SplitSpec spec;
  spec.train = std::vector<std::size_t>{0, 1, 2, 3, 4};
  spec.validation = std::vector<std::size_t>{5, 6, 7, 8, 9};
  spec.test = spec.validation;
  return {split_classes(all, spec, 1)};
}

TrainConfig mnist_budget(bool open_set) {
  TrainConfig t;
  t.episodes_per_epoch = 500;
  t.epochs = 10;  // 5,000 training episodes
  t.batch_size = 8;
  t.learning_rate = 1e-3;
  t.weight_decay = 1e-4;
  t.lr_decay = 1e-6;
  t.validation_episodes = 200;
  t.test_episodes = 1000;
  t.task = {5, 1, 1, open_set};
  t.seed = 2018;
  return t;
}

ModelConfig mnist_model(Method method) {
  ModelConfig m;
  m.method = method;
  return m;
}

constexpr std::uint64_t kTestSeed = 90210;

// 5. One-shot MNIST

Outcome criterion_mnist_one_shot(const Context& ctx) {
  const auto t0 = Clock::now();
  const MnistSplits d = load_mnist(ctx);
  const TrainConfig budget = mnist_budget(false);
  const Trained sr = train_cached(ctx, "mnist_abm_selfreg", mnist_model(Method::abm_selfreg), budget, d.parts.train,
                                  d.parts.validation);
  const Trained plain =
      train_cached(ctx, "mnist_abm", mnist_model(Method::abm), budget, d.parts.train, d.parts.validation);
  const Metrics msr =
      evaluate(restore_model(sr.best), d.parts.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const Metrics mab =
      evaluate(restore_model(plain.best), d.parts.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const double margin = mab.accuracy - 2.0 * msr.ci95;
  const double elapsed = seconds_since(t0) + (sr.cached ? sr.seconds : 0.0) + (plain.cached ? plain.seconds : 0.0);
  Outcome o;
  o.pass = msr.accuracy >= 0.60 && msr.accuracy >= margin && elapsed <= 3600.0;
  o.detail = "ABM+SelfReg " + fmt(msr.accuracy) + " +- " + fmt(msr.ci95) + ", ABM " + fmt(mab.accuracy) + " +- " +
             fmt(mab.ci95) + " (5-way 1-shot, classes 5-9, 1000 episodes); required >= 0.60 and >= ABM - 2 CI = " +
             fmt(margin) + "; " + fmt(elapsed, 0) + " s incl. training, limit 3600 s";
  o.data = {{"abm_selfreg", to_json(msr)}, {"abm", to_json(mab)}, {"seconds", elapsed}};
  return o;
}

// Omniglot data (optional): image-dirs tree resampled to 28x28.

Dataset resample(const Dataset& d, std::size_t size) {
  if (d.height == size && d.width == size) return d;
  Dataset out = d;
  out.height = out.width = size;
  const double sy = static_cast<double>(d.height) / size, sx = static_cast<double>(d.width) / size;
  for (auto& c : out.classes) {
    for (auto& img : c.images) {
      std::vector<float> r(d.channels * size * size, 0.0f);
      const std::vector<float> src = img;
      for (std::size_t ch = 0; ch < d.channels; ++ch) {
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            // Area average over the source footprint.
            const double y0 = y * sy, y1 = (y + 1) * sy, x0 = x * sx, x1 = (x + 1) * sx;
            double acc = 0.0, wsum = 0.0;
            for (std::size_t yy = static_cast<std::size_t>(y0); yy < std::min<double>(std::ceil(y1), d.height); ++yy) {
              const double wy = std::min<double>(yy + 1, y1) - std::max<double>(yy, y0);
              for (std::size_t xx = static_cast<std::size_t>(x0); xx < std::min<double>(std::ceil(x1), d.width);
                   ++xx) {
                const double w = wy * (std::min<double>(xx + 1, x1) - std::max<double>(xx, x0));
                acc += w * src[(ch * d.height + yy) * d.width + xx];
                wsum += w;
              }
            }
            r[(ch * size + y) * size + x] = static_cast<float>(acc / wsum);
          }
        }
      }
      img = std::move(r);
    }
  }
  return out;
}

std::optional<Dataset> load_omniglot(const Context& ctx) {
  if (!ctx.omniglot_dir || !fs::is_directory(*ctx.omniglot_dir)) return std::nullopt;
  Dataset d = load_image_dirs(*ctx.omniglot_dir);
  if (d.channels != 1) {
    for (auto& c : d.classes) {
      for (auto& img : c.images) {
        std::vector<float> g(d.height * d.width);
        for (std::size_t p = 0; p < g.size(); ++p) g[p] = img[p];
        img = std::move(g);
      }
    }
    d.channels = 1;
  }
  // Omniglot strokes are dark on white; the encoder sees ink as high values.
  for (auto& c : d.classes)
    for (auto& img : c.images)
      for (float& v : img) v = 1.0f - v;
  return resample(d, 28);
}

Splits omniglot_splits(const Dataset& d) {
  SplitSpec spec;
  spec.train_count = 50;
  spec.validation_count = 10;
  spec.test_count = 10;
  Splits s = split_classes(d, spec, 6);
  s.train = augment_rotations(s.train);
  return s;
}

TrainConfig omniglot_budget() {
  TrainConfig t = mnist_budget(false);
  t.seed = 2019;
  return t;
}

// 6. One-shot Omniglot

Outcome criterion_omniglot(const Context& ctx) {
  const auto t0 = Clock::now();
  const auto data = load_omniglot(ctx);
  Outcome o;
  if (!data) {
    o.skipped = true;
    o.detail = "Omniglot not present (looked in " + (ctx.omniglot_dir ? ctx.omniglot_dir->string() : "<unset>") +
               "); criterion not run, counted as not passed";
    return o;
  }
  const Splits s = omniglot_splits(*data);
  const TrainConfig budget = omniglot_budget();
  const Trained m =
      train_cached(ctx, "omniglot_abm_selfreg", mnist_model(Method::abm_selfreg), budget, s.train, s.validation);
  const Metrics r = evaluate(restore_model(m.best), s.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const double elapsed = seconds_since(t0) + (m.cached ? m.seconds : 0.0);
  o.pass = r.accuracy >= 0.75 && elapsed <= 3600.0;
  o.detail = "ABM+SelfReg " + fmt(r.accuracy) + " +- " + fmt(r.ci95) +
             " (5-way 1-shot, 10 held-out classes, 1000 episodes); required >= 0.75; " + fmt(elapsed, 0) + " s";
  o.data = {{"abm_selfreg", to_json(r)}, {"seconds", elapsed}};
  return o;
}

// 7. Open-set MNIST, N = 5

Outcome criterion_mnist_open_set(const Context& ctx) {
  const auto t0 = Clock::now();
  const MnistSplits d = load_mnist(ctx);
  const TrainConfig budget = mnist_budget(true);
  const Trained sr = train_cached(ctx, "mnist_open_abm_selfreg", mnist_model(Method::abm_selfreg), budget,
                                  d.parts.train, d.parts.validation);
  const Trained base = train_cached(ctx, "mnist_open_baseline", mnist_model(Method::baseline), budget, d.parts.train,
                                    d.parts.validation);
  const Metrics msr =
      evaluate(restore_model(sr.best), d.parts.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const Metrics mb =
      evaluate(restore_model(base.best), d.parts.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const double elapsed = seconds_since(t0) + (sr.cached ? sr.seconds : 0.0) + (base.cached ? base.seconds : 0.0);
  Outcome o;
  o.pass = msr.accuracy >= 0.50 && msr.f1 > 0.0 && msr.f1 >= mb.f1;
  o.detail = "ABM+SelfReg accuracy " + fmt(msr.accuracy) + ", F1 " + fmt(msr.f1) + "; baseline accuracy " +
             fmt(mb.accuracy) + ", F1 " + fmt(mb.f1) +
             " (|L| = 5 with 4 supported classes, 1000 episodes); required accuracy >= 0.50, F1 > 0 and >= baseline F1; " +
             fmt(elapsed, 0) + " s";
  o.data = {{"abm_selfreg", to_json(msr)}, {"baseline", to_json(mb)}, {"seconds", elapsed}};
  return o;
}

// 8. Layer-mask ablation

Outcome criterion_layer_mask(const Context& ctx) {
  const auto t0 = Clock::now();
  std::string source;
  Dataset eval_set;
  Trained m;
  if (const auto omni = load_omniglot(ctx)) {
    const Splits s = omniglot_splits(*omni);
    m = train_cached(ctx, "omniglot_abm_selfreg", mnist_model(Method::abm_selfreg), omniglot_budget(), s.train,
                     s.validation);
    eval_set = s.test;
    source = "Omniglot-trained model";
  } else {
    SyntheticSpec spec;
    spec.seed = 8;
    spec.classes = 70;
    spec.images_per_class = 20;
    spec.size = 28;
    SplitSpec split;
    split.train_count = 50;
    split.validation_count = 10;
    split.test_count = 10;
    Splits s = split_classes(make_synthetic(spec), split, 8);
    s.train = augment_rotations(s.train);
    TrainConfig t = mnist_budget(false);
    t.epochs = 4;  // 2,000 episodes
    t.seed = 88;
    m = train_cached(ctx, "synthetic_abm_selfreg", mnist_model(Method::abm_selfreg), t, s.train, s.validation);
    eval_set = s.test;
    source = "synthetic-glyph surrogate (Omniglot absent): 50 base classes, rotation-augmented";
  }
  const Model<float> model = restore_model(m.best);
  const EncoderConfig& ec = model.config().encoder;
  const std::size_t blocks = ec.block_channels.size();
  const std::vector<std::size_t> coarse{blocks - 1};
  std::vector<std::size_t> all(blocks);
  std::iota(all.begin(), all.end(), std::size_t{0});

  const std::size_t pixels = ec.height * ec.width;
  std::vector<std::size_t> every(pixels);
  std::iota(every.begin(), every.end(), std::size_t{0});
  const PixelSample full{ec.height, ec.width, every, 1.0};
  std::size_t coarse_higher = 0, points = 0;
  double h_coarse = 0.0, h_all = 0.0;
  Rng rng(808);
  // 100 points: 10 test images x 10 uniformly sampled pixels each.
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& cls = eval_set.classes[i % eval_set.classes.size()];
    const auto& img = cls.images[(i / eval_set.classes.size()) % cls.images.size()];
    const std::span<const float> one[] = {img};
    const auto batch = image_batch<float>(one, ec.channels, ec.height, ec.width);
    const auto f_all = split_fields<float>(model.test_encoder().infer(batch, model.config().eval_norm, all).hypercolumn.value())[0];
    const auto f_coarse =
        split_fields<float>(model.test_encoder().infer(batch, model.config().eval_norm, coarse).hypercolumn.value())[0];
    PixelSample sample{ec.height, ec.width, {}, 10.0 / pixels};
    std::sample(every.begin(), every.end(), std::back_inserter(sample.indices), 10, rng);
    const CostMatrix c_all = cost_matrix(f_all, f_all, sample, full);
    const CostMatrix c_coarse = cost_matrix(f_coarse, f_coarse, sample, full);
    for (std::size_t r = 0; r < sample.indices.size(); ++r) {
      const double hc = entropy(match_probabilities(c_coarse.row(r)));
      const double ha = entropy(match_probabilities(c_all.row(r)));
      coarse_higher += hc > ha;
      h_coarse += hc;
      h_all += ha;
      ++points;
    }
  }
  const double fraction = static_cast<double>(coarse_higher) / points;
  Outcome o;
  o.pass = fraction >= 0.80;
  o.detail = "coarsest-layer-only entropy exceeds all-layers entropy on " + std::to_string(coarse_higher) + "/" +
             std::to_string(points) + " self-alignment points (required >= 80%); mean entropy coarse " +
             fmt(h_coarse / points) + " vs all " + fmt(h_all / points) + " nats (uniform " +
             fmt(std::log(static_cast<double>(pixels))) + "); " + source + "; " +
             fmt(seconds_since(t0), 0) + " s";
  o.data = {{"coarse_higher", coarse_higher}, {"points", points}, {"source", source},
            {"mean_entropy_coarse", h_coarse / points}, {"mean_entropy_all", h_all / points}};
  return o;
}

// 9. Runtime scaling of align_images

Outcome criterion_performance(const Context&) {
  Rng rng(9);
  EncoderConfig ec;
  Encoder<float> enc = Encoder<float>::build(ec, rng);
  std::vector<std::vector<float>> images(8, std::vector<float>(ec.height * ec.width));
  std::uniform_real_distribution<float> pix(0.0f, 1.0f);
  for (auto& img : images)
    for (float& v : img) v = pix(rng);
  auto run = [&](double fraction, std::size_t rep) {
    AlignOptions opts;
    opts.test_fraction = fraction;
    opts.reference_fraction = 0.20;
    opts.mode = NormMode::batch;
    Rng r(derive_seed(99, rep));
    const auto t0 = Clock::now();
    const AlignOutput out = align_images(images[rep % 8], images[(rep + 1) % 8], enc, enc, opts, r);
    const double s = seconds_since(t0);
    if (!std::isfinite(out.result.zeta)) fail(ErrorCode::numeric, "non-finite zeta");
    return s;
  };
  for (std::size_t w = 0; w < 5; ++w) {
    run(0.10, w);
    run(0.20, w);
  }
  std::vector<double> low, high;
  // Interleaved so that drift affects both settings equally.
  for (std::size_t rep = 0; rep < 100; ++rep) {
    low.push_back(run(0.10, rep));
    high.push_back(run(0.20, rep));
  }
  const double t_low = std::accumulate(low.begin(), low.end(), 0.0);
  const double t_high = std::accumulate(high.begin(), high.end(), 0.0);
  const double ratio = t_high / t_low;
  Outcome o;
  o.pass = ratio <= 2.5;
  o.detail = "align_images wall time at test fraction 0.20 / 0.10 = " + fmt(ratio, 3) + " (" +
             fmt(1e3 * t_high / 100, 3) + " ms vs " + fmt(1e3 * t_low / 100, 3) +
             " ms mean over 100 repetitions); required <= 2.5";
  o.data = {{"ratio", ratio}, {"mean_ms_low", 1e3 * t_low / 100}, {"mean_ms_high", 1e3 * t_high / 100}};
  return o;
}

// 10. Checkpoint round trip

Outcome criterion_checkpoint(const Context& ctx) {
  const MnistSplits d = load_mnist(ctx);
  const TrainConfig budget = mnist_budget(false);
  const Trained sr = train_cached(ctx, "mnist_abm_selfreg", mnist_model(Method::abm_selfreg), budget, d.parts.train,
                                  d.parts.validation);
  const Model<float> original = restore_model(sr.best);
  const Metrics before = evaluate(original, d.parts.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const fs::path path = ctx.work_dir / "roundtrip.abm";
  save_checkpoint(sr.best, path);
  const Checkpoint loaded = load_checkpoint(path);
  bool tensors_equal = loaded.tensors.size() == sr.best.tensors.size();
  for (std::size_t i = 0; tensors_equal && i < loaded.tensors.size(); ++i) {
    const auto& a = loaded.tensors[i].second.data();
    const auto& b = sr.best.tensors[i].second.data();
    tensors_equal = loaded.tensors[i].first == sr.best.tensors[i].first &&
                    std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0 && a.size() == b.size();
  }
  const Metrics after =
      evaluate(restore_model(loaded), d.parts.test, budget.task, budget.test_episodes, kTestSeed, ctx.threads);
  const bool same = before.accuracy == after.accuracy && before.accuracy_variance == after.accuracy_variance &&
                    before.ci95 == after.ci95 && before.f1 == after.f1 && before.precision == after.precision &&
                    before.recall == after.recall;
  Outcome o;
  o.pass = tensors_equal && same;
  o.detail = std::string("tensors bit-identical: ") + (tensors_equal ? "yes" : "no") +
             "; metrics before/after save-load: accuracy " + std::to_string(before.accuracy) + " / " +
             std::to_string(after.accuracy) + ", variance " + std::to_string(before.accuracy_variance) + " / " +
             std::to_string(after.accuracy_variance) + " (bit-exact: " + (same ? "yes" : "no") + ")";
  o.data = {{"tensors_equal", tensors_equal}, {"metrics_equal", same}, {"before", to_json(before)},
            {"after", to_json(after)}};
  return o;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria; prints one PASS/FAIL line per criterion", "abm_acceptance"};
  std::vector<int> selected;
  Context ctx;
  std::string work = "acceptance_work";
  std::string data = ABM_SOURCE_DIR "/data";
  std::string omniglot;
  app.add_option("-c,--criterion", selected, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--work-dir", work, "Checkpoint cache and results")->capture_default_str();
  app.add_option("--data-dir", data, "Directory holding mnist/ (and optionally omniglot/)")->capture_default_str();
  app.add_option("--omniglot", omniglot, "Omniglot image-dirs root (default: $ABM_OMNIGLOT_DIR or <data-dir>/omniglot)");
  CLI11_PARSE(app, argc, argv);

  ctx.work_dir = fs::absolute(work);
  ctx.data_dir = data;
  if (!omniglot.empty()) {
    ctx.omniglot_dir = omniglot;
  } else if (const char* env = std::getenv("ABM_OMNIGLOT_DIR"); env && *env) {
    ctx.omniglot_dir = fs::path(env);
  } else {
    ctx.omniglot_dir = ctx.data_dir / "omniglot";
  }
  ctx.threads = cap_threads(std::max(1u, std::thread::hardware_concurrency()));
  fs::create_directories(ctx.work_dir);

  const std::vector<Criterion> criteria{
      {1, "gradient oracle", criterion_gradient},
      {2, "alignment oracle", criterion_alignment_oracle},
      {3, "self-alignment invariant", criterion_self_alignment},
      {4, "normalization suite", criterion_normalization},
      {5, "MNIST one-shot", criterion_mnist_one_shot},
      {6, "Omniglot one-shot", criterion_omniglot},
      {7, "MNIST open-set N=5", criterion_mnist_open_set},
      {8, "layer-mask ablation", criterion_layer_mask},
      {9, "alignment runtime scaling", criterion_performance},
      {10, "checkpoint round trip", criterion_checkpoint},
  };
  if (selected.empty())
    for (const auto& c : criteria) selected.push_back(c.id);

  bool all_pass = true, any_skipped = false;
  for (const auto& c : criteria) {
    if (std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    const char* verdict = o.pass ? "PASS" : o.skipped ? "FAIL (not run)" : "FAIL";
    std::cout << "criterion " << c.id << " [" << c.title << "]: " << verdict << " | " << o.detail << std::endl;
    all_pass = all_pass && o.pass;
    any_skipped = any_skipped || o.skipped;
    nlohmann::json record{{"criterion", c.id}, {"title", c.title}, {"pass", o.pass}, {"skipped", o.skipped},
                          {"detail", o.detail}, {"data", o.data}};
    std::ofstream(ctx.work_dir / ("criterion_" + std::to_string(c.id) + ".json")) << record.dump(2) << '\n';
  }
  if (all_pass) return 0;
  // A criterion that could not run (missing data) is reported to ctest as
  // skipped rather than failed; every other failure fails the run.
  if (any_skipped && selected.size() == 1) return kSkipCode;
  return 1;
}
