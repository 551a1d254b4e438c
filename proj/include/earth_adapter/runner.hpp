#pragma once

// Experiment orchestration behind the command-line tool: config-driven runs
// with resumable checkpoints, parameter sweeps, PCA export of adapter
// outputs, and the standalone frequency split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>
#include <Eigen/Dense>

#include "earth_adapter/adapter.hpp"
#include "earth_adapter/benchgen.hpp"
#include "earth_adapter/checkpoint.hpp"
#include "earth_adapter/config.hpp"
#include "earth_adapter/image_io.hpp"
#include "earth_adapter/model.hpp"
#include "earth_adapter/spectral.hpp"
#include "earth_adapter/trainer.hpp"

namespace ea::run {

namespace fs = std::filesystem;

inline std::string fmt17(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct MetricsRow {
  long step = 0;
  double l_src = std::numeric_limits<double>::quiet_NaN();
  double l_mix = std::numeric_limits<double>::quiet_NaN();
  double source_miou = 0.0;
  double target_miou = 0.0;
  std::vector<double> target_iou;
};

inline std::string metrics_header(std::size_t classes) {
  std::string h = "step,l_src,l_mix,source_miou,target_miou";
  for (std::size_t k = 0; k < classes; ++k) h += ",iou_" + std::to_string(k);
  return h;
}

inline void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows, std::size_t classes) {
  std::ofstream os(path);
  if (!os) throw io::IoError("cannot write '" + path.string() + "'");
  os << metrics_header(classes) << '\n';
  for (const auto& r : rows) {
    os << r.step << ',' << fmt17(r.l_src) << ',' << fmt17(r.l_mix) << ',' << fmt17(r.source_miou) << ','
       << fmt17(r.target_miou);
    for (double v : r.target_iou) os << ',' << fmt17(v);
    os << '\n';
  }
}

inline Tensor history_to_tensor(const std::vector<MetricsRow>& rows, std::size_t classes) {
  const std::size_t cols = 5 + classes;
  Tensor t(Shape{std::max<std::size_t>(rows.size(), 1), cols}, std::numeric_limits<double>::quiet_NaN());
  if (rows.empty()) t[0] = -1.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    t[i * cols + 0] = static_cast<double>(r.step);
    t[i * cols + 1] = r.l_src;
    t[i * cols + 2] = r.l_mix;
    t[i * cols + 3] = r.source_miou;
    t[i * cols + 4] = r.target_miou;
    for (std::size_t k = 0; k < classes; ++k) t[i * cols + 5 + k] = r.target_iou[k];
  }
  return t;
}

inline std::vector<MetricsRow> history_from_tensor(const Tensor& t, std::size_t classes) {
  const std::size_t cols = 5 + classes;
  if (t.ndim() != 2 || t.dim(1) != cols) throw DimensionError("metrics history does not match the class count");
  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    if (t[i * cols] < 0.0) continue;
    MetricsRow r{static_cast<long>(t[i * cols]), t[i * cols + 1], t[i * cols + 2], t[i * cols + 3], t[i * cols + 4], {}};
    for (std::size_t k = 0; k < classes; ++k) r.target_iou.push_back(t[i * cols + 5 + k]);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Model for `c`; the adapter is present when at least one expert is enabled
/// and the mode is not pretraining.
inline SegModel build_model(const cfg::TrainConfig& c) {
  auto backbone = std::make_shared<VisionTransformer>(c.backbone, c.seed);
  SegDecoder decoder(c.backbone, c.seed);
  std::optional<EarthAdapter> adapter;
  if (c.mode != cfg::Mode::kPretrain && c.adapter.any_expert()) adapter.emplace(c.backbone, c.adapter, c.seed);
  return SegModel(std::move(backbone), std::move(decoder), std::move(adapter));
}

/// Rebuilds a model from a checkpoint's config echo and arrays.
inline std::pair<SegModel, cfg::TrainConfig> model_from_checkpoint(const ckpt::Checkpoint& ck) {
  cfg::TrainConfig c = cfg::parse(ck.config);
  c.finalize();
  SegModel m = build_model(c);
  ckpt::get_params(ck, m.backbone().named_params());
  ckpt::get_params(ck, m.decoder().named_params());
  if (m.adapter()) ckpt::get_params(ck, m.adapter()->named_params());
  return {std::move(m), c};
}

struct RunResult {
  long steps = 0;
  double source_miou = 0.0;
  double target_miou = 0.0;
  fs::path checkpoint;
  std::vector<MetricsRow> history;
};

namespace detail {

inline void save_optimizer(ckpt::Checkpoint& ck, const AdamW& opt) {
  ck.put("optim/step", Tensor::scalar(static_cast<double>(opt.step_count())));
  for (const auto& s : opt.slots()) {
    ck.put("optim/" + s.param.name + "/m", s.m);
    ck.put("optim/" + s.param.name + "/v", s.v);
  }
}

inline void load_optimizer(const ckpt::Checkpoint& ck, AdamW& opt) {
  opt.set_step_count(static_cast<long>(ck.get("optim/step")[0]));
  for (auto& s : opt.slots()) {
    for (auto [suffix, dst] : {std::pair<const char*, Tensor*>{"/m", &s.m}, {"/v", &s.v}}) {
      const Tensor& src = ck.get("optim/" + s.param.name + suffix);
      if (src.shape() != dst->shape())
        throw DimensionError("optimizer state for '" + s.param.name + "' has shape " + shape_str(src.shape()));
      std::copy(src.data().begin(), src.data().end(), dst->data().begin());
    }
  }
}

inline MetricsRow evaluate_row(SegModel& m, long step, const train::LossReport* last,
                               const std::vector<bench::Sample>& source_val,
                               const std::vector<bench::Sample>& target_val) {
  MetricsRow r;
  r.step = step;
  if (last) {
    r.l_src = last->l_src;
    r.l_mix = last->l_mix;
  }
  r.source_miou = source_val.empty() ? 0.0 : train::evaluate_model(m, source_val).miou;
  if (!target_val.empty()) {
    auto ev = train::evaluate_model(m, target_val);
    r.target_miou = ev.miou;
    r.target_iou = ev.per_class_iou;
  } else {
    r.target_iou.assign(m.config().num_classes, std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

inline void write_summary(const fs::path& dir, const RunResult& r, std::ostream* log) {
  std::ostringstream os;
  os << "final step=" << r.steps << " source_miou=" << fmt17(r.source_miou) << " target_miou=" << fmt17(r.target_miou);
  std::ofstream(dir / "summary.txt") << os.str() << '\n';
  if (log) *log << os.str() << '\n';
}

}  // namespace detail

/// Executes one configured experiment. `resume` continues from a checkpoint
/// written by an earlier run of the same configuration.
inline RunResult run(cfg::TrainConfig c, const std::optional<fs::path>& resume = std::nullopt,
                     std::ostream* log = nullptr) {
  c.finalize();
  if (c.benchmark.empty()) throw cfg::ConfigError("data.benchmark: path required");
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  const bench::Benchmark b = bench::load_manifest(c.benchmark, c.backbone.num_classes);
  const auto source_train = bench::load_split(b, bench::Domain::kSource, bench::Split::kTrain);
  const auto source_val = bench::load_split(b, bench::Domain::kSource, bench::Split::kVal);
  const auto target_val = bench::load_split(b, bench::Domain::kTarget, bench::Split::kVal);
  const std::size_t classes = c.backbone.num_classes;

  SegModel model = build_model(c);
  RunResult result;

  if (c.mode == cfg::Mode::kPretrain) {
    train::pretrain_source(model, source_train, c.pretrain_steps, c.pretrain_batch, c.pretrain_lr, c.seed);
    auto row = detail::evaluate_row(model, c.pretrain_steps, nullptr, source_val, target_val);
    result.history.push_back(row);
    ckpt::Checkpoint ck;
    ck.step = static_cast<std::uint64_t>(c.pretrain_steps);
    ck.config = cfg::echo(c);
    ckpt::put_params(ck, model.backbone().named_params());
    ckpt::put_params(ck, model.decoder().named_params());
    ck.put("metrics/history", history_to_tensor(result.history, classes));
    result.checkpoint = out / "checkpoint.eadk";
    ckpt::save(result.checkpoint, ck);
    write_metrics(out / "metrics.csv", result.history, classes);
    result.steps = c.pretrain_steps;
    result.source_miou = row.source_miou;
    result.target_miou = row.target_miou;
    detail::write_summary(out, result, log);
    return result;
  }

  if (c.backbone_checkpoint.empty()) throw cfg::ConfigError("backbone.checkpoint: required for mode dg/da");
  {
    const ckpt::Checkpoint pre = ckpt::load(c.backbone_checkpoint);
    ckpt::get_params(pre, model.backbone().named_params());
    ckpt::get_params(pre, model.decoder().named_params());
  }
  model.backbone().set_trainable(false);

  AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, c.weight_decay});
  opt.add_group("decoder", c.lr_decoder, model.decoder().named_params());
  if (model.adapter()) opt.add_group("peft", c.lr_peft, model.adapter()->named_params());
  const bool da = c.mode == cfg::Mode::kDA;
  std::optional<SegModel> teacher;
  if (da) teacher.emplace(model.detached_copy());

  long start = 0;
  if (resume) {
    const ckpt::Checkpoint ck = ckpt::load(*resume);
    ckpt::get_params(ck, model.decoder().named_params());
    if (model.adapter()) ckpt::get_params(ck, model.adapter()->named_params());
    detail::load_optimizer(ck, opt);
    if (teacher) ckpt::get_params(ck, teacher->trainable_params(), "teacher/");
    start = static_cast<long>(ck.step);
    for (auto& r : history_from_tensor(ck.get("metrics/history"), classes))
      if (r.step == 0 || r.step % c.eval_interval == 0) result.history.push_back(r);
    if (start > c.steps) throw cfg::ConfigError("train.steps: smaller than the resumed step " + std::to_string(start));
  }

  std::vector<bench::Sample> target_train;
  if (da) target_train = bench::load_split(b, bench::Domain::kTarget, bench::Split::kTrain, /*with_labels=*/false);

  if (start == 0) result.history.push_back(detail::evaluate_row(model, 0, nullptr, source_val, target_val));

  std::optional<train::LossReport> last;
  for (long s = start; s < c.steps; ++s) {
    auto si = train::batch_indices(c.seed, s, 0, c.batch, source_train.size());
    std::vector<const bench::Sample*> src;
    for (auto i : si) src.push_back(&source_train[i]);
    if (da) {
      auto ti = train::batch_indices(c.seed, s, 1, c.batch, target_train.size());
      std::vector<const Tensor*> tgt;
      for (auto i : ti) tgt.push_back(&target_train[i].image);
      std::mt19937_64 mix_rng(bench::mix_seed(bench::mix_seed(c.seed, static_cast<std::uint64_t>(s)), 2));
      last = train::uda_step(model, *teacher, opt, src, tgt, c.lambda_uda, c.ema_alpha, mix_rng, s);
    } else {
      last = train::dg_step(model, opt, src, s);
    }
    const long done = s + 1;
    if (done % c.eval_interval == 0 || done == c.steps) {
      result.history.push_back(detail::evaluate_row(model, done, &*last, source_val, target_val));
      if (log) {
        const auto& r = result.history.back();
        *log << "step " << done << " l_src=" << r.l_src << " l_mix=" << r.l_mix << " source_miou=" << r.source_miou
             << " target_miou=" << r.target_miou << '\n';
      }
    }
  }

  const long final_step = std::max(start, c.steps);
  ckpt::Checkpoint ck;
  ck.step = static_cast<std::uint64_t>(final_step);
  ck.config = cfg::echo(c);
  ckpt::put_params(ck, model.backbone().named_params());
  ckpt::put_params(ck, model.decoder().named_params());
  if (model.adapter()) ckpt::put_params(ck, model.adapter()->named_params());
  detail::save_optimizer(ck, opt);
  if (teacher) ckpt::put_params(ck, teacher->trainable_params(), "teacher/");
  ck.put("metrics/history", history_to_tensor(result.history, classes));
  result.checkpoint = out / "checkpoint.eadk";
  ckpt::save(result.checkpoint, ck);
  write_metrics(out / "metrics.csv", result.history, classes);

  result.steps = final_step;
  result.source_miou = result.history.back().source_miou;
  result.target_miou = result.history.back().target_miou;
  detail::write_summary(out, result, log);
  return result;
}

/// mIoU of a checkpointed model on the benchmark's validation splits.
inline std::pair<double, double> evaluate_checkpoint(const fs::path& checkpoint, const fs::path& benchmark) {
  auto [model, c] = model_from_checkpoint(ckpt::load(checkpoint));
  const bench::Benchmark b = bench::load_manifest(benchmark, c.backbone.num_classes);
  const auto sv = bench::load_split(b, bench::Domain::kSource, bench::Split::kVal);
  const auto tv = bench::load_split(b, bench::Domain::kTarget, bench::Split::kVal);
  return {train::evaluate_model(model, sv).miou, train::evaluate_model(model, tv).miou};
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { kCutoff, kDim, kFreqLayers };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "cutoff") return SweepAxis::kCutoff;
  if (s == "dim") return SweepAxis::kDim;
  if (s == "freq_layers") return SweepAxis::kFreqLayers;
  throw cfg::ConfigError("sweep axis must be cutoff, dim or freq_layers, got '" + s + "'");
}

struct SweepRow {
  std::string value;
  std::string status;  // "ok" or the failure message
  double source_miou = std::numeric_limits<double>::quiet_NaN();
  double target_miou = std::numeric_limits<double>::quiet_NaN();
};

/// Applies one sweep value. Layer sets accept first3 / last3 or `;`-separated indices.
inline void apply_sweep_value(cfg::TrainConfig& c, SweepAxis axis, const std::string& value) {
  switch (axis) {
    case SweepAxis::kCutoff: cfg::set_key(c, "adapter.cutoff", value); break;
    case SweepAxis::kDim: cfg::set_key(c, "adapter.dim", value); break;
    case SweepAxis::kFreqLayers: {
      std::vector<std::size_t> layers;
      const std::size_t d = c.backbone.depth;
      if (value == "first3") {
        for (std::size_t l = 0; l < std::min<std::size_t>(3, d); ++l) layers.push_back(l);
      } else if (value == "last3") {
        for (std::size_t l = d >= 3 ? d - 3 : 0; l < d; ++l) layers.push_back(l);
      } else {
        std::string v = value;
        std::replace(v.begin(), v.end(), ';', ',');
        cfg::set_key(c, "adapter.freq_layers", v);
        return;
      }
      c.adapter.freq_layers = layers;
      c.freq_layers_set = true;
      break;
    }
  }
}

inline void write_sweep_csv(const fs::path& path, const std::vector<SweepRow>& rows) {
  std::ofstream os(path);
  if (!os) throw io::IoError("cannot write '" + path.string() + "'");
  os << "value,status,source_miou,target_miou\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    os << r.value << ',' << status << ',' << fmt17(r.source_miou) << ',' << fmt17(r.target_miou) << '\n';
  }
}

/// Worker count from EA_THREADS (default 1).
inline std::size_t worker_limit() {
  if (const char* e = std::getenv("EA_THREADS")) {
    const long n = std::strtol(e, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

/// One run per value with a shared seed; failed runs are recorded and the
/// sweep continues. Rows are sorted by value (numerically when possible).
inline std::vector<SweepRow> sweep(const cfg::TrainConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                                   const fs::path& csv_path, std::ostream* log = nullptr) {
  if (values.empty()) throw cfg::ConfigError("sweep: no values given");
  auto one = [&](std::size_t i) {
    SweepRow row{values[i], "ok"};
    try {
      cfg::TrainConfig c = base;
      apply_sweep_value(c, axis, values[i]);
      c.out_dir = (fs::path(base.out_dir) / ("sweep_" + std::to_string(i))).string();
      RunResult r = run(c);
      row.source_miou = r.source_miou;
      row.target_miou = r.target_miou;
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
    }
    return row;
  };
  std::vector<SweepRow> rows(values.size());
  const std::size_t workers = std::min(worker_limit(), values.size());
  for (std::size_t begin = 0; begin < values.size(); begin += workers) {
    std::vector<std::future<SweepRow>> jobs;
    for (std::size_t i = begin; i < std::min(values.size(), begin + workers); ++i)
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, one, i));
    for (std::size_t k = 0; k < jobs.size(); ++k) {
      rows[begin + k] = jobs[k].get();
      if (log) *log << "sweep value " << rows[begin + k].value << ": " << rows[begin + k].status << '\n';
    }
  }
  const bool numeric = std::all_of(values.begin(), values.end(), [](const std::string& v) {
    char* end = nullptr;
    std::strtod(v.c_str(), &end);
    return !v.empty() && end && *end == '\0';
  });
  std::stable_sort(rows.begin(), rows.end(), [numeric](const SweepRow& a, const SweepRow& b) {
    return numeric ? std::strtod(a.value.c_str(), nullptr) < std::strtod(b.value.c_str(), nullptr) : a.value < b.value;
  });
  fs::create_directories(fs::path(csv_path).parent_path().empty() ? fs::path(".") : fs::path(csv_path).parent_path());
  write_sweep_csv(csv_path, rows);
  return rows;
}

// ---------------------------------------------------------------------------
// PCA export

struct PrincipalComponents {
  Tensor basis;                // k x c, orthonormal rows
  std::vector<double> variance;
};

/// Top-k principal directions of the rows of `x` (n x c), ordered by
/// decreasing variance. Block power iteration with QR re-orthonormalization,
/// then a Rayleigh-Ritz step inside the converged subspace.
inline PrincipalComponents top_components(const Tensor& x, std::size_t k = 3, int iters = 100, double tol = 1e-9) {
  if (x.ndim() != 2) throw DimensionError("top_components: expected n x c");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (k > c) throw RangeError("top_components: k exceeds the feature dimension");
  Eigen::MatrixXd m(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) m(i, j) = x[i * c + j];
  m.rowwise() -= m.colwise().mean();
  const Eigen::MatrixXd cov = (m.transpose() * m) / static_cast<double>(n);
  const auto kk = static_cast<Eigen::Index>(k), cc = static_cast<Eigen::Index>(c);
  // Deterministic start; QR of a full-rank block.
  Eigen::MatrixXd q = Eigen::MatrixXd::Identity(cc, kk);
  for (Eigen::Index i = 0; i < cc; ++i)
    for (Eigen::Index j = 0; j < kk; ++j) q(i, j) += 0.01 * static_cast<double>((i * 7 + j * 13) % 17);
  auto orth = [&](const Eigen::MatrixXd& b) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(b);
    return Eigen::MatrixXd(qr.householderQ() * Eigen::MatrixXd::Identity(cc, kk));
  };
  q = orth(q);
  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXd next = orth(cov * q);
    // Subspace change, invariant to sign and rotation within the block.
    const double diff = (next - q * (q.transpose() * next)).cwiseAbs().maxCoeff();
    q = std::move(next);
    if (diff < tol) break;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q.transpose() * cov * q);
  if (es.info() != Eigen::Success) throw NumericError("top_components: Rayleigh-Ritz step failed");
  const Eigen::MatrixXd vecs = q * es.eigenvectors();
  PrincipalComponents pc{Tensor(Shape{k, c}), {}};
  for (std::size_t comp = 0; comp < k; ++comp) {
    // Ritz values come out ascending.
    const Eigen::Index col = kk - 1 - static_cast<Eigen::Index>(comp);
    pc.variance.push_back(std::max(es.eigenvalues()(col), 0.0));
    for (std::size_t j = 0; j < c; ++j) pc.basis[comp * c + j] = vecs(static_cast<Eigen::Index>(j), col);
  }
  return pc;
}

/// Projects an n x c token map (square grid) onto its top-3 components and
/// min-max normalizes each to [0,1]. Components with variance below 1e-12
/// render mid-gray. Returns a 3 x G x G image.
inline Tensor render_pca(const Tensor& tokens) {
  const std::size_t n = tokens.dim(0), c = tokens.dim(1), side = spectral::square_side(n);
  const PrincipalComponents pc = top_components(tokens, 3);
  Tensor img(Shape{3, side, side}, 0.5);
  for (std::size_t k = 0; k < 3; ++k) {
    if (pc.variance[k] < 1e-12) continue;
    std::vector<double> proj(n, 0.0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < c; ++j) proj[t] += tokens[t * c + j] * pc.basis[k * c + j];
    const auto [lo, hi] = std::minmax_element(proj.begin(), proj.end());
    const double range = *hi - *lo;
    if (range <= 0.0) continue;
    for (std::size_t t = 0; t < n; ++t) img[k * n + t] = (proj[t] - *lo) / range;
  }
  return img;
}

inline Tensor upscale(const Tensor& img, std::size_t factor) {
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(Shape{ch, h * factor, w * factor});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h * factor; ++y)
      for (std::size_t x = 0; x < w * factor; ++x)
        out[(c * h * factor + y) * w * factor + x] = img[(c * h + y / factor) * w + x / factor];
  return out;
}

struct PcaExport {
  // spatial, low, high, aggregated; each 3 x G x G
  std::array<Tensor, 4> maps;
  std::array<Tensor, 4> deltas;  // raw n x c token maps
};

inline constexpr std::array<const char*, 4> kPcaNames{"spatial", "low", "high", "aggregated"};

/// Captures the three expert outputs and the aggregated adjustment at
/// `layer` for `image`, renders PCA maps, and writes four PPM files when
/// `out_dir` is non-empty.
inline PcaExport export_pca(SegModel& model, const Tensor& image, std::size_t layer, const fs::path& out_dir = {}) {
  EarthAdapter* ad = model.adapter();
  MoALayer* m = ad ? ad->at_layer(layer) : nullptr;
  if (!m || !m->has_frequency() || !m->expert(Expert::kSpatial) || !m->expert(Expert::kLow) ||
      !m->expert(Expert::kHigh))
    throw RangeError("layer " + std::to_string(layer) + " has no spatial/low/high experts to export");
  ad->capture_layer(layer);
  Graph g;
  model.features(g, image);
  const MoACapture cap = ad->capture();
  ad->capture_layer(std::nullopt);
  PcaExport ex;
  const std::array<Var, 4> vars{*cap.spatial, *cap.low, *cap.high, cap.aggregated};
  for (std::size_t i = 0; i < 4; ++i) {
    ex.deltas[i] = g.value(vars[i]);
    ex.deltas[i].clear_grad();
    ex.maps[i] = render_pca(ex.deltas[i]);
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < 4; ++i)
      io::write_ppm(out_dir / (std::string("pca_") + kPcaNames[i] + ".ppm"),
                    upscale(ex.maps[i], model.config().patch_size));
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Standalone frequency split

/// Splits a PPM image; writes low.ppm, high_plus_half.ppm, low.f64 and high.f64.
inline spectral::FrequencySplit split_freq_cmd(const fs::path& image_path, double rho, const fs::path& out_dir) {
  const Tensor img = io::read_ppm(image_path);
  if (img.dim(1) != img.dim(2))
    throw DimensionError("split-freq requires a square image, got " + std::to_string(img.dim(2)) + "x" +
                         std::to_string(img.dim(1)));
  spectral::FrequencySplit parts = spectral::split_frequency(img, rho);
  fs::create_directories(out_dir);
  io::write_ppm(out_dir / "low.ppm", parts.low);
  Tensor shifted = parts.high;
  for (auto& v : shifted.data()) v += 0.5;
  io::write_ppm(out_dir / "high_plus_half.ppm", shifted);
  io::write_raw_grid(out_dir / "low.f64", parts.low);
  io::write_raw_grid(out_dir / "high.f64", parts.high);
  return parts;
}

}  // namespace ea::run
