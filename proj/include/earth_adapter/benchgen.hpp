#pragma once

// Synthetic two-domain segmentation benchmark and mIoU evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "earth_adapter/image_io.hpp"
#include "earth_adapter/tensor.hpp"

namespace ea::bench {

struct ArtifactSpec {
  bool enabled = false;
  std::size_t period = 2;
  double amplitude = 0.0;
};

struct DomainSpec {
  std::size_t class_count = 4;
  std::size_t image_size = 32;
  std::size_t sites = 6;  // Voronoi seeds per image
  std::vector<std::array<double, 3>> palette;
  std::vector<double> texture_freq;  // cycles per image, one per class; 0 disables
  double texture_amp = 0.0;
  double noise_sigma = 0.0;
  ArtifactSpec artifact;
  std::uint64_t shape_seed = 0;

  void validate() const {
    if (class_count < 2) throw RangeError("domain needs at least 2 classes");
    if (palette.size() != class_count) throw DimensionError("palette size must equal class_count");
    if (!texture_freq.empty() && texture_freq.size() != class_count)
      throw DimensionError("texture_freq size must equal class_count");
    if (artifact.period < 2) throw RangeError("artifact period must be at least 2");
    if (artifact.amplitude < 0.0) throw RangeError("artifact amplitude must be non-negative");
    if (noise_sigma < 0.0 || texture_amp < 0.0) throw RangeError("noise and texture amplitudes must be non-negative");
    if (image_size == 0 || sites == 0) throw RangeError("image_size and sites must be positive");
  }
};

struct Sample {
  Tensor image;             // 3 x S x S in [0,1]
  std::vector<int> label;   // S x S in [0,K)
};

/// Adds amplitude * cos(2 pi (h + w) / period) to every channel, then clamps to [0,1].
inline Tensor inject_artifact(const Tensor& image, std::size_t period, double amplitude) {
  if (period < 2) throw RangeError("artifact period must be at least 2");
  if (image.ndim() != 3) throw DimensionError("inject_artifact: expected 3 x H x W");
  Tensor out = image;
  out.clear_grad();
  if (amplitude == 0.0) return out;
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double phase = 2.0 * std::numbers::pi * static_cast<double>((y + x) % period) / static_cast<double>(period);
      const double a = amplitude * std::cos(phase);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double& v = out[(ch * h + y) * w + x];
        v = std::clamp(v + a, 0.0, 1.0);
      }
    }
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Voronoi layout with one class per site, textured and noised per the spec.
inline Sample generate_sample(const DomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t s = spec.image_size, k = spec.class_count;
  std::mt19937_64 shape_rng(mix_seed(spec.shape_seed, seed));
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(s));
  std::uniform_int_distribution<int> cls(0, static_cast<int>(k) - 1);
  std::vector<std::array<double, 2>> sites(spec.sites);
  std::vector<int> site_class(spec.sites);
  for (std::size_t i = 0; i < spec.sites; ++i) {
    sites[i] = {pos(shape_rng), pos(shape_rng)};
    site_class[i] = cls(shape_rng);
  }
  Sample out{Tensor(Shape{3, s, s}), std::vector<int>(s * s)};
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t i = 0; i < spec.sites; ++i) {
        const double dy = static_cast<double>(y) + 0.5 - sites[i][0], dx = static_cast<double>(x) + 0.5 - sites[i][1];
        const double d = dy * dy + dx * dx;
        if (d < best) {
          best = d;
          arg = i;
        }
      }
      out.label[y * s + x] = site_class[arg];
    }
  std::mt19937_64 pix_rng(mix_seed(seed, 0x5eedull));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const auto c = static_cast<std::size_t>(out.label[y * s + x]);
      double tex = 0.0;
      if (spec.texture_amp > 0.0 && !spec.texture_freq.empty() && spec.texture_freq[c] > 0.0) {
        // Stripes oriented per class so texture carries class identity.
        const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
        const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
        tex = spec.texture_amp * std::sin(2.0 * std::numbers::pi * spec.texture_freq[c] * u / static_cast<double>(s));
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = spec.palette[c][ch] + tex;
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(pix_rng);
        out.image[(ch * s + y) * s + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  if (spec.artifact.enabled) out.image = inject_artifact(out.image, spec.artifact.period, spec.artifact.amplitude);
  return out;
}

/// K x K pixel counts; rows are ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw RangeError("confusion matrix needs at least one class");
  }

  void add(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size())
      throw DimensionError("evaluate: prediction has " + std::to_string(pred.size()) + " pixels, label has " +
                           std::to_string(truth.size()));
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= k_ ||
          static_cast<std::size_t>(truth[i]) >= k_)
        throw RangeError("evaluate: class index outside [0," + std::to_string(k_) + ")");
      ++counts_[static_cast<std::size_t>(truth[i]) * k_ + static_cast<std::size_t>(pred[i])];
    }
  }

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// IoU per class; NaN for classes absent from both truth and prediction.
  std::vector<double> per_class_iou() const {
    std::vector<double> iou(k_, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < k_; ++c) {
      std::uint64_t tp = at(c, c), fp = 0, fn = 0;
      for (std::size_t o = 0; o < k_; ++o) {
        if (o == c) continue;
        fp += at(o, c);
        fn += at(c, o);
      }
      const std::uint64_t denom = tp + fp + fn;
      if (denom > 0) iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return iou;
  }

  double miou() const {
    double s = 0.0;
    std::size_t n = 0;
    for (double v : per_class_iou())
      if (!std::isnan(v)) {
        s += v;
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct Evaluation {
  std::vector<double> per_class_iou;
  double miou = 0.0;
};

inline Evaluation evaluate(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& labels,
                           std::size_t classes) {
  if (preds.empty()) throw DimensionError("evaluate: empty input");
  if (preds.size() != labels.size()) throw DimensionError("evaluate: prediction/label count mismatch");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], labels[i]);
  if (cm.total() == 0) throw DimensionError("evaluate: empty input");
  return {cm.per_class_iou(), cm.miou()};
}

// ---------------------------------------------------------------------------
// Benchmarks on disk

enum class Split { kTrain, kVal };
enum class Domain { kSource, kTarget };

inline const char* split_name(Split s) { return s == Split::kTrain ? "train" : "val"; }
inline const char* domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

struct BenchmarkSizes {
  std::size_t source_train = 200;
  std::size_t source_val = 50;
  std::size_t target_train = 200;
  std::size_t target_val = 50;
};

/// Clean source domain: four well-separated colors with oriented stripes.
inline DomainSpec default_source_spec(std::size_t image_size = 32) {
  DomainSpec d;
  d.class_count = 4;
  d.image_size = image_size;
  d.palette = {{0.80, 0.78, 0.72}, {0.25, 0.55, 0.25}, {0.70, 0.30, 0.25}, {0.25, 0.35, 0.70}};
  d.texture_freq = {0.0, 6.0, 3.0, 4.0};
  d.texture_amp = 0.06;
  d.noise_sigma = 0.03;
  d.shape_seed = 11;
  return d;
}

/// Shifted target domain: altered palette plus a periodic artifact.
inline DomainSpec default_target_spec(std::size_t image_size = 32, std::size_t period = 2, double amplitude = 0.15) {
  DomainSpec d = default_source_spec(image_size);
  d.palette = {{0.45, 0.50, 0.55}, {0.45, 0.45, 0.30}, {0.50, 0.35, 0.35}, {0.30, 0.35, 0.50}};
  d.noise_sigma = 0.04;
  d.shape_seed = 23;
  d.artifact = {true, period, amplitude};
  return d;
}

struct ManifestEntry {
  std::string path;  // image path relative to the benchmark root; label is the same stem with .pgm
  Split split = Split::kTrain;
  Domain domain = Domain::kSource;
  std::uint64_t seed = 0;
};

struct Benchmark {
  std::filesystem::path root;
  std::size_t classes = 4;
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> select(Domain d, Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.domain == d && e.split == s) out.push_back(&e);
    return out;
  }
};

inline std::filesystem::path label_path_for(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_extension(".pgm");
  return p;
}

struct BenchmarkOptions {
  std::string name = "da-analog";
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  BenchmarkSizes sizes;
};

inline std::pair<DomainSpec, DomainSpec> benchmark_domains(const BenchmarkOptions& opt) {
  if (opt.name == "da-analog") return {default_source_spec(opt.image_size), default_target_spec(opt.image_size, 2, 0.15)};
  if (opt.name == "dg-analog") {
    DomainSpec t = default_target_spec(opt.image_size, 4, 0.12);
    t.noise_sigma = 0.06;
    return {default_source_spec(opt.image_size), t};
  }
  throw RangeError("unknown benchmark '" + opt.name + "' (expected da-analog or dg-analog)");
}

/// Writes every split plus manifest.csv under `root` and returns the manifest.
inline Benchmark make_benchmark(const std::filesystem::path& root, const BenchmarkOptions& opt) {
  const auto [src, tgt] = benchmark_domains(opt);
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw io::IoError("cannot create '" + root.string() + "': " + ec.message());
  Benchmark b{root, src.class_count, {}};
  const struct {
    Domain d;
    Split s;
    std::size_t n;
  } parts[] = {{Domain::kSource, Split::kTrain, opt.sizes.source_train},
               {Domain::kSource, Split::kVal, opt.sizes.source_val},
               {Domain::kTarget, Split::kTrain, opt.sizes.target_train},
               {Domain::kTarget, Split::kVal, opt.sizes.target_val}};
  std::uint64_t part_id = 0;
  for (const auto& part : parts) {
    ++part_id;
    const std::string dir = std::string(domain_name(part.d)) + "_" + split_name(part.s);
    std::filesystem::create_directories(root / dir, ec);
    if (ec) throw io::IoError("cannot create '" + (root / dir).string() + "': " + ec.message());
    for (std::size_t i = 0; i < part.n; ++i) {
      const std::uint64_t seed = mix_seed(mix_seed(opt.seed, part_id), i);
      Sample smp = generate_sample(part.d == Domain::kSource ? src : tgt, seed);
      std::ostringstream name;
      name << dir << "/" << i << ".ppm";
      io::write_ppm(root / name.str(), smp.image);
      io::write_pgm(label_path_for(root / name.str()), smp.label, opt.image_size, opt.image_size);
      b.entries.push_back({name.str(), part.s, part.d, seed});
    }
  }
  std::ofstream mf(root / "manifest.csv");
  if (!mf) throw io::IoError("cannot write '" + (root / "manifest.csv").string() + "'");
  mf << "path,split,domain,seed\n";
  for (const auto& e : b.entries) mf << e.path << ',' << split_name(e.split) << ',' << domain_name(e.domain) << ',' << e.seed << '\n';
  if (!mf) throw io::IoError("failed writing manifest under '" + root.string() + "'");
  return b;
}

inline Benchmark load_manifest(const std::filesystem::path& root, std::size_t classes = 4) {
  std::ifstream is(root / "manifest.csv");
  if (!is) throw io::IoError("cannot read '" + (root / "manifest.csv").string() + "'");
  Benchmark b{root, classes, {}};
  std::string line;
  std::getline(is, line);
  if (line != "path,split,domain,seed") throw io::IoError("unexpected manifest header in '" + root.string() + "'");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path, split, domain, seed;
    if (!std::getline(ss, path, ',') || !std::getline(ss, split, ',') || !std::getline(ss, domain, ',') ||
        !std::getline(ss, seed))
      throw io::IoError("malformed manifest line '" + line + "'");
    ManifestEntry e{path, split == "train" ? Split::kTrain : Split::kVal,
                    domain == "source" ? Domain::kSource : Domain::kTarget, std::stoull(seed)};
    if ((split != "train" && split != "val") || (domain != "source" && domain != "target"))
      throw io::IoError("malformed manifest line '" + line + "'");
    b.entries.push_back(std::move(e));
  }
  return b;
}

/// Loads images (and labels when `with_labels`) of one domain/split.
inline std::vector<Sample> load_split(const Benchmark& b, Domain d, Split s, bool with_labels = true) {
  std::vector<Sample> out;
  for (const auto* e : b.select(d, s)) {
    Sample smp;
    smp.image = io::read_ppm(b.root / e->path);
    if (with_labels) smp.label = io::read_pgm(label_path_for(b.root / e->path));
    out.push_back(std::move(smp));
  }
  return out;
}

/// Mean over channels of the 1D Wasserstein-1 distance between 256-bin
/// intensity histograms, in [0,1] intensity units.
inline double color_w1_distance(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  double total = 0.0;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    std::array<double, 256> ha{}, hb{};
    double na = 0.0, nb = 0.0;
    auto fill = [ch](const std::vector<Sample>& set, std::array<double, 256>& h, double& n) {
      for (const auto& s : set) {
        const std::size_t plane = s.image.dim(1) * s.image.dim(2);
        for (std::size_t i = 0; i < plane; ++i) {
          h[io::to_byte(s.image[ch * plane + i])] += 1.0;
          n += 1.0;
        }
      }
    };
    fill(a, ha, na);
    fill(b, hb, nb);
    double ca = 0.0, cb = 0.0, w1 = 0.0;
    for (std::size_t i = 0; i < 256; ++i) {
      ca += ha[i] / na;
      cb += hb[i] / nb;
      w1 += std::abs(ca - cb) / 255.0;
    }
    total += w1;
  }
  return total / 3.0;
}

}  // namespace ea::bench
