// ea: command-line front end for benchmark generation, training, evaluation,
// sweeps and feature visualization.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "earth_adapter/runner.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
};

ea::cfg::TrainConfig load_config(const Common& o) {
  ea::cfg::TrainConfig c = o.config.empty() ? ea::cfg::TrainConfig{} : ea::cfg::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  return c;
}

void add_common(CLI::App* app, Common& o) {
  app->add_option("--config", o.config, "key = value config file");
  app->add_option("--seed", o.seed, "seed (overrides train.seed)");
  app->add_option("--out", o.out, "output directory (overrides out.dir)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Earth-Adapter desk-scale toolkit"};
  app.require_subcommand(1);
  Common o;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic two-domain benchmark");
  ea::bench::BenchmarkOptions bopt;
  std::string gen_out = "bench";
  gen->add_option("--out", gen_out, "benchmark root");
  gen->add_option("--seed", bopt.seed, "generation seed");
  gen->add_option("--name", bopt.name, "da-analog or dg-analog");
  gen->add_option("--image-size", bopt.image_size, "image side in pixels");
  gen->add_option("--train", bopt.sizes.source_train, "source train images");
  gen->add_option("--val", bopt.sizes.source_val, "source val images");
  gen->add_option("--target-train", bopt.sizes.target_train, "target train images");
  gen->add_option("--target-val", bopt.sizes.target_val, "target val images");

  auto* pre = app.add_subcommand("pretrain", "train backbone and decoder on the source domain");
  auto* dg = app.add_subcommand("train-dg", "source-only adapter training");
  auto* da = app.add_subcommand("train-da", "DACS adapter training with an EMA teacher");
  for (auto* s : {pre, dg, da}) add_common(s, o);
  for (auto* s : {dg, da}) s->add_option("--resume", o.resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a benchmark");
  std::string ev_ckpt, ev_bench;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--benchmark", ev_bench, "defaults to the checkpoint's data.benchmark");

  auto* sw = app.add_subcommand("sweep", "one run per value along an axis");
  add_common(sw, o);
  std::string axis;
  std::vector<std::string> values;
  sw->add_option("--axis", axis, "cutoff, dim or freq_layers")->required();
  sw->add_option("--values", values, "values (freq_layers: first3, last3 or 0;1;2)")->required()->delimiter(',');

  auto* pca = app.add_subcommand("pca-export", "PCA images of the expert outputs at one layer");
  std::string pca_ckpt, pca_image, pca_out = "pca";
  std::size_t pca_layer = 0;
  pca->add_option("--checkpoint", pca_ckpt)->required();
  pca->add_option("--image", pca_image, "P6 input image")->required();
  pca->add_option("--layer", pca_layer, "block index with frequency experts")->required();
  pca->add_option("--out", pca_out);

  auto* sf = app.add_subcommand("split-freq", "low/high frequency split of an image");
  std::string sf_image, sf_out = "split";
  double sf_rho = 0.3;
  sf->add_option("--image", sf_image)->required();
  sf->add_option("--rho", sf_rho, "cutoff in [0,1]");
  sf->add_option("--out", sf_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto b = ea::bench::make_benchmark(gen_out, bopt);
      std::cout << "wrote " << b.entries.size() << " samples to " << gen_out << '\n';
    } else if (pre->parsed() || dg->parsed() || da->parsed()) {
      auto c = load_config(o);
      c.mode = pre->parsed() ? ea::cfg::Mode::kPretrain : dg->parsed() ? ea::cfg::Mode::kDG : ea::cfg::Mode::kDA;
      std::optional<fs::path> resume;
      if (!o.resume.empty()) resume = o.resume;
      ea::run::run(c, resume, &std::cout);
    } else if (ev->parsed()) {
      if (ev_bench.empty()) ev_bench = ea::cfg::parse(ea::ckpt::load(ev_ckpt).config).benchmark;
      auto [s, t] = ea::run::evaluate_checkpoint(ev_ckpt, ev_bench);
      std::cout << "source_miou=" << ea::run::fmt17(s) << " target_miou=" << ea::run::fmt17(t) << '\n';
    } else if (sw->parsed()) {
      auto c = load_config(o);
      auto rows = ea::run::sweep(c, ea::run::parse_axis(axis), values, fs::path(c.out_dir) / ("sweep_" + axis + ".csv"),
                                 &std::cout);
      for (const auto& r : rows)
        std::cout << r.value << ' ' << r.status << " source_miou=" << ea::run::fmt17(r.source_miou)
                  << " target_miou=" << ea::run::fmt17(r.target_miou) << '\n';
    } else if (pca->parsed()) {
      auto [model, c] = ea::run::model_from_checkpoint(ea::ckpt::load(pca_ckpt));
      ea::run::export_pca(model, ea::io::read_ppm(pca_image), pca_layer, pca_out);
      std::cout << "wrote 4 images to " << pca_out << '\n';
    } else if (sf->parsed()) {
      ea::run::split_freq_cmd(sf_image, sf_rho, sf_out);
      std::cout << "wrote low/high images to " << sf_out << '\n';
    }
  } catch (const ea::cfg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ea::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
