// Command-line entry point: dataset generation, training, evaluation, uncertainty sweeps,
// and SVDKL/VAE comparison.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ldkl/checkpoint.hpp"
#include "ldkl/config.hpp"
#include "ldkl/dataset.hpp"
#include "ldkl/error.hpp"
#include "ldkl/evaluation.hpp"
#include "ldkl/pgm.hpp"
#include "ldkl/training.hpp"

namespace fs = std::filesystem;
using namespace ldkl;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct GenerateArgs {
  std::size_t count = 0;
  std::size_t episode_len = 50;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  double sigma_dyn = 0.0;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string config;
  std::string model = "svdkl";
  std::string out = "model.ldkc";
  std::uint64_t seed = 0;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double sigma_x = 0.0;
  double sigma_u = 0.0;
};

struct EvalArgs {
  std::string ckpt;
  std::string data;
  double sigma_x = 0.0;
  double sigma_u = 0.0;
  double sigma_dyn = -1.0;
  std::string avg = "image";
  std::size_t samples = 10;
  std::string out_dir = "eval";
  std::uint64_t seed = 0;
  bool dump_latents = false;
};

struct UqArgs {
  std::string ckpt;
  std::string data;
  std::vector<std::string> levels{"0", "0.5"};
  std::string out = "uq.csv";
  std::uint64_t seed = 0;
};

struct CompareArgs {
  std::string svdkl;
  std::string vae;
  std::string data;
  double sigma_x = 0.0;
  double sigma_u = 0.0;
  std::string avg = "image";
  std::size_t samples = 10;
  std::string out_dir = "compare";
  std::uint64_t seed = 0;
};

fs::path metrics_path_for(const fs::path& ckpt) {
  fs::path p = ckpt;
  p.replace_extension(".metrics.csv");
  return p;
}

void run_generate(const GenerateArgs& a) {
  data::GenerateOptions o;
  o.count = a.count;
  o.episode_length = a.episode_len;
  o.height = a.height;
  o.width = a.width;
  o.channels = a.channels;
  o.noise.sigma_dyn2 = a.sigma_dyn;
  o.seed = a.seed;
  const data::Dataset ds = data::generate_dataset(o);
  data::save_dataset(ds, a.out);
  std::cout << "wrote " << ds.transitions.size() << " transitions to " << a.out << '\n';
}

void run_train(const TrainArgs& a, const CLI::App& cmd) {
  const data::Dataset ds = data::load_dataset(a.data);
  model::ModelConfig mc;
  mc.height = ds.header.height;
  mc.width = ds.header.width;
  mc.channels_per_frame = ds.header.channels;
  mc.torque_limit = ds.header.params.torque_limit;
  train::TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  if (!a.config.empty()) cfg::apply(cfg::read_config_file(a.config), mc, tc);
  // Flags given explicitly override the config file.
  if (cmd.count("--model")) mc.kind = model::parse_kind(a.model);
  if (cmd.count("--seed")) tc.seed = a.seed;
  if (cmd.count("--epochs")) tc.epochs = a.epochs;
  if (cmd.count("--batch-size")) tc.batch_size = a.batch_size;
  if (cmd.count("--sigma-x")) tc.noise.sigma_x2 = a.sigma_x;
  if (cmd.count("--sigma-u")) tc.noise.sigma_u2 = a.sigma_u;

  model::LatentModel m(mc, tc.seed);
  train::TrainOutputs out;
  out.checkpoint = a.out;
  out.metrics_csv = metrics_path_for(a.out);
  out.on_epoch = [](const train::EpochMetrics& e) {
    std::printf("epoch %zu  recon %.4f  dyn %.4f  kl_enc %.4f  kl_fwd %.4f  total %.4f\n", e.epoch, e.recon_loss,
                e.dyn_loss, e.var_kl_enc, e.var_kl_fwd, e.total);
    std::fflush(stdout);
  };
  train::train(m, ds, tc, out);
  std::cout << "checkpoint " << a.out << ", metrics " << out.metrics_csv.string() << '\n';
}

eval::EvalOptions eval_options(double sx, double su, const std::string& avg, std::size_t samples,
                               std::uint64_t seed) {
  eval::EvalOptions o;
  o.sigma_x2 = sx;
  o.sigma_u2 = su;
  o.avg = eval::parse_avg_mode(avg);
  o.samples = samples;
  o.seed = seed;
  return o;
}

void run_eval(const EvalArgs& a) {
  model::LatentModel m = model::load_checkpoint(a.ckpt);
  const data::Dataset ds = data::load_dataset(a.data);
  fs::create_directories(a.out_dir);
  eval::EvalArtifacts art;
  eval::EvalRow row = eval::evaluate(m, ds, eval_options(a.sigma_x, a.sigma_u, a.avg, a.samples, a.seed), &art);
  if (a.sigma_dyn >= 0.0) row.sigma_dyn2 = a.sigma_dyn;
  const fs::path dir(a.out_dir);
  eval::write_report_csv({row}, dir / "report.csv");
  img::write_pgm(dir / "grid.pgm", art.grid);
  if (a.dump_latents) eval::write_latents_csv(art, ds, dir / "latents.csv");
  std::printf("recon PSNR %.3f dB, denoising gain %.3f dB, next-step MSE %.5f (persistence %.5f)\n", row.recon_psnr,
              row.denoising_gain, row.next_mse, row.persistence_mse);
  std::cout << "report " << (dir / "report.csv").string() << '\n';
}

eval::UqLevel parse_level(const std::string& s) {
  eval::UqLevel l;
  const auto colon = s.find(':');
  try {
    std::size_t used = 0;
    l.sigma_x2 = std::stod(s.substr(0, colon), &used);
    if (used != (colon == std::string::npos ? s.size() : colon)) throw std::invalid_argument(s);
    if (colon != std::string::npos) {
      l.sigma_u2 = std::stod(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw std::invalid_argument(s);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad noise level '" + s + "' (expected sigma_x2 or sigma_x2:sigma_u2)");
  }
  return l;
}

void run_uq(const UqArgs& a) {
  model::LatentModel m = model::load_checkpoint(a.ckpt);
  const data::Dataset ds = data::load_dataset(a.data);
  std::vector<eval::UqLevel> levels;
  for (const std::string& s : a.levels) levels.push_back(parse_level(s));
  const std::vector<eval::UqRow> rows = eval::uq_sweep(m, ds, levels, a.seed);
  eval::write_uq_csv(rows, a.out);
  for (const eval::UqRow& r : rows)
    std::printf("sigma_x2 %g sigma_u2 %g: encoder std %.5f, forward std %.5f\n", r.sigma_x2, r.sigma_u2, r.enc_std,
                r.fwd_std);
}

void run_compare(const CompareArgs& a) {
  const data::Dataset ds = data::load_dataset(a.data);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const eval::EvalOptions opts = eval_options(a.sigma_x, a.sigma_u, a.avg, a.samples, a.seed);
  std::vector<eval::EvalRow> rows;
  for (const std::string& path : {a.svdkl, a.vae}) {
    model::LatentModel m = model::load_checkpoint(path);
    eval::EvalArtifacts art;
    rows.push_back(eval::evaluate(m, ds, opts, &art));
    img::write_pgm(dir / ("grid_" + rows.back().model + ".pgm"), art.grid);
  }
  eval::write_report_csv(rows, dir / "report.csv");
  eval::write_compare_csv(rows, dir / "compare.csv");
  std::printf("%-16s %12s %12s\n", "metric", rows[0].model.c_str(), rows[1].model.c_str());
  std::printf("%-16s %12.5f %12.5f\n", "recon_mse", rows[0].recon_mse, rows[1].recon_mse);
  std::printf("%-16s %12.3f %12.3f\n", "denoising_gain", rows[0].denoising_gain, rows[1].denoising_gain);
  std::printf("%-16s %12.5f %12.5f\n", "next_mse", rows[0].next_mse, rows[1].next_mse);
  std::cout << "report " << (dir / "compare.csv").string() << '\n';
}

std::string config_keys_help() {
  std::ostringstream ss;
  ss << "config file keys (key = value, # comments) with defaults:\n";
  for (const auto& [k, v] : cfg::describe(model::ModelConfig{}, train::TrainConfig{})) ss << "  " << k << " = " << v << '\n';
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent dynamics models with deep kernel GPs for pixel observations of a pendulum"};
  app.set_help_flag("--help", "print this help and exit");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "simulate a pendulum transition dataset");
  g->add_option("--count", gen.count, "number of transitions")->required()->check(CLI::PositiveNumber);
  g->add_option("--episode-len", gen.episode_len, "transitions per episode")->check(CLI::PositiveNumber);
  g->add_option("--h", gen.height, "image height")->check(CLI::Range(16, 4096));
  g->add_option("--w", gen.width, "image width")->check(CLI::Range(16, 4096));
  g->add_option("--channels", gen.channels, "channels per frame (1 or 3)")->check(CLI::IsMember({1, 3}));
  g->add_option("--sigma-dyn", gen.sigma_dyn, "dynamics disturbance variance")->check(CLI::NonNegativeNumber);
  g->add_option("--seed", gen.seed, "random seed");
  g->add_option("--out", gen.out, "output dataset file")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train an svdkl or vae model");
  t->add_option("--data", tr.data, "training dataset")->required();
  t->add_option("--config", tr.config, "key = value config file");
  t->add_option("--model", tr.model, "model family")->check(CLI::IsMember({"svdkl", "vae"}));
  t->add_option("--out", tr.out, "checkpoint path; metrics CSV is written next to it");
  t->add_option("--seed", tr.seed, "random seed");
  t->add_option("--epochs", tr.epochs, "training epochs")->check(CLI::PositiveNumber);
  t->add_option("--batch-size", tr.batch_size, "minibatch size")->check(CLI::Range(2, 1 << 20));
  t->add_option("--sigma-x", tr.sigma_x, "measurement noise variance during training")->check(CLI::NonNegativeNumber);
  t->add_option("--sigma-u", tr.sigma_u, "control noise variance during training")->check(CLI::NonNegativeNumber);
  t->footer(config_keys_help());

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a held-out dataset");
  e->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  e->add_option("--data", ev.data, "test dataset")->required();
  e->add_option("--sigma-x", ev.sigma_x, "measurement noise variance")->check(CLI::NonNegativeNumber);
  e->add_option("--sigma-u", ev.sigma_u, "control noise variance")->check(CLI::NonNegativeNumber);
  e->add_option("--sigma-dyn", ev.sigma_dyn, "dynamics noise variance to record (default: from the dataset)");
  e->add_option("--avg", ev.avg, "average samples in latent or image space")->check(CLI::IsMember({"latent", "image"}));
  e->add_option("--samples", ev.samples, "samples per data point")->check(CLI::PositiveNumber);
  e->add_option("--out-dir", ev.out_dir, "output directory");
  e->add_option("--seed", ev.seed, "random seed");
  e->add_flag("--dump-latents", ev.dump_latents, "also write latents.csv");

  UqArgs uq;
  auto* u = app.add_subcommand("uq-sweep", "mean predictive std per noise level");
  u->add_option("--ckpt", uq.ckpt, "checkpoint")->required();
  u->add_option("--data", uq.data, "test dataset")->required();
  u->add_option("--levels", uq.levels, "noise levels sigma_x2 or sigma_x2:sigma_u2")->delimiter(',');
  u->add_option("--out", uq.out, "output CSV");
  u->add_option("--seed", uq.seed, "random seed");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "evaluate an svdkl and a vae checkpoint side by side");
  c->add_option("--svdkl", cmp.svdkl, "svdkl checkpoint")->required();
  c->add_option("--vae", cmp.vae, "vae checkpoint")->required();
  c->add_option("--data", cmp.data, "test dataset")->required();
  c->add_option("--sigma-x", cmp.sigma_x, "measurement noise variance")->check(CLI::NonNegativeNumber);
  c->add_option("--sigma-u", cmp.sigma_u, "control noise variance")->check(CLI::NonNegativeNumber);
  c->add_option("--avg", cmp.avg, "average samples in latent or image space")->check(CLI::IsMember({"latent", "image"}));
  c->add_option("--samples", cmp.samples, "samples per data point")->check(CLI::PositiveNumber);
  c->add_option("--out-dir", cmp.out_dir, "output directory");
  c->add_option("--seed", cmp.seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) run_generate(gen);
    else if (*t) run_train(tr, *t);
    else if (*e) run_eval(ev);
    else if (*u) run_uq(uq);
    else if (*c) run_compare(cmp);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const FormatError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const IoError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const DimensionError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
