#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "ldkl/checkpoint.hpp"
#include "ldkl/config.hpp"
#include "ldkl/error.hpp"
#include "ldkl/evaluation.hpp"
#include "ldkl/pgm.hpp"

using namespace ldkl;
namespace fs = std::filesystem;

namespace {

std::vector<sim::PendulumState> ring_states(std::size_t n) {
  std::vector<sim::PendulumState> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = -std::numbers::pi + (2.0 * std::numbers::pi * (i + 0.5)) / n;
    s[i] = {phi, std::sin(3.0 * phi)};
  }
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("ldkl_test_eval_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& leaf) const { return path / leaf; }
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LDKL_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("latent_correlation oracles") {
  const std::size_t n = 1000;
  const auto states = ring_states(n);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor means({n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    means.at(i, 0) = std::sin(states[i].angle);
    means.at(i, 1) = -2.0 * std::cos(states[i].angle) + 5.0;
    means.at(i, 2) = g(rng);
    means.at(i, 3) = 0.25;
  }
  const auto c = eval::latent_correlation(means, states);
  CHECK(c.sin[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c.cos[1] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(std::abs(c.sin[2]) < 0.1);
  CHECK(std::abs(c.cos[2]) < 0.1);
  CHECK(std::abs(c.velocity[2]) < 0.1);
  CHECK(c.degenerate[3]);
  CHECK_FALSE(c.degenerate[0]);
  CHECK(c.sin[3] == 0.0);
  CHECK(c.max_abs_sin == doctest::Approx(1.0));
  CHECK(c.max_abs_cos == doctest::Approx(1.0));

  CHECK_THROWS_AS(eval::latent_correlation(Tensor({20, 2}), ring_states(20)), ConfigError);
  CHECK_THROWS_AS(eval::latent_correlation(Tensor({40, 2}), ring_states(41)), DimensionError);
}

TEST_CASE("psnr") {
  CHECK(eval::psnr(1.0) == 0.0);
  CHECK(eval::psnr(0.01) == doctest::Approx(20.0));
  CHECK(eval::psnr(0.0) == std::numeric_limits<double>::infinity());
}

TEST_CASE("pgm round trip and tiling") {
  TempDir dir("pgm");
  Tensor img({3, 5});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(i) / 14.0;
  img[0] = -0.5;  // clamped
  img[1] = 2.0;
  img::write_pgm(dir / "a.pgm", img);
  const std::string bytes = slurp(dir / "a.pgm");
  CHECK(bytes.starts_with("P5\n5 3\n255\n"));
  const Tensor back = img::read_pgm(dir / "a.pgm");
  REQUIRE(back.shape() == Shape{3, 5});
  CHECK(back[0] == 0.0);
  CHECK(back[1] == 1.0);
  for (std::size_t i = 2; i < img.numel(); ++i) CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255 + 1e-12);

  const Tensor t = img::tile({{img, img}, {img, img}}, 1, 1.0);
  CHECK(t.shape() == Shape{7, 11});
  CHECK(t.at(3, 0) == 1.0);
  CHECK(t.at(4, 6) == img.at(0, 0));
  CHECK_THROWS_AS(img::tile({{img, Tensor({2, 2})}}), DimensionError);
}

TEST_CASE("config files") {
  const auto kv = cfg::parse_key_values("# desk scale\nlatent_dim = 8\n\ninducing_points=8  # grid\nmodel = vae\n");
  CHECK(kv.size() == 3);
  model::ModelConfig m;
  train::TrainConfig t;
  cfg::apply(kv, m, t);
  CHECK(m.latent_dim == 8);
  CHECK(m.inducing_points == 8);
  CHECK(m.kind == model::ModelKind::Vae);

  CHECK_THROWS_AS(cfg::apply(cfg::parse_key_values("latnet_dim = 3\n"), m, t), ConfigError);
  CHECK_THROWS_AS(cfg::apply(cfg::parse_key_values("latent_dim = three\n"), m, t), ConfigError);
  CHECK_THROWS_AS(cfg::parse_key_values("alpha = 0.5\nalpha = 0.6\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_key_values("just words\n"), ConfigError);
  try {
    cfg::parse_key_values("a = 1\n\nbroken\n", "x.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("x.cfg:3") != std::string::npos);
  }

  // Full-size settings (84x84, |z|=20, P=32) are expressible.
  model::ModelConfig big;
  train::TrainConfig bt;
  cfg::apply(cfg::parse_key_values("latent_dim = 20\ninducing_points = 32\nlr_nn = 3e-4\nlr_gp = 1e-2\n"
                                   "weight_decay = 1e-2\nalpha = 0.9\nbeta = 1.0\n"),
             big, bt);
  CHECK(big.latent_dim == 20);
  CHECK(bt.alpha == 0.9);
  CHECK(cfg::describe(big, bt).contains("sigma_x2"));
}

TEST_CASE("evaluation on an untrained model") {
  data::GenerateOptions o;
  o.count = 40;
  o.episode_length = 10;
  o.height = 16;
  o.width = 16;
  o.seed = 2;
  const data::Dataset test = data::generate_dataset(o);
  model::ModelConfig mc;
  mc.height = 16;
  mc.width = 16;
  mc.latent_dim = 3;
  mc.inducing_points = 4;
  mc.conv_filters = 4;
  mc.enc_hidden = 8;
  mc.fwd_hidden = 8;
  model::LatentModel m(mc, 1);

  eval::EvalOptions opts;
  opts.samples = 3;
  opts.batch_size = 16;
  opts.grid_rows = 4;
  eval::EvalArtifacts art;
  const eval::EvalRow clean = eval::evaluate(m, test, opts, &art);
  CHECK(clean.count == 40);
  CHECK(clean.denoising_gain == 0.0);
  CHECK(std::isfinite(clean.recon_psnr));
  CHECK(clean.enc_std > 0.0);
  CHECK(art.latent_means.shape() == Shape{40, 3});
  CHECK(art.grid.shape() == Shape{4 * 16 + 3, 4 * 16 + 3});
  CHECK(m.training());  // the previous mode is restored

  // Same seed, same report.
  const eval::EvalRow again = eval::evaluate(m, test, opts);
  CHECK(again.recon_mse == clean.recon_mse);
  CHECK(again.next_mse == clean.next_mse);

  opts.sigma_x2 = 0.5;
  const eval::EvalRow noisy = eval::evaluate(m, test, opts);
  CHECK(std::isfinite(noisy.denoising_gain));
  CHECK(noisy.noisy_psnr == doctest::Approx(eval::psnr(0.5)).epsilon(0.05));

  const eval::UqLevel one[] = {{0.0, 0.0}};
  CHECK(eval::uq_sweep(m, test, one, 0, 16).size() == 1);

  TempDir dir("reports");
  eval::write_report_csv({clean, noisy}, dir / "report.csv");
  const std::string report = slurp(dir / "report.csv");
  CHECK(count_lines(report) == 3);
  CHECK(report.starts_with("model,sigma_x2,sigma_u2,sigma_dyn2,count,recon_mse,recon_psnr,noisy_psnr,"
                           "denoising_gain,next_mse,persistence_mse,enc_std,fwd_std"));
  eval::write_uq_csv(eval::uq_sweep(m, test, one, 0, 16), dir / "uq.csv");
  CHECK(count_lines(slurp(dir / "uq.csv")) == 2);
  eval::write_latents_csv(art, test, dir / "latents.csv");
  CHECK(count_lines(slurp(dir / "latents.csv")) == 41);
}

TEST_CASE("command line exit codes and artifacts") {
  TempDir dir("cli");
  const std::string d = dir.path.string();

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("generate-data --count 0 --out " + d + "/x.ldkl") == 2);
  CHECK(run_cli("train --out " + d + "/m.ldkc") == 2);
  CHECK(run_cli("eval --ckpt nothing.ldkc") == 2);

  REQUIRE(run_cli("generate-data --count 40 --episode-len 10 --h 16 --w 16 --seed 4 --out " + d + "/a.ldkl") == 0);
  REQUIRE(run_cli("generate-data --count 40 --episode-len 10 --h 16 --w 16 --seed 4 --out " + d + "/b.ldkl") == 0);
  CHECK(slurp(dir / "a.ldkl") == slurp(dir / "b.ldkl"));
  CHECK(data::load_dataset(dir / "a.ldkl").transitions.size() == 40);

  {
    std::ofstream bad(dir / "bad.ldkl", std::ios::binary);
    bad << "not a dataset";
  }
  CHECK(run_cli("train --data " + d + "/bad.ldkl --out " + d + "/m.ldkc") == 3);

  {
    std::ofstream cfgf(dir / "tiny.cfg");
    cfgf << "latent_dim = 2\ninducing_points = 4\nconv_filters = 4\nenc_hidden = 8\nfwd_hidden = 8\n"
            "epochs = 1\nbatch_size = 8\n";
  }
  {
    std::ofstream cfgf(dir / "typo.cfg");
    cfgf << "latent_dims = 2\n";
  }
  CHECK(run_cli("train --data " + d + "/a.ldkl --config " + d + "/typo.cfg --out " + d + "/m.ldkc") == 2);

  for (const char* family : {"svdkl", "vae"}) {
    const std::string ck = d + "/" + family + ".ldkc";
    REQUIRE(run_cli("train --data " + d + "/a.ldkl --config " + d + "/tiny.cfg --model " + family + " --out " + ck) ==
            0);
    CHECK(fs::exists(dir / (std::string(family) + ".metrics.csv")));
    CHECK(model::read_checkpoint_config(ck).kind == model::parse_kind(family));
  }

  const std::string eval_args = "eval --ckpt " + d + "/svdkl.ldkc --data " + d + "/b.ldkl --samples 2 --dump-latents";
  REQUIRE(run_cli(eval_args + " --out-dir " + d + "/e1") == 0);
  REQUIRE(run_cli(eval_args + " --out-dir " + d + "/e2") == 0);
  for (const char* f : {"report.csv", "grid.pgm", "latents.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(dir / "e1" / f));
    CHECK(slurp(dir / "e1" / f) == slurp(dir / "e2" / f));
  }
  CHECK(run_cli("eval --ckpt " + d + "/a.ldkl --data " + d + "/b.ldkl --out-dir " + d + "/e3") == 3);

  REQUIRE(run_cli("uq-sweep --ckpt " + d + "/svdkl.ldkc --data " + d + "/b.ldkl --levels 0.5 --out " + d +
                  "/uq.csv") == 0);
  CHECK(count_lines(slurp(dir / "uq.csv")) == 2);
  CHECK(run_cli("uq-sweep --ckpt " + d + "/svdkl.ldkc --data " + d + "/b.ldkl --levels x:y --out " + d +
                "/uq.csv") == 2);

  REQUIRE(run_cli("compare --svdkl " + d + "/svdkl.ldkc --vae " + d + "/vae.ldkc --data " + d +
                  "/b.ldkl --samples 2 --out-dir " + d + "/cmp") == 0);
  const std::string cmp = slurp(dir / "cmp" / "compare.csv");
  CHECK(cmp.find("svdkl") != std::string::npos);
  CHECK(cmp.find("vae") != std::string::npos);
  CHECK(fs::exists(dir / "cmp" / "grid_svdkl.pgm"));
  CHECK(fs::exists(dir / "cmp" / "grid_vae.pgm"));
  CHECK(count_lines(slurp(dir / "cmp" / "report.csv")) == 3);
}
