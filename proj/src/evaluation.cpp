#include "ldkl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ldkl/error.hpp"
#include "ldkl/pgm.hpp"
#include "ldkl/training.hpp"

namespace ldkl::eval {

std::string avg_mode_name(AvgMode mode) { return mode == AvgMode::Latent ? "latent" : "image"; }

AvgMode parse_avg_mode(const std::string& name) {
  if (name == "latent") return AvgMode::Latent;
  if (name == "image") return AvgMode::Image;
  throw ConfigError("unknown averaging mode '" + name + "' (expected latent or image)");
}

void EvalOptions::validate() const {
  if (!(sigma_x2 >= 0.0) || !(sigma_u2 >= 0.0)) throw ConfigError("noise variances must be non-negative");
  if (samples == 0) throw ConfigError("samples must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

double psnr(double mse) { return 10.0 * std::log10(1.0 / mse); }

namespace {

double pearson(std::span<const double> a, std::span<const double> b, bool* degenerate) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 1e-24 * n) || !(sbb > 1e-24 * n)) {
    *degenerate = true;
    return 0.0;
  }
  return sab / std::sqrt(saa * sbb);
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

Tensor sample(const Tensor& mean, const Tensor& std, sim::Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor z(mean.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = mean[i] + std[i] * n(rng);
  return z;
}

Tensor decode(model::LatentModel& m, const Tensor& z) {
  ad::Tape tape;
  return m.decode(tape, tape.constant(z)).value();
}

gp::DiagonalGaussian predict(model::LatentModel& m, const Tensor& z, const Tensor& u) {
  ad::Tape tape;
  return m.predict_next(tape, tape.constant(z), tape.constant(u)).values();
}

void accumulate(Tensor& acc, const Tensor& x) {
  for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += x[i];
}

double squared_error(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// [H x W] plane of the most recent frame of element k in a [B, 2C, H, W] batch.
Tensor latest_frame(const Tensor& x, std::size_t k) {
  const std::size_t c2 = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({h, w});
  const std::size_t base = (k * c2 + c2 / 2) * h * w;
  std::copy_n(x.storage().begin() + base, h * w, out.storage().begin());
  return out;
}

Tensor gather_clean(const data::Dataset& ds, std::size_t start, std::size_t count, bool next) {
  const Shape frame = ds.transitions[start].x_t.frames.shape();
  Shape shape{count};
  shape.insert(shape.end(), frame.begin(), frame.end());
  Tensor out(shape);
  const std::size_t per = shape_numel(frame);
  for (std::size_t k = 0; k < count; ++k) {
    const data::Transition& tr = ds.transitions[start + k];
    const Tensor& src = next ? tr.x_next.frames : tr.x_t.frames;
    std::copy(src.storage().begin(), src.storage().end(), out.storage().begin() + k * per);
  }
  return out;
}

class TrainingModeGuard {
 public:
  explicit TrainingModeGuard(model::LatentModel& m) : m_(m), was_(m.training()) { m_.set_training(false); }
  ~TrainingModeGuard() { m_.set_training(was_); }

 private:
  model::LatentModel& m_;
  bool was_;
};

}  // namespace

CorrelationResult latent_correlation(const Tensor& means, std::span<const sim::PendulumState> states) {
  if (means.rank() != 2 || means.dim(0) != states.size())
    throw DimensionError("latent_correlation: means " + shape_string(means.shape()) + " for " +
                         std::to_string(states.size()) + " states");
  if (states.size() < 30) throw ConfigError("latent_correlation needs at least 30 samples");
  const std::size_t n = states.size(), d = means.dim(1);
  std::vector<double> s(n), c(n), v(n), col(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = std::sin(states[i].angle);
    c[i] = std::cos(states[i].angle);
    v[i] = states[i].velocity;
  }
  CorrelationResult r;
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = means[i * d + j];
    bool degenerate = false;
    r.sin.push_back(pearson(col, s, &degenerate));
    r.cos.push_back(pearson(col, c, &degenerate));
    r.velocity.push_back(pearson(col, v, &degenerate));
    bool constant = false;
    pearson(col, col, &constant);
    r.degenerate.push_back(constant);
  }
  r.max_abs_sin = max_abs(r.sin);
  r.max_abs_cos = max_abs(r.cos);
  r.max_abs_velocity = max_abs(r.velocity);
  return r;
}

EvalRow evaluate(model::LatentModel& model, const data::Dataset& test, const EvalOptions& opts,
                 EvalArtifacts* artifacts) {
  opts.validate();
  const std::size_t n = test.transitions.size();
  if (n == 0) throw ConfigError("evaluation set is empty");
  if (test.transitions.front().x_t.frames.shape() != model.config().measurement_shape())
    throw ConfigError("test measurements " + shape_string(test.transitions.front().x_t.frames.shape()) +
                      " do not match the model's " + shape_string(model.config().measurement_shape()));
  TrainingModeGuard guard(model);
  sim::Rng noise_rng = data::make_stream(opts.seed, 0x4e4f);
  sim::Rng sample_rng = data::make_stream(opts.seed, 0x5a53);
  const sim::NoiseConfig noise{opts.sigma_x2, opts.sigma_u2, 0.0};
  const std::size_t zd = model.config().latent_dim;
  const double inv_samples = 1.0 / static_cast<double>(opts.samples);

  EvalRow row;
  row.model = model::kind_name(model.kind());
  row.sigma_x2 = opts.sigma_x2;
  row.sigma_u2 = opts.sigma_u2;
  row.sigma_dyn2 = test.header.noise.sigma_dyn2;
  row.count = n;

  Tensor means({n, zd}), stds({n, zd});
  double se_recon = 0.0, se_noisy = 0.0, se_next = 0.0, se_persist = 0.0, fwd_std = 0.0;
  std::vector<std::vector<Tensor>> grid_cells;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});

  for (std::size_t start = 0; start < n; start += opts.batch_size) {
    const std::size_t count = std::min(opts.batch_size, n - start);
    const train::Batch batch =
        train::make_batch(test, std::span<const std::size_t>(idx).subspan(start, count), noise, noise_rng);
    const Tensor clean_t = gather_clean(test, start, count, false);
    const Tensor clean_next = gather_clean(test, start, count, true);

    gp::DiagonalGaussian enc;
    {
      ad::Tape tape;
      enc = model.encode(tape, tape.constant(batch.x_t)).values();
    }
    std::copy(enc.mean.storage().begin(), enc.mean.storage().end(), means.storage().begin() + start * zd);
    std::copy(enc.std.storage().begin(), enc.std.storage().end(), stds.storage().begin() + start * zd);
    const gp::DiagonalGaussian at_mean = predict(model, enc.mean, batch.u);
    for (double v : at_mean.std.storage()) fwd_std += v;

    Tensor recon(clean_t.shape()), next(clean_t.shape());
    Tensor z_acc(enc.mean.shape()), zn_acc(enc.mean.shape());
    for (std::size_t k = 0; k < opts.samples; ++k) {
      const Tensor z = sample(enc.mean, enc.std, sample_rng);
      const gp::DiagonalGaussian pn = predict(model, z, batch.u);
      const Tensor zn = sample(pn.mean, pn.std, sample_rng);
      if (opts.avg == AvgMode::Image) {
        accumulate(recon, decode(model, z));
        accumulate(next, decode(model, zn));
      } else {
        accumulate(z_acc, z);
        accumulate(zn_acc, zn);
      }
    }
    if (opts.avg == AvgMode::Image) {
      for (double& v : recon.storage()) v *= inv_samples;
      for (double& v : next.storage()) v *= inv_samples;
    } else {
      for (double& v : z_acc.storage()) v *= inv_samples;
      for (double& v : zn_acc.storage()) v *= inv_samples;
      recon = decode(model, z_acc);
      next = decode(model, zn_acc);
    }

    se_recon += squared_error(recon, clean_t);
    se_noisy += squared_error(batch.x_t, clean_t);
    se_next += squared_error(next, clean_next);
    se_persist += squared_error(recon, clean_next);

    for (std::size_t k = 0; k < count && grid_cells.size() < opts.grid_rows; ++k)
      grid_cells.push_back({latest_frame(clean_t, k), latest_frame(batch.x_t, k), latest_frame(recon, k),
                            latest_frame(next, k)});
  }

  const double pixels = static_cast<double>(n * shape_numel(model.config().measurement_shape()));
  row.recon_mse = se_recon / pixels;
  row.recon_psnr = psnr(row.recon_mse);
  row.noisy_psnr = se_noisy > 0.0 ? psnr(se_noisy / pixels) : INFINITY;
  // Without measurement noise there is nothing to remove; the gain is defined as 0.
  row.denoising_gain = se_noisy > 0.0 ? row.recon_psnr - row.noisy_psnr : 0.0;
  row.next_mse = se_next / pixels;
  row.persistence_mse = se_persist / pixels;
  row.enc_std = std::accumulate(stds.storage().begin(), stds.storage().end(), 0.0) / static_cast<double>(n * zd);
  row.fwd_std = fwd_std / static_cast<double>(n * zd);
  if (n >= 30) {
    std::vector<sim::PendulumState> states(n);
    for (std::size_t i = 0; i < n; ++i) states[i] = test.transitions[i].state_t;
    row.corr = latent_correlation(means, states);
  }
  if (artifacts) {
    artifacts->grid = img::tile(grid_cells);
    artifacts->latent_means = std::move(means);
    artifacts->latent_stds = std::move(stds);
  }
  return row;
}

std::vector<UqRow> uq_sweep(model::LatentModel& model, const data::Dataset& test, std::span<const UqLevel> levels,
                            std::uint64_t seed, std::size_t batch_size) {
  if (levels.empty()) throw ConfigError("uq_sweep needs at least one noise level");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t n = test.transitions.size();
  if (n == 0) throw ConfigError("evaluation set is empty");
  TrainingModeGuard guard(model);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<UqRow> rows;
  for (const UqLevel& level : levels) {
    // Each level sees the same noise stream so levels differ only in scale.
    sim::Rng rng = data::make_stream(seed, 0x4e4f);
    const sim::NoiseConfig noise{level.sigma_x2, level.sigma_u2, 0.0};
    noise.validate();
    double enc_sum = 0.0, fwd_sum = 0.0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t count = std::min(batch_size, n - start);
      const train::Batch batch =
          train::make_batch(test, std::span<const std::size_t>(idx).subspan(start, count), noise, rng);
      ad::Tape tape;
      const model::LatentDistribution enc = model.encode(tape, tape.constant(batch.x_t));
      const model::LatentDistribution fwd =
          model.predict_next(tape, tape.constant(enc.mean.value()), tape.constant(batch.u));
      for (double v : enc.std.value().storage()) enc_sum += v;
      for (double v : fwd.std.value().storage()) fwd_sum += v;
    }
    const double denom = static_cast<double>(n * model.config().latent_dim);
    rows.push_back({level.sigma_x2, level.sigma_u2, enc_sum / denom, fwd_sum / denom});
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string joined(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + fmt(v[i]);
  return s;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  return f;
}

}  // namespace

void write_report_csv(const std::vector<EvalRow>& rows, const std::filesystem::path& path) {
  std::ofstream f = open_out(path);
  f << "model,sigma_x2,sigma_u2,sigma_dyn2,count,recon_mse,recon_psnr,noisy_psnr,denoising_gain,next_mse,"
       "persistence_mse,enc_std,fwd_std,max_corr_sin,max_corr_cos,max_corr_velocity,corr_sin,corr_cos,"
       "corr_velocity,degenerate_dims\n";
  for (const EvalRow& r : rows) {
    std::string degenerate;
    for (std::size_t i = 0; i < r.corr.degenerate.size(); ++i)
      if (r.corr.degenerate[i]) degenerate += (degenerate.empty() ? "" : ";") + std::to_string(i);
    f << r.model << ',' << fmt(r.sigma_x2) << ',' << fmt(r.sigma_u2) << ',' << fmt(r.sigma_dyn2) << ',' << r.count
      << ',' << fmt(r.recon_mse) << ',' << fmt(r.recon_psnr) << ',' << fmt(r.noisy_psnr) << ','
      << fmt(r.denoising_gain) << ',' << fmt(r.next_mse) << ',' << fmt(r.persistence_mse) << ',' << fmt(r.enc_std)
      << ',' << fmt(r.fwd_std) << ',' << fmt(r.corr.max_abs_sin) << ',' << fmt(r.corr.max_abs_cos) << ','
      << fmt(r.corr.max_abs_velocity) << ',' << joined(r.corr.sin) << ',' << joined(r.corr.cos) << ','
      << joined(r.corr.velocity) << ',' << degenerate << '\n';
  }
  if (!f) throw IoError("write failed for " + path.string());
}

void write_uq_csv(const std::vector<UqRow>& rows, const std::filesystem::path& path) {
  std::ofstream f = open_out(path);
  f << "sigma_x2,sigma_u2,enc_std,fwd_std\n";
  for (const UqRow& r : rows)
    f << fmt(r.sigma_x2) << ',' << fmt(r.sigma_u2) << ',' << fmt(r.enc_std) << ',' << fmt(r.fwd_std) << '\n';
  if (!f) throw IoError("write failed for " + path.string());
}

void write_compare_csv(const std::vector<EvalRow>& rows, const std::filesystem::path& path) {
  std::ofstream f = open_out(path);
  f << "metric";
  for (const EvalRow& r : rows) f << ',' << r.model;
  f << '\n';
  const std::pair<const char*, double EvalRow::*> metrics[] = {
      {"recon_mse", &EvalRow::recon_mse},         {"recon_psnr", &EvalRow::recon_psnr},
      {"denoising_gain", &EvalRow::denoising_gain}, {"next_mse", &EvalRow::next_mse},
      {"persistence_mse", &EvalRow::persistence_mse}, {"enc_std", &EvalRow::enc_std},
      {"fwd_std", &EvalRow::fwd_std}};
  for (const auto& [name, field] : metrics) {
    f << name;
    for (const EvalRow& r : rows) f << ',' << fmt(r.*field);
    f << '\n';
  }
  f << "max_corr_sin";
  for (const EvalRow& r : rows) f << ',' << fmt(r.corr.max_abs_sin);
  f << "\nmax_corr_cos";
  for (const EvalRow& r : rows) f << ',' << fmt(r.corr.max_abs_cos);
  f << "\nmax_corr_velocity";
  for (const EvalRow& r : rows) f << ',' << fmt(r.corr.max_abs_velocity);
  f << '\n';
  if (!f) throw IoError("write failed for " + path.string());
}

void write_latents_csv(const EvalArtifacts& artifacts, const data::Dataset& test, const std::filesystem::path& path) {
  const Tensor& m = artifacts.latent_means;
  const Tensor& s = artifacts.latent_stds;
  if (m.rank() != 2 || m.dim(0) != test.transitions.size())
    throw DimensionError("write_latents_csv: latents do not cover the test set");
  std::ofstream f = open_out(path);
  const std::size_t d = m.dim(1);
  f << "index,angle,velocity";
  for (std::size_t j = 0; j < d; ++j) f << ",mean_" << j;
  for (std::size_t j = 0; j < d; ++j) f << ",std_" << j;
  f << '\n';
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    const sim::PendulumState& st = test.transitions[i].state_t;
    f << i << ',' << fmt(st.angle) << ',' << fmt(st.velocity);
    for (std::size_t j = 0; j < d; ++j) f << ',' << fmt(m[i * d + j]);
    for (std::size_t j = 0; j < d; ++j) f << ',' << fmt(s[i * d + j]);
    f << '\n';
  }
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace ldkl::eval
