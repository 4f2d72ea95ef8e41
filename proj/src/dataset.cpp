#include "ldkl/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>

#include "ldkl/error.hpp"

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

namespace ldkl::data {

sim::Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x4c444b4cu};
  return sim::Rng(seq);
}

namespace {

// Values are kept at f32 precision in memory so a saved file reloads field-exact.
double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor render_frame(const sim::PendulumState& s, const GenerateOptions& o) {
  Tensor gray = sim::render(s, o.height, o.width);
  Tensor out({o.channels, o.height, o.width});
  const std::size_t plane = o.height * o.width;
  for (std::size_t c = 0; c < o.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = f32(gray[i]);
  return out;
}

Measurement stack(const Tensor& prev, const Tensor& cur) {
  Shape shape = prev.shape();
  shape[0] *= 2;
  Tensor frames(shape);
  std::copy(prev.storage().begin(), prev.storage().end(), frames.storage().begin());
  std::copy(cur.storage().begin(), cur.storage().end(), frames.storage().begin() + prev.numel());
  return {std::move(frames)};
}

sim::PendulumState rounded(const sim::PendulumState& s) { return {f32(s.angle), f32(s.velocity)}; }

}  // namespace

Dataset generate_dataset(const GenerateOptions& opts) {
  if (opts.count == 0) throw ConfigError("generate_dataset: count must be at least 1");
  if (opts.episode_length == 0) throw ConfigError("generate_dataset: episode length must be at least 1");
  if (opts.channels != 1 && opts.channels != 3) throw ConfigError("generate_dataset: channels must be 1 or 3");
  opts.noise.validate();
  sim::PendulumParams params = opts.params;
  params.dynamics_noise_std = std::sqrt(opts.noise.sigma_dyn2);
  params.validate();

  Dataset ds;
  ds.header.height = static_cast<std::uint32_t>(opts.height);
  ds.header.width = static_cast<std::uint32_t>(opts.width);
  ds.header.channels = static_cast<std::uint32_t>(opts.channels);
  ds.header.count = opts.count;
  ds.header.params = params;
  ds.header.noise = opts.noise;
  ds.transitions.resize(opts.count);

  const std::size_t episodes = (opts.count + opts.episode_length - 1) / opts.episode_length;
#pragma omp parallel for schedule(dynamic)
  for (long e = 0; e < static_cast<long>(episodes); ++e) {
    sim::Rng rng = make_stream(opts.seed, static_cast<std::uint64_t>(e));
    std::uniform_real_distribution<double> angle0(-std::numbers::pi, std::numbers::pi);
    std::uniform_real_distribution<double> vel0(-1.0, 1.0);
    std::uniform_real_distribution<double> torque(-params.torque_limit, params.torque_limit);

    sim::PendulumState s{sim::wrap_angle(angle0(rng)), vel0(rng)};
    Tensor prev_frame = render_frame(s, opts);
    // One warm-up step so the first measurement already has two distinct frames.
    s = sim::step_dynamics(s, torque(rng), params, rng);
    Tensor frame = render_frame(s, opts);

    const std::size_t first = static_cast<std::size_t>(e) * opts.episode_length;
    const std::size_t last = std::min(opts.count, first + opts.episode_length);
    for (std::size_t i = first; i < last; ++i) {
      const double u = f32(torque(rng));
      const sim::PendulumState next = sim::step_dynamics(s, u, params, rng);
      Tensor next_frame = render_frame(next, opts);
      Transition& tr = ds.transitions[i];
      tr.x_t = stack(prev_frame, frame);
      tr.u_t = u;
      tr.x_next = stack(frame, next_frame);
      tr.state_t = rounded(s);
      tr.state_next = rounded(next);
      prev_frame = std::move(frame);
      frame = std::move(next_frame);
      s = next;
    }
  }
  return ds;
}

namespace {

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.write(buf, sizeof(T));
  }
  void frames(const Tensor& t) {
    for (double v : t.storage()) put(static_cast<float>(v));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get() {
    if (offset_ + sizeof(T) > bytes_.size())
      throw FormatError(path_ + ": truncated at byte " + std::to_string(offset_) + " (need " +
                        std::to_string(sizeof(T)) + " more bytes, file has " + std::to_string(bytes_.size()) + ")");
    T v;
    std::memcpy(&v, bytes_.data() + offset_, sizeof(T));
    offset_ += sizeof(T);
    return v;
  }
  std::size_t offset() const { return offset_; }

 private:
  const std::vector<char>& bytes_;
  std::string path_;
  std::size_t offset_ = 0;
};

Tensor read_frames(Reader& r, const DatasetHeader& h) {
  Tensor t({2ull * h.channels, h.height, h.width});
  for (double& v : t.storage()) v = static_cast<double>(r.get<float>());
  return t;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  Writer w(out);
  out.write(kDatasetMagic, 4);
  const DatasetHeader& h = ds.header;
  w.put(h.version);
  w.put(h.height);
  w.put(h.width);
  w.put(h.channels);
  w.put(static_cast<std::uint64_t>(ds.transitions.size()));
  const sim::PendulumParams& p = h.params;
  for (double v : {p.mass, p.length, p.gravity, p.dt, p.torque_limit, p.dynamics_noise_std, p.velocity_limit})
    w.put(v);
  for (double v : {h.noise.sigma_x2, h.noise.sigma_u2, h.noise.sigma_dyn2}) w.put(v);
  for (const Transition& tr : ds.transitions) {
    w.frames(tr.x_t.frames);
    w.put(static_cast<float>(tr.u_t));
    w.frames(tr.x_next.frames);
    for (double v : {tr.state_t.angle, tr.state_t.velocity, tr.state_next.angle, tr.state_next.velocity})
      w.put(static_cast<float>(v));
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());

  char magic[4];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw FormatError(path.string() + ": bad magic at byte 0, expected \"LDKL\"");
  Dataset ds;
  DatasetHeader& h = ds.header;
  h.version = r.get<std::uint16_t>();
  if (h.version != kDatasetVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(h.version) + " at byte 4");
  h.height = r.get<std::uint32_t>();
  h.width = r.get<std::uint32_t>();
  h.channels = r.get<std::uint32_t>();
  h.count = r.get<std::uint64_t>();
  if (h.height == 0 || h.width == 0 || h.channels == 0)
    throw FormatError(path.string() + ": zero image extent in header at byte " + std::to_string(r.offset()));
  sim::PendulumParams& p = h.params;
  for (double* v : {&p.mass, &p.length, &p.gravity, &p.dt, &p.torque_limit, &p.dynamics_noise_std,
                    &p.velocity_limit})
    *v = r.get<double>();
  for (double* v : {&h.noise.sigma_x2, &h.noise.sigma_u2, &h.noise.sigma_dyn2}) *v = r.get<double>();

  const std::size_t record = (2 * h.frame_values() + 5) * sizeof(float);
  if (bytes.size() - r.offset() < h.count * record)
    throw FormatError(path.string() + ": truncated at byte " + std::to_string(bytes.size()) + ", header declares " +
                      std::to_string(h.count) + " records ending at byte " +
                      std::to_string(r.offset() + h.count * record));
  ds.transitions.resize(h.count);
  for (Transition& tr : ds.transitions) {
    tr.x_t.frames = read_frames(r, h);
    tr.u_t = r.get<float>();
    tr.x_next.frames = read_frames(r, h);
    tr.state_t.angle = r.get<float>();
    tr.state_t.velocity = r.get<float>();
    tr.state_next.angle = r.get<float>();
    tr.state_next.velocity = r.get<float>();
  }
  if (r.offset() != bytes.size())
    throw FormatError(path.string() + ": " + std::to_string(bytes.size() - r.offset()) +
                      " trailing bytes after last record at byte " + std::to_string(r.offset()));
  return ds;
}

}  // namespace ldkl::data
