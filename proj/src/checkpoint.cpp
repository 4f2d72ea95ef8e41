#include "ldkl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ldkl/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace ldkl::model {

namespace {

class Sink {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Source {
 public:
  Source(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (offset_ + n > bytes_.size())
      throw FormatError(path_ + ": truncated checkpoint at byte " + std::to_string(offset_));
    const char* p = bytes_.data() + offset_;
    offset_ += n;
    return p;
  }
  std::size_t offset() const { return offset_; }
  bool done() const { return offset_ == bytes_.size(); }
  const std::string& path() const { return path_; }

 private:
  std::vector<char> bytes_;
  std::string path_;
  std::size_t offset_ = 0;
};

void put_config(Sink& s, const ModelConfig& c) {
  s.put<std::uint32_t>(c.kind == ModelKind::Svdkl ? 0u : 1u);
  for (std::size_t v : {c.height, c.width, c.channels_per_frame, c.latent_dim, c.inducing_points, c.conv_filters,
                        c.enc_hidden, c.fwd_hidden})
    s.put<std::uint64_t>(v);
  for (double v : {c.grid_lo, c.grid_hi, c.torque_limit}) s.put(v);
}

ModelConfig get_config(Source& s) {
  ModelConfig c;
  const auto kind = s.get<std::uint32_t>();
  if (kind > 1) throw FormatError(s.path() + ": unknown model kind " + std::to_string(kind) + " at byte 6");
  c.kind = kind == 0 ? ModelKind::Svdkl : ModelKind::Vae;
  for (std::size_t* v : {&c.height, &c.width, &c.channels_per_frame, &c.latent_dim, &c.inducing_points,
                         &c.conv_filters, &c.enc_hidden, &c.fwd_hidden})
    *v = s.get<std::uint64_t>();
  for (double* v : {&c.grid_lo, &c.grid_hi, &c.torque_limit}) *v = s.get<double>();
  return c;
}

Source open_checked(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Source src(std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()),
             path.string());
  if (std::memcmp(src.take(4), kCheckpointMagic, 4) != 0)
    throw FormatError(path.string() + ": bad magic at byte 0, expected \"LDKC\"");
  const auto version = src.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version) + " at byte 4");
  return src;
}

std::string describe(const ModelConfig& c) {
  return kind_name(c.kind) + " " + std::to_string(c.height) + "x" + std::to_string(c.width) + "x" +
         std::to_string(c.channels_per_frame) + " |z|=" + std::to_string(c.latent_dim) +
         " P=" + std::to_string(c.inducing_points) + " filters=" + std::to_string(c.conv_filters) +
         " hidden=" + std::to_string(c.enc_hidden) + "/" + std::to_string(c.fwd_hidden);
}

}  // namespace

void save_checkpoint(const LatentModel& model, const std::filesystem::path& path) {
  Sink s;
  s.raw(kCheckpointMagic, 4);
  s.put(kCheckpointVersion);
  put_config(s, model.config());
  s.put<std::uint64_t>(model.params().size());
  for (const ad::Parameter& p : model.params().items()) {
    s.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    s.raw(p.name.data(), p.name.size());
    s.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) s.put<std::uint64_t>(d);
    for (double v : p.value.storage()) s.put(v);
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(s.bytes().data(), static_cast<std::streamsize>(s.bytes().size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  Source src = open_checked(path);
  return get_config(src);
}

LatentModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  Source src = open_checked(path);
  const ModelConfig stored = get_config(src);
  if (!(stored == cfg))
    throw ConfigError(path.string() + ": checkpoint holds " + describe(stored) + ", configuration asks for " +
                      describe(cfg));
  LatentModel model(cfg, 0);
  ad::ParameterStore& store = model.params();
  const auto count = src.get<std::uint64_t>();
  if (count != store.size())
    throw ConfigError(path.string() + ": checkpoint has " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(store.size()));
  for (ad::Parameter& p : store.items()) {
    const auto len = src.get<std::uint32_t>();
    const std::string name(src.take(len), len);
    if (name != p.name)
      throw ConfigError(path.string() + ": parameter '" + name + "' found where '" + p.name + "' was expected");
    const auto rank = src.get<std::uint32_t>();
    Shape shape(rank);
    for (std::size_t& d : shape) d = src.get<std::uint64_t>();
    if (shape != p.value.shape())
      throw ConfigError(path.string() + ": parameter '" + name + "' has shape " + shape_string(shape) +
                        ", model expects " + shape_string(p.value.shape()));
    for (double& v : p.value.storage()) v = src.get<double>();
  }
  if (!src.done())
    throw FormatError(path.string() + ": trailing bytes after last record at byte " + std::to_string(src.offset()));
  return model;
}

LatentModel load_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint(path, read_checkpoint_config(path));
}

}  // namespace ldkl::model
