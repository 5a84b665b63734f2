#include "dnet/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "dnet/error.hpp"

namespace dnet::io {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail_io(const std::string& msg) { throw Error(ErrorCode::io, msg); }
[[noreturn]] void fail_parse(const std::string& msg) { throw Error(ErrorCode::parse, msg); }

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot create " + path.string());
  return out;
}

// Reads one unsigned header token, skipping whitespace and comments.
long header_number(std::istream& in, const std::string& what, const char* field) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF) fail_parse(what + ": truncated header (missing " + field + ")");
  if (!std::isdigit(c)) fail_parse(what + ": malformed header (bad " + field + ")");
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1'000'000'000) fail_parse(what + ": " + field + " out of range");
    c = in.get();
  }
  if (c == EOF) fail_parse(what + ": truncated header after " + field);
  if (!std::isspace(c) && c != '#') fail_parse(what + ": malformed header (bad " + field + ")");
  if (c == '#') in.unget();
  return v;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string strip_comment(const std::string& line) {
  const auto p = line.find('#');
  return trim(p == std::string::npos ? line : line.substr(0, p));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw Error(ErrorCode::config, "bad value for " + key + ": '" + value + "'");
  return v;
}

std::array<int, 3> parse_triple(const std::string& key, const std::string& value) {
  std::array<int, 3> out{};
  std::stringstream ss(value);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw Error(ErrorCode::config, key + " needs exactly three values");
    out[i++] = parse_number<int>(key, trim(part));
  }
  if (i != 3) throw Error(ErrorCode::config, key + " needs exactly three values");
  return out;
}

int parse_scale(const std::string& value) {
  double scale = 0;
  const auto slash = value.find('/');
  if (slash != std::string::npos) {
    const double num = parse_number<double>("channels_scale", trim(value.substr(0, slash)));
    const double den = parse_number<double>("channels_scale", trim(value.substr(slash + 1)));
    if (den == 0) throw Error(ErrorCode::config, "channels_scale: zero denominator");
    scale = num / den;
  } else {
    scale = parse_number<double>("channels_scale", value);
  }
  if (!(scale > 0) || scale > 1)
    throw Error(ErrorCode::config, "channels_scale must be in (0, 1], got '" + value + "'");
  const double div = 1.0 / scale;
  const long rounded = std::lround(div);
  if (std::abs(div - rounded) > 1e-9)
    throw Error(ErrorCode::config, "channels_scale must be 1/n for an integer n, got '" + value + "'");
  return static_cast<int>(rounded);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) fail_parse(std::string("checkpoint truncated in ") + what);
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
         std::uint32_t{b[3]} << 24;
}

constexpr char kMagic[5] = {'D', 'N', 'E', 'T', '1'};

}  // namespace

Tensor<float> read_pnm(std::istream& in, const std::string& what) {
  char magic[2];
  if (!in.read(magic, 2)) fail_parse(what + ": empty file");
  int channels = 0;
  if (magic[0] == 'P' && magic[1] == '5') channels = 1;
  else if (magic[0] == 'P' && magic[1] == '6') channels = 3;
  else fail_parse(what + ": not a binary PGM/PPM (expected P5 or P6)");

  const long w = header_number(in, what, "width");
  const long h = header_number(in, what, "height");
  const long maxval = header_number(in, what, "maxval");
  if (w < 1 || h < 1) fail_parse(what + ": zero image extent");
  if (maxval < 1 || maxval > 65535) fail_parse(what + ": maxval must be in [1, 65535]");
  if (channels == 3 && maxval != 255 && maxval != 65535)
    fail_parse(what + ": PPM maxval must be 255 or 65535, got " + std::to_string(maxval));

  const int bytes = maxval > 255 ? 2 : 1;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;
  std::vector<unsigned char> raw(count * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    fail_parse(what + ": truncated payload (" + std::to_string(in.gcount()) + " of " +
               std::to_string(raw.size()) + " bytes)");
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned v = bytes == 1 ? raw[i] : (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1];
    if (v > static_cast<unsigned>(maxval)) fail_parse(what + ": sample exceeds maxval");
    data[i] = static_cast<float>(static_cast<double>(v) / maxval);
  }
  return Tensor<float>({1, static_cast<int>(h), static_cast<int>(w), channels}, std::move(data));
}

Tensor<float> read_pnm(const fs::path& path) {
  auto in = open_in(path);
  return read_pnm(in, path.string());
}

void write_pnm(std::ostream& out, const Tensor<float>& image, int maxval) {
  const Shape s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3))
    throw Error(ErrorCode::shape_mismatch, "write_pnm: expected 1 x H x W x {1,3}, got " + s.str());
  if (maxval != 255 && maxval != 65535)
    throw Error(ErrorCode::invalid_argument, "write_pnm: maxval must be 255 or 65535");
  out << (s.c == 1 ? "P5" : "P6") << '\n' << s.w << ' ' << s.h << '\n' << maxval << '\n';
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(image.size() * bytes);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::lround(v * maxval));
    if (bytes == 1) {
      raw[i] = static_cast<unsigned char>(q);
    } else {
      raw[2 * i] = static_cast<unsigned char>(q >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) fail_io("write_pnm: write failed");
}

void write_pnm(const fs::path& path, const Tensor<float>& image, int maxval) {
  auto out = open_out(path);
  write_pnm(out, image, maxval);
}

void write_probability(const fs::path& path, const Tensor<float>& prob) {
  write_pnm(path, prob, 65535);
}

void write_mask(const fs::path& path, const Tensor<float>& mask) {
  std::vector<float> bin(mask.size());
  for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = mask[i] >= 0.5f ? 1.0f : 0.0f;
  write_pnm(path, Tensor<float>(mask.shape(), std::move(bin)), 255);
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = strip_comment(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no);
    if (eq == std::string::npos) throw Error(ErrorCode::config, where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (value.empty()) throw Error(ErrorCode::config, where + ": empty value for " + key);
    if (seen.count(key)) {
      throw Error(ErrorCode::config, where + ": duplicate key " + key + " (first on line " +
                                         std::to_string(seen[key]) + ")");
    }
    seen[key] = line_no;

    if (key == "d1") cfg.model.dilations[0] = parse_number<int>(key, value);
    else if (key == "d2") cfg.model.dilations[1] = parse_number<int>(key, value);
    else if (key == "d3") cfg.model.dilations[2] = parse_number<int>(key, value);
    else if (key == "msif") {
      if (value == "on") cfg.model.msif_enabled = true;
      else if (value == "off") cfg.model.msif_enabled = false;
      else throw Error(ErrorCode::config, where + ": msif must be on or off");
    } else if (key == "msif_rates") cfg.model.msif_rates = parse_triple(key, value);
    else if (key == "lr") cfg.train.lr = parse_number<double>(key, value);
    else if (key == "power") cfg.train.power = parse_number<double>(key, value);
    else if (key == "max_iter") cfg.train.max_iter = parse_number<long>(key, value);
    else if (key == "batch") cfg.train.batch = parse_number<int>(key, value);
    else if (key == "lambda") cfg.train.lambda = parse_number<double>(key, value);
    else if (key == "beta") cfg.train.beta = parse_number<double>(key, value);
    else if (key == "seed") cfg.train.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "channels_scale") cfg.model.width_divisor = parse_scale(value);
    else throw Error(ErrorCode::config, where + ": unknown key '" + key + "'");
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text(path)); }

std::string format_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  const auto& m = cfg.model;
  const auto& t = cfg.train;
  out << "d1 = " << m.dilations[0] << "\nd2 = " << m.dilations[1] << "\nd3 = " << m.dilations[2]
      << "\nmsif = " << (m.msif_enabled ? "on" : "off") << "\nmsif_rates = " << m.msif_rates[0]
      << ',' << m.msif_rates[1] << ',' << m.msif_rates[2] << "\nlr = " << t.lr
      << "\npower = " << t.power << "\nmax_iter = " << t.max_iter << "\nbatch = " << t.batch
      << "\nlambda = " << t.lambda << "\nbeta = " << t.beta << "\nseed = " << t.seed
      << "\nchannels_scale = 1/" << m.width_divisor << '\n';
  return out.str();
}

std::vector<ManifestEntry> parse_manifest(const std::string& text, const fs::path& base) {
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = strip_comment(raw);
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::vector<std::string> f;
    for (std::string s; fields >> s;) f.push_back(s);
    const std::string where = "manifest line " + std::to_string(line_no);
    if (f.size() != 3 && f.size() != 4)
      fail_parse(where + ": expected 'split image mask [fov]'");
    if (f[0] != "train" && f[0] != "test")
      fail_parse(where + ": split must be train or test, got '" + f[0] + "'");
    ManifestEntry e{f[0], resolve(f[1]), resolve(f[2]), std::nullopt};
    if (f.size() == 4) e.fov = resolve(f[3]);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  return parse_manifest(read_text(path), path.parent_path());
}

Dataset load_dataset(const std::vector<ManifestEntry>& entries, const std::string& split) {
  Dataset data;
  auto binary = [](Tensor<float> t, const fs::path& p) {
    if (t.shape().c != 1) fail_parse(p.string() + ": masks must be single-channel PGM");
    for (float& v : t.mutable_data()) v = v > 0.5f ? 1.0f : 0.0f;
    return t;
  };
  for (const auto& e : entries) {
    if (!split.empty() && e.split != split) continue;
    for (const auto* p : {&e.image, &e.mask})
      if (!fs::exists(*p)) fail_io("missing file " + p->string());
    if (e.fov && !fs::exists(*e.fov)) fail_io("missing file " + e.fov->string());
    Sample s;
    s.image = read_pnm(e.image);
    s.mask = binary(read_pnm(e.mask), e.mask);
    if (e.fov) s.fov = binary(read_pnm(*e.fov), *e.fov);
    const Shape is = s.image.shape(), ms = s.mask.shape();
    if (is.h != ms.h || is.w != ms.w) {
      throw Error(ErrorCode::shape_mismatch, e.image.string() + " is " + is.str() + " but mask is " +
                                                 ms.str());
    }
    if (e.fov && (s.fov.shape().h != is.h || s.fov.shape().w != is.w))
      throw Error(ErrorCode::shape_mismatch, e.fov->string() + ": fov extent differs from image");
    data.push_back(std::move(s));
  }
  return data;
}

void save_checkpoint(std::ostream& out, const DNet<float>& model) {
  static_assert(std::numeric_limits<float>::is_iec559);
  const DNetConfig& c = model.config();
  out.write(kMagic, sizeof kMagic);
  for (int v : {c.dilations[0], c.dilations[1], c.dilations[2], c.msif_rates[0], c.msif_rates[1],
                c.msif_rates[2], int{c.msif_enabled}, c.in_channels, c.width_divisor,
                int{c.batch_norm}})
    put_u32(out, static_cast<std::uint32_t>(v));
  const auto& params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape s = p.tensor.shape();
    for (int d : {s.n, s.h, s.w, s.c}) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) fail_io("checkpoint write failed");
}

void save_checkpoint(const fs::path& path, const DNet<float>& model) {
  auto out = open_out(path);
  save_checkpoint(out, model);
}

DNet<float> load_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    fail_parse("not a checkpoint (bad magic)");
  std::array<int, 10> f{};
  for (auto& v : f) v = static_cast<int>(get_u32(in, "header"));
  DNetConfig cfg;
  cfg.dilations = {f[0], f[1], f[2]};
  cfg.msif_rates = {f[3], f[4], f[5]};
  cfg.msif_enabled = f[6] != 0;
  cfg.in_channels = f[7];
  cfg.width_divisor = f[8];
  cfg.batch_norm = f[9] != 0;
  cfg.validate();
  DNet<float> model(cfg, 0);
  auto& params = model.parameters();
  const std::uint32_t count = get_u32(in, "header");
  if (count != params.size()) {
    fail_parse("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
               std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::uint32_t len = get_u32(in, "tensor name");
    if (len > 4096) fail_parse("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) fail_parse("checkpoint truncated in tensor name");
    if (name != p.name) fail_parse("checkpoint: expected tensor " + p.name + ", found " + name);
    Shape s{};
    s.n = static_cast<int>(get_u32(in, name.c_str()));
    s.h = static_cast<int>(get_u32(in, name.c_str()));
    s.w = static_cast<int>(get_u32(in, name.c_str()));
    s.c = static_cast<int>(get_u32(in, name.c_str()));
    if (s != p.tensor.shape())
      fail_parse("checkpoint: " + name + " has shape " + s.str() + ", expected " + p.tensor.shape().str());
    for (float& v : p.tensor.mutable_data()) v = std::bit_cast<float>(get_u32(in, name.c_str()));
  }
  if (in.peek() != EOF) fail_parse("checkpoint: trailing bytes");
  return model;
}

DNet<float> load_checkpoint(const fs::path& path) {
  auto in = open_in(path);
  return load_checkpoint(in);
}

std::string read_text(const fs::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace dnet::io
