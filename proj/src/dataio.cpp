#include "covflow/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "covflow/errors.hpp"
#include "covflow/freq.hpp"
#include "covflow/hash.hpp"
#include "covflow/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace covflow::data {

namespace {

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failure on '" + path + "'");
  return bytes;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failure on '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

// ---- Netpbm ----

struct PnmCursor {
  const std::string& bytes;
  const std::string& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(path + ": " + what + " at byte offset " + std::to_string(pos));
  }
  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      unsigned char c = static_cast<unsigned char>(bytes[pos]);
      if (std::isspace(c)) {
        ++pos;
      } else if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }
  void need_one_space() {
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      fail("expected one whitespace byte before the pixel payload");
    }
    ++pos;
  }
  std::size_t read_uint() {
    skip_space_and_comments();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      fail("expected an integer");
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 30)) fail("integer out of range");
      ++pos;
    }
    return v;
  }
};

std::string netpbm_bytes(const Tensor& image, std::uint32_t bit_depth) {
  if (image.rank() != 3) {
    throw ConfigError("netpbm writer expects [C,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 1 && c != 3) throw ConfigError("netpbm supports 1 or 3 channels, got " + std::to_string(c));
  if (bit_depth != 8 && bit_depth != 16) throw ConfigError("netpbm bit depth must be 8 or 16");
  const std::uint32_t maxval = bit_depth == 8 ? 255u : 65535u;

  std::string out(c == 1 ? "P5\n" : "P6\n");
  out += std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double v = std::clamp(image.at(ch, y, x), 0.0, 1.0);
        std::uint32_t q = static_cast<std::uint32_t>(std::lround(v * maxval));
        if (maxval == 65535u) out.push_back(static_cast<char>((q >> 8) & 0xff));
        out.push_back(static_cast<char>(q & 0xff));
      }
    }
  }
  return out;
}

// ---- binary cursor for checkpoints ----

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& b, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof(bits));
  put_u32(b, bits);
}

struct BinCursor {
  const std::string& bytes;
  const std::string& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(path + ": " + what + " at byte offset " + std::to_string(pos));
  }
  void need(std::size_t n) const {
    if (bytes.size() - pos < n) fail("truncated file (need " + std::to_string(n) + " more bytes)");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string split_file_name(const std::string& split, std::size_t index, std::size_t channels) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  return split + "/" + buf + (channels == 1 ? ".pgm" : ".ppm");
}

}  // namespace

Tensor read_netpbm(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  PnmCursor cur{bytes, path};
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    cur.fail("not a binary PGM/PPM (expected P5 or P6 magic)");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  cur.pos = 2;
  const std::size_t w = cur.read_uint();
  const std::size_t h = cur.read_uint();
  const std::size_t maxval = cur.read_uint();
  if (maxval != 255 && maxval != 65535) cur.fail("maxval must be 255 or 65535");
  if (w == 0 || h == 0) cur.fail("zero image dimension");
  cur.need_one_space();
  const std::size_t bytes_per = maxval == 65535 ? 2 : 1;
  const std::size_t payload = channels * w * h * bytes_per;
  if (bytes.size() - cur.pos < payload) cur.fail("truncated pixel payload");
  if (bytes.size() - cur.pos > payload) cur.fail("trailing bytes after pixel payload");

  Tensor image({channels, h, w});
  const double denom = static_cast<double>(maxval);
  std::size_t p = cur.pos;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        std::size_t v;
        if (bytes_per == 2) {
          v = (static_cast<std::size_t>(static_cast<unsigned char>(bytes[p])) << 8) |
              static_cast<std::size_t>(static_cast<unsigned char>(bytes[p + 1]));
          p += 2;
        } else {
          v = static_cast<std::size_t>(static_cast<unsigned char>(bytes[p]));
          p += 1;
        }
        image.at(c, y, x) = static_cast<double>(v) / denom;
      }
    }
  }
  return image;
}

void write_netpbm(const std::string& path, const Tensor& image, std::uint32_t bit_depth) {
  write_file_atomic(path, netpbm_bytes(image, bit_depth));
}

CifarBatch read_cifar10_binary(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  constexpr std::size_t kRecord = 3073;
  if (bytes.size() % kRecord != 0) {
    throw DataError(path + ": size " + std::to_string(bytes.size()) +
                    " is not a multiple of the 3073-byte record");
  }
  const std::size_t n = bytes.size() / kRecord;
  CifarBatch batch;
  batch.images = Tensor({n, 3, 32, 32});
  batch.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + i * kRecord;
    batch.labels[i] = rec[0];
    for (std::size_t j = 0; j < 3072; ++j) {
      batch.images[i * 3072 + j] = static_cast<double>(rec[1 + j]) / 255.0;
    }
  }
  return batch;
}

void write_cifar10_binary(const std::string& path, const Tensor& images,
                          const std::vector<std::uint8_t>& labels) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != 32 || s[3] != 32) {
    throw ConfigError("CIFAR writer expects [N,3,32,32], got " + shape_str(s));
  }
  if (labels.size() != s[0]) throw ConfigError("label count does not match image count");
  std::string bytes;
  bytes.reserve(s[0] * 3073);
  for (std::size_t i = 0; i < s[0]; ++i) {
    bytes.push_back(static_cast<char>(labels[i]));
    for (std::size_t j = 0; j < 3072; ++j) {
      double v = std::clamp(images[i * 3072 + j], 0.0, 1.0);
      bytes.push_back(static_cast<char>(std::lround(v * 255.0)));
    }
  }
  write_file_atomic(path, bytes);
}

std::vector<std::string> DatasetManifest::ordered_files() const {
  std::vector<std::string> files;
  for (const auto& [split, list] : splits) {
    (void)split;
    files.insert(files.end(), list.begin(), list.end());
  }
  return files;
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["channels"] = channels;
  j["checksum"] = checksum;
  j["count"] = count;
  j["height"] = height;
  j["name"] = name;
  j["provenance"] = nlohmann::json::parse(provenance_json);
  if (!run_config_json.empty()) j["run_config"] = nlohmann::json::parse(run_config_json);
  j["source_format"] = source_format;
  nlohmann::json sj = nlohmann::json::object();
  for (const auto& [split, list] : splits) sj[split] = list;
  j["splits"] = sj;
  j["width"] = width;
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.channels = j.at("channels").get<std::size_t>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.count = j.at("count").get<std::size_t>();
    m.checksum = j.at("checksum").get<std::string>();
    m.source_format = j.at("source_format").get<std::string>();
    m.provenance_json = j.value("provenance", nlohmann::json{{"kind", "clean"}}).dump();
    if (j.contains("run_config")) m.run_config_json = j.at("run_config").dump();
    for (const auto& [split, list] : j.at("splits").items()) {
      m.splits[split] = list.get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest field error: ") + e.what());
  }
  std::size_t total = 0;
  for (const auto& [split, list] : m.splits) {
    (void)split;
    total += list.size();
  }
  if (total != m.count) {
    throw DataError("manifest count " + std::to_string(m.count) + " does not match " +
                    std::to_string(total) + " listed files");
  }
  return m;
}

Dataset open_dataset(const std::string& dir) {
  Dataset ds;
  ds.root = dir;
  ds.manifest = DatasetManifest::from_json(read_file_bytes(dir + "/manifest.json"));
  for (const std::string& rel : ds.manifest.ordered_files()) {
    if (!fs::exists(fs::path(dir) / rel)) {
      throw DataError("manifest lists missing file '" + rel + "' under " + dir);
    }
  }
  return ds;
}

Tensor Dataset::load_split(const std::string& split) const {
  auto it = manifest.splits.find(split);
  if (it == manifest.splits.end()) {
    throw DataError("dataset '" + manifest.name + "' has no split '" + split + "'");
  }
  const auto& list = it->second;
  Tensor out({list.size(), manifest.channels, manifest.height, manifest.width});
  const std::size_t chw = manifest.channels * manifest.height * manifest.width;
  for (std::size_t i = 0; i < list.size(); ++i) {
    Tensor img = read_netpbm((fs::path(root) / list[i]).string());
    if (img.dim(0) != manifest.channels || img.dim(1) != manifest.height ||
        img.dim(2) != manifest.width) {
      throw DataError("image '" + list[i] + "' shape " + shape_str(img.shape()) +
                      " does not match the manifest");
    }
    std::memcpy(out.data() + i * chw, img.data(), chw * sizeof(double));
  }
  return out;
}

void verify_dataset_checksum(const Dataset& ds) {
  std::uint64_t h = kFnvOffset;
  for (const std::string& rel : ds.manifest.ordered_files()) {
    std::string bytes = read_file_bytes((fs::path(ds.root) / rel).string());
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  std::string got = hash_hex(h);
  if (got != ds.manifest.checksum) {
    throw DataError("dataset checksum mismatch: manifest says " + ds.manifest.checksum +
                    ", files hash to " + got);
  }
}

DatasetManifest write_dataset(const std::string& dir, const std::string& name,
                              const std::map<std::string, Tensor>& splits,
                              const std::string& provenance_json,
                              const std::string& run_config_json) {
  if (splits.empty()) throw ConfigError("dataset needs at least one split");
  DatasetManifest m;
  m.name = name;
  m.provenance_json = provenance_json;
  m.run_config_json = run_config_json;

  std::uint64_t h = kFnvOffset;
  for (const auto& [split, images] : splits) {
    if (images.rank() != 4) {
      throw ConfigError("split '" + split + "' must be [N,C,H,W], got " +
                        shape_str(images.shape()));
    }
    if (m.channels == 0) {
      m.channels = images.dim(1);
      m.height = images.dim(2);
      m.width = images.dim(3);
    } else if (images.dim(1) != m.channels || images.dim(2) != m.height ||
               images.dim(3) != m.width) {
      throw ConfigError("splits disagree on image shape");
    }
    const std::size_t n = images.dim(0);
    const std::size_t chw = m.channels * m.height * m.width;
    Tensor one({m.channels, m.height, m.width});
    std::vector<std::string>& list = m.splits[split];
    for (std::size_t i = 0; i < n; ++i) {
      std::memcpy(one.data(), images.data() + i * chw, chw * sizeof(double));
      std::string rel = split_file_name(split, i, m.channels);
      std::string bytes = netpbm_bytes(one, 16);
      write_file_atomic((fs::path(dir) / rel).string(), bytes);
      h = fnv1a(bytes.data(), bytes.size(), h);
      list.push_back(rel);
      m.count += 1;
    }
  }
  m.checksum = hash_hex(h);
  write_file_atomic(dir + "/manifest.json", m.to_json() + "\n");
  return m;
}

void SynthConfig::validate() const {
  if (count == 0) throw ConfigError("synthetic dataset needs count >= 1");
  if (channels != 1 && channels != 3) throw ConfigError("synthetic images need 1 or 3 channels");
  if (height == 0 || width == 0) throw ConfigError("synthetic image shape must be nonzero");
  if (smoothness < 0.0 || !std::isfinite(smoothness)) {
    throw ConfigError("smoothness must be non-negative and finite");
  }
  if (grain < 0.0 || !std::isfinite(grain)) throw ConfigError("grain must be non-negative");
}

Tensor synth_images(const SynthConfig& cfg) {
  cfg.validate();
  Tensor out({cfg.count, cfg.channels, cfg.height, cfg.width});
  const std::size_t chw = cfg.channels * cfg.height * cfg.width;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng(Rng::mix({cfg.seed, 7001, i}));
    Tensor base({cfg.channels, cfg.height, cfg.width});
    for (std::size_t j = 0; j < chw; ++j) base[j] = rng.uniform();
    if (cfg.smoothness > 0.0) base = freq::gaussian_blur(base, cfg.smoothness);
    for (std::size_t j = 0; j < chw; ++j) {
      double noise_std = cfg.grain * std::sqrt(0.9 * base[j] + 0.1);
      out[i * chw + j] = std::clamp(base[j] + noise_std * rng.gaussian(), 0.0, 1.0);
    }
  }
  return out;
}

Checkpoint checkpoint_from_model(const flow::FlowModel& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const std::string& name : model.params().names()) {
    const Tensor& src = model.params().at(name);
    Tensor rounded(src.shape());
    for (std::size_t i = 0; i < src.numel(); ++i) {
      rounded[i] = static_cast<double>(static_cast<float>(src[i]));
    }
    ckpt.params.emplace_back(name, std::move(rounded));
  }
  ckpt.fingerprint = model.fingerprint();
  return ckpt;
}

flow::FlowModel model_from_checkpoint(const Checkpoint& ckpt) {
  flow::FlowModel model = flow::FlowModel::build(ckpt.config);
  if (ckpt.params.size() != model.params().names().size()) {
    throw DataError("checkpoint has " + std::to_string(ckpt.params.size()) +
                    " parameters, model expects " +
                    std::to_string(model.params().names().size()));
  }
  for (const auto& [name, value] : ckpt.params) {
    if (!model.params().has(name)) throw DataError("checkpoint parameter '" + name + "' is unknown");
    Tensor& dst = model.params().at(name);
    if (!dst.same_shape(value)) {
      throw DataError("checkpoint parameter '" + name + "' has shape " +
                      shape_str(value.shape()) + ", model expects " + shape_str(dst.shape()));
    }
    dst = value;
  }
  if (model.fingerprint() != ckpt.fingerprint) {
    throw DataError("checkpoint fingerprint does not match its parameters");
  }
  return model;
}

namespace {

std::string checkpoint_fingerprint(const std::string& config_json,
                                   const std::vector<std::pair<std::string, Tensor>>& params) {
  std::vector<std::string> names;
  names.reserve(params.size());
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, value] : params) {
    names.push_back(name);
    by_name[name] = &value;
  }
  return flow::parameter_fingerprint(config_json, names, [&](const std::string& n) -> const Tensor& {
    return *by_name.at(n);
  });
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string config_json = ckpt.config.to_json();
  if (checkpoint_fingerprint(config_json, ckpt.params) != ckpt.fingerprint) {
    throw ConfigError("refusing to save a checkpoint whose fingerprint is stale");
  }
  std::string b;
  b += "CVFL";
  put_u32(b, 1);
  put_u64(b, config_json.size());
  b += config_json;
  put_u32(b, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, value] : ckpt.params) {
    put_u32(b, static_cast<std::uint32_t>(name.size()));
    b += name;
    put_u32(b, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d = 0; d < value.rank(); ++d) put_u64(b, value.dim(d));
    for (std::size_t i = 0; i < value.numel(); ++i) put_f32(b, static_cast<float>(value[i]));
  }
  b.push_back(ckpt.stats ? 1 : 0);
  if (ckpt.stats) {
    std::string sj = ckpt.stats->to_json();
    put_u64(b, sj.size());
    b += sj;
  }
  put_u64(b, ckpt.train_state.size());
  b.append(reinterpret_cast<const char*>(ckpt.train_state.data()), ckpt.train_state.size());
  if (ckpt.fingerprint.size() != 16) throw ConfigError("fingerprint must be 16 hex characters");
  b += ckpt.fingerprint;
  put_u64(b, fnv1a(b.data(), b.size()));
  write_file_atomic(path, b);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  BinCursor cur{bytes, path};
  if (cur.str(4) != "CVFL") throw DataError(path + ": not a checkpoint (bad magic)");
  std::uint32_t version = cur.u32();
  if (version != 1) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  // Whole-file hash sits in the trailing 8 bytes; verify before trusting
  // anything else.
  if (bytes.size() < 12) cur.fail("truncated file");
  {
    BinCursor tail{bytes, path, bytes.size() - 8};
    std::uint64_t stored = tail.u64();
    std::uint64_t actual = fnv1a(bytes.data(), bytes.size() - 8);
    if (stored != actual) throw DataError(path + ": checkpoint corrupted (file hash mismatch)");
  }

  Checkpoint ckpt;
  std::uint64_t cfg_len = cur.u64();
  std::string config_json = cur.str(cfg_len);
  try {
    ckpt.config = flow::ModelConfig::from_json(config_json);
  } catch (const std::exception& e) {
    throw DataError(path + ": bad embedded config: " + e.what());
  }

  std::uint32_t n_params = cur.u32();
  for (std::uint32_t p = 0; p < n_params; ++p) {
    std::uint32_t name_len = cur.u32();
    if (name_len > 4096) cur.fail("parameter name too long");
    std::string name = cur.str(name_len);
    std::uint32_t rank = cur.u32();
    if (rank > 8) cur.fail("parameter rank too large");
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = cur.u64();
      if (shape[d] == 0 || shape[d] > (1u << 28)) cur.fail("parameter dimension out of range");
      numel *= shape[d];
    }
    cur.need(numel * 4);
    Tensor value(shape);
    for (std::size_t i = 0; i < numel; ++i) value[i] = static_cast<double>(cur.f32());
    ckpt.params.emplace_back(std::move(name), std::move(value));
  }

  cur.need(1);
  bool has_stats = bytes[cur.pos++] != 0;
  if (has_stats) {
    std::uint64_t stats_len = cur.u64();
    try {
      ckpt.stats = score::NormalizationStats::from_json(cur.str(stats_len));
    } catch (const std::exception& e) {
      throw DataError(path + ": bad embedded stats: " + e.what());
    }
  }

  std::uint64_t train_len = cur.u64();
  cur.need(train_len);
  ckpt.train_state.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos),
                          bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos + train_len));
  cur.pos += train_len;

  ckpt.fingerprint = cur.str(16);
  cur.u64();  // file hash, already verified
  if (cur.pos != bytes.size()) cur.fail("trailing bytes after checkpoint payload");

  std::string recomputed = checkpoint_fingerprint(ckpt.config.to_json(), ckpt.params);
  if (recomputed != ckpt.fingerprint) {
    throw DataError(path + ": fingerprint mismatch (stored " + ckpt.fingerprint + ", parameters hash to " +
                    recomputed + ")");
  }
  return ckpt;
}

}  // namespace covflow::data
