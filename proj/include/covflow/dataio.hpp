#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "covflow/model.hpp"
#include "covflow/stats.hpp"
#include "covflow/tensor.hpp"

namespace covflow::data {

// Netpbm binary images: P5 (1 channel) and P6 (3 channels), maxval 255 or
// 65535 with big-endian 16-bit samples. Values map to [0,1] as v / maxval.
Tensor read_netpbm(const std::string& path);  // [C,H,W]
void write_netpbm(const std::string& path, const Tensor& image, std::uint32_t bit_depth);

// CIFAR-10 binary batches: 3073-byte records, one label byte then 3072
// channel-planar pixel bytes. Pixels map to [0,1] as b / 255.
struct CifarBatch {
  Tensor images;  // [N,3,32,32]
  std::vector<std::uint8_t> labels;
};
CifarBatch read_cifar10_binary(const std::string& path);
void write_cifar10_binary(const std::string& path, const Tensor& images,
                          const std::vector<std::uint8_t>& labels);

// A dataset on disk is a directory of Netpbm files plus manifest.json.
struct DatasetManifest {
  std::string name;
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t count = 0;
  std::string source_format = "netpbm-16";
  std::string provenance_json = "{\"kind\":\"clean\"}";
  std::string run_config_json;  // resolved generator config, optional
  std::string checksum;         // hex FNV-1a over image file bytes, manifest order
  std::map<std::string, std::vector<std::string>> splits;  // split -> relative paths

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
  // All image paths in a fixed order (split name order, then index order).
  std::vector<std::string> ordered_files() const;
};

struct Dataset {
  std::string root;
  DatasetManifest manifest;
  Tensor load_split(const std::string& split) const;  // [N,C,H,W]
};

// Reads and verifies manifest.json in `dir` (count must match the file lists;
// files must exist). Checksum verification is separate because it reads every
// image.
Dataset open_dataset(const std::string& dir);
void verify_dataset_checksum(const Dataset& ds);

// Writes images as 16-bit Netpbm plus a manifest; returns the manifest.
// `splits` maps split name -> [N,C,H,W] tensor. Files land in dir/<split>/.
DatasetManifest write_dataset(const std::string& dir, const std::string& name,
                              const std::map<std::string, Tensor>& splits,
                              const std::string& provenance_json,
                              const std::string& run_config_json = "");

// Synthetic textures: per-channel uniform noise blurred with sigma =
// smoothness (0 = white noise), plus signal-dependent grain
// noise_std = grain * sqrt(0.9 * base + 0.1), clamped to [0,1].
struct SynthConfig {
  std::size_t count = 0;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double smoothness = 1.5;
  double grain = 0.06;
  std::uint64_t seed = 1;

  void validate() const;
};
Tensor synth_images(const SynthConfig& cfg);

// Versioned model checkpoint. Parameters are stored as little-endian float32;
// the fingerprint covers the canonical config and the float32 parameter
// image and is verified on load, as is a whole-file hash.
struct Checkpoint {
  flow::ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
  std::optional<score::NormalizationStats> stats;
  std::vector<std::uint8_t> train_state;
  std::string fingerprint;
};

Checkpoint checkpoint_from_model(const flow::FlowModel& model);
flow::FlowModel model_from_checkpoint(const Checkpoint& ckpt);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace covflow::data
