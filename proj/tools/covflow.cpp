#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "covflow/corruptions.hpp"
#include "covflow/dataio.hpp"
#include "covflow/errors.hpp"
#include "covflow/metrics.hpp"
#include "covflow/model.hpp"
#include "covflow/scoring.hpp"
#include "covflow/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using covflow::ConfigError;
using covflow::DataError;
using covflow::NumericError;
using covflow::Tensor;

namespace {

std::string resolve_data_path(const std::string& path) {
  const char* root = std::getenv("COVFLOW_DATA_ROOT");
  if (root == nullptr || *root == '\0' || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::size_t begin = 0;
  while (begin <= text.size()) {
    std::size_t end = text.find(',', begin);
    if (end == std::string::npos) end = text.size();
    std::string item = text.substr(begin, end - begin);
    if (!item.empty()) out.push_back(item);
    begin = end + 1;
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw DataError("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out.good()) throw DataError("cannot write " + path);
}

void echo_config(const std::string& command, const std::string& resolved_json) {
  std::cerr << command << " config: " << resolved_json << "\n";
}

// Injects config-file values as command-line tokens ahead of the real ones;
// every option takes the last occurrence, so explicit flags win. Unknown keys
// are rejected.
std::vector<std::string> config_file_tokens(const CLI::App& sub, const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  std::vector<std::string> tokens;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    if (const_cast<CLI::App&>(sub).get_option_no_throw(flag) == nullptr) {
      throw ConfigError("config file key '" + key + "' is not an option of '" +
                        sub.get_name() + "'");
    }
    if (value.is_string()) {
      tokens.push_back(flag + "=" + value.get<std::string>());
    } else if (value.is_number() || value.is_boolean()) {
      tokens.push_back(flag + "=" + value.dump());
    } else {
      throw ConfigError("config file key '" + key + "' must be a scalar");
    }
  }
  return tokens;
}

double mean_bpd(covflow::flow::FlowModel& model, const Tensor& images, std::uint64_t seed) {
  auto res = model.log_likelihood(images, seed);
  double acc = 0.0;
  for (const auto& r : res) acc += r.bpd;
  return acc / static_cast<double>(res.size());
}

struct SynthOpts {
  std::string out;
  std::string name = "synth";
  std::size_t count = 2000;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double smoothness = 1.5;
  double grain = 0.06;
  std::uint64_t seed = 7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;

  std::string resolved() const {
    nlohmann::ordered_json j;
    j["out"] = out;
    j["name"] = name;
    j["count"] = count;
    j["channels"] = channels;
    j["height"] = height;
    j["width"] = width;
    j["smoothness"] = smoothness;
    j["grain"] = grain;
    j["seed"] = seed;
    j["val-fraction"] = val_fraction;
    j["test-fraction"] = test_fraction;
    return j.dump();
  }
};

int cmd_synth(const SynthOpts& o) {
  if (!(o.val_fraction >= 0.0) || !(o.test_fraction >= 0.0) ||
      o.val_fraction + o.test_fraction >= 1.0) {
    throw ConfigError("val and test fractions must be >= 0 and sum below 1");
  }
  covflow::data::SynthConfig sc;
  sc.count = o.count;
  sc.channels = o.channels;
  sc.height = o.height;
  sc.width = o.width;
  sc.smoothness = o.smoothness;
  sc.grain = o.grain;
  sc.seed = o.seed;
  sc.validate();
  const std::string resolved = o.resolved();
  echo_config("synth", resolved);

  Tensor all = covflow::data::synth_images(sc);
  const std::size_t n_val = static_cast<std::size_t>(std::lround(o.val_fraction * o.count));
  const std::size_t n_test = static_cast<std::size_t>(std::lround(o.test_fraction * o.count));
  const std::size_t n_train = o.count - n_val - n_test;
  if (n_train == 0) throw ConfigError("no samples left for the train split");
  const std::size_t chw = o.channels * o.height * o.width;
  auto slice = [&](std::size_t begin, std::size_t count) {
    Tensor t({count, o.channels, o.height, o.width});
    std::copy(all.data() + begin * chw, all.data() + (begin + count) * chw, t.data());
    return t;
  };
  std::map<std::string, Tensor> splits;
  splits["train"] = slice(0, n_train);
  if (n_val > 0) splits["val"] = slice(n_train, n_val);
  if (n_test > 0) splits["test"] = slice(n_train + n_val, n_test);

  auto manifest = covflow::data::write_dataset(resolve_data_path(o.out), o.name, splits,
                                               "{\"kind\":\"synthetic\"}", resolved);
  std::cout << "wrote " << manifest.count << " images to " << o.out << " (train " << n_train
            << ", val " << n_val << ", test " << n_test << "), checksum "
            << manifest.checksum << "\n";
  return 0;
}

struct CorruptOpts {
  std::string data;
  std::string out;
  std::string split = "test";
  std::string kinds = "all";
  std::string severities = "1,2,3,4,5";
  std::uint64_t seed = 101;
  std::string table_path;

  std::string resolved(const covflow::corrupt::SeverityTable& table) const {
    nlohmann::ordered_json j;
    j["data"] = data;
    j["out"] = out;
    j["split"] = split;
    j["kinds"] = kinds;
    j["severities"] = severities;
    j["seed"] = seed;
    j["table"] = nlohmann::json::parse(table.to_json());
    return j.dump();
  }
};

int cmd_corrupt(const CorruptOpts& o) {
  covflow::corrupt::SuiteConfig cfg;
  cfg.seed = o.seed;
  if (!o.table_path.empty()) {
    cfg.table = covflow::corrupt::SeverityTable::from_json(read_text_file(o.table_path));
  }
  cfg.kinds.clear();
  if (o.kinds == "all") {
    cfg.kinds.assign(covflow::corrupt::kAllKinds.begin(), covflow::corrupt::kAllKinds.end());
  } else {
    for (const std::string& name : split_commas(o.kinds)) {
      cfg.kinds.push_back(covflow::corrupt::kind_from_name(name));
    }
  }
  if (cfg.kinds.empty()) throw ConfigError("no corruption kinds selected");
  cfg.severities.clear();
  for (const std::string& s : split_commas(o.severities)) {
    int sev = 0;
    try {
      sev = std::stoi(s);
    } catch (const std::exception&) {
      throw ConfigError("severity '" + s + "' is not an integer");
    }
    if (sev < 1 || sev > 5) throw ConfigError("severity must lie in 1..5, got " + s);
    cfg.severities.push_back(sev);
  }
  if (cfg.severities.empty()) throw ConfigError("no severities selected");

  const std::string resolved = o.resolved(cfg.table);
  echo_config("corrupt", resolved);

  covflow::data::Dataset clean = covflow::data::open_dataset(resolve_data_path(o.data));
  Tensor images = clean.load_split(o.split);
  auto names = covflow::corrupt::build_ood_suite(images, clean.manifest.checksum,
                                                 resolve_data_path(o.out), cfg, resolved);
  for (const std::string& name : names) std::cout << o.out << "/" << name << "\n";
  std::cout << "wrote " << names.size() << " corrupted datasets\n";
  return 0;
}

struct TrainOpts {
  std::string data;
  std::string out;
  std::string log_path;
  std::string split = "train";
  std::string val_split = "val";
  std::string mode = "high-conditional-sdl";
  std::size_t k = 16;
  std::size_t hidden = 39;
  std::size_t blocks = 2;
  double sigma = 1.0;
  std::uint32_t bit_depth = 16;
  std::uint64_t init_seed = 76001;
  double alpha = 2.0;
  double lr_max = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  double clip_norm = 0.0;
  std::size_t checkpoint_every = 1;
  bool resume = false;

  std::string resolved() const {
    nlohmann::ordered_json j;
    j["data"] = data;
    j["out"] = out;
    j["log"] = log_path;
    j["split"] = split;
    j["val-split"] = val_split;
    j["mode"] = mode;
    j["k"] = k;
    j["hidden"] = hidden;
    j["blocks"] = blocks;
    j["sigma"] = sigma;
    j["bit-depth"] = bit_depth;
    j["init-seed"] = init_seed;
    j["alpha"] = alpha;
    j["lr-max"] = lr_max;
    j["epochs"] = epochs;
    j["batch-size"] = batch_size;
    j["seed"] = seed;
    j["clip-norm"] = clip_norm;
    j["checkpoint-every"] = checkpoint_every;
    j["resume"] = resume;
    return j.dump();
  }
};

int cmd_train(const TrainOpts& o) {
  const std::string resolved = o.resolved();
  echo_config("train", resolved);
  covflow::data::Dataset ds = covflow::data::open_dataset(resolve_data_path(o.data));
  Tensor images = ds.load_split(o.split);

  covflow::train::TrainConfig tcfg;
  tcfg.alpha = o.alpha;
  tcfg.lr_max = o.lr_max;
  tcfg.epochs = o.epochs;
  tcfg.batch_size = o.batch_size;
  tcfg.seed = o.seed;
  tcfg.clip_norm = o.clip_norm;
  tcfg.checkpoint_every = o.checkpoint_every;
  tcfg.validate();

  std::optional<covflow::flow::FlowModel> model;
  std::vector<std::uint8_t> resume_state;
  if (o.resume) {
    if (!fs::exists(o.out)) throw DataError("cannot resume: no checkpoint at " + o.out);
    covflow::data::Checkpoint ckpt = covflow::data::load_checkpoint(o.out);
    if (ckpt.train_state.empty()) {
      throw ConfigError("checkpoint " + o.out + " carries no training state to resume");
    }
    model.emplace(covflow::data::model_from_checkpoint(ckpt));
    resume_state = ckpt.train_state;
  } else {
    covflow::flow::ModelConfig mc;
    mc.mode = covflow::flow::flow_mode_from_name(o.mode);
    mc.channels = ds.manifest.channels;
    mc.height = ds.manifest.height;
    mc.width = ds.manifest.width;
    mc.coupling_steps = o.k;
    mc.hidden_channels = o.hidden;
    mc.residual_blocks = o.blocks;
    mc.filter_sigma = o.sigma;
    mc.bit_depth = o.bit_depth;
    mc.init_seed = o.init_seed;
    mc.validate();
    model.emplace(covflow::flow::FlowModel::build(mc));
  }

  std::optional<Tensor> val;
  if (!o.val_split.empty() && ds.manifest.splits.count(o.val_split) > 0) {
    val = ds.load_split(o.val_split);
    std::cerr << "initial val bpd: " << mean_bpd(*model, *val, covflow::Rng::mix({o.seed, 4242}))
              << "\n";
  }

  const std::string log_path = o.log_path.empty() ? o.out + ".log.csv" : o.log_path;
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log.good()) throw DataError("cannot write " + log_path);
  log << "# config " << resolved << "\n" << covflow::train::train_log_header() << "\n";

  covflow::train::TrainHooks hooks;
  hooks.on_step = [&](const covflow::train::TrainLogRow& row) {
    log << covflow::train::train_log_row(row) << "\n";
  };
  hooks.on_checkpoint = [&](std::size_t, const covflow::data::Checkpoint& ckpt) {
    covflow::data::save_checkpoint(o.out, ckpt);
  };
  auto summary = covflow::train::train(*model, images, tcfg, hooks,
                                       resume_state.empty() ? nullptr : &resume_state);
  log.flush();

  if (val) {
    std::cerr << "final val bpd: " << mean_bpd(*model, *val, covflow::Rng::mix({o.seed, 4242}))
              << "\n";
  }
  std::cout << "ran " << summary.steps_run << " steps (" << summary.batches_skipped
            << " skipped), final loss " << summary.final_loss << ", checkpoint " << o.out
            << ", log " << log_path << "\n";
  return 0;
}

struct StatsOpts {
  std::string checkpoint;
  std::string data;
  std::string split = "val";
  std::uint64_t seed = 1301;
  std::size_t batch_size = 64;

  std::string resolved() const {
    nlohmann::ordered_json j;
    j["checkpoint"] = checkpoint;
    j["data"] = data;
    j["split"] = split;
    j["seed"] = seed;
    j["batch-size"] = batch_size;
    return j.dump();
  }
};

int cmd_stats(const StatsOpts& o) {
  echo_config("stats", o.resolved());
  covflow::data::Checkpoint ckpt = covflow::data::load_checkpoint(o.checkpoint);
  covflow::flow::FlowModel model = covflow::data::model_from_checkpoint(ckpt);
  covflow::data::Dataset ds = covflow::data::open_dataset(resolve_data_path(o.data));
  Tensor images = ds.load_split(o.split);
  ckpt.stats = covflow::score::compute_stats(model, images, o.seed, o.batch_size);
  covflow::data::save_checkpoint(o.checkpoint, ckpt);
  std::cout << ckpt.stats->to_json() << "\n";
  return 0;
}

struct ScoreOpts {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string metric = "all";
  std::uint64_t seed = 1301;
  std::size_t batch_size = 64;
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::string out;

  std::string resolved() const {
    nlohmann::ordered_json j;
    j["checkpoint"] = checkpoint;
    j["data"] = data;
    j["split"] = split;
    j["metric"] = metric;
    j["seed"] = seed;
    j["batch-size"] = batch_size;
    j["threads"] = threads;
    j["out"] = out;
    return j.dump();
  }
};

int cmd_score(const ScoreOpts& o) {
  if (o.metric != "ll" && o.metric != "typicality" && o.metric != "nsd" && o.metric != "all") {
    throw ConfigError("metric must be one of ll, typicality, nsd, all");
  }
  const std::string resolved = o.resolved();
  echo_config("score", resolved);
  covflow::data::Checkpoint ckpt = covflow::data::load_checkpoint(o.checkpoint);
  covflow::flow::FlowModel model = covflow::data::model_from_checkpoint(ckpt);
  const bool needs_stats = o.metric == "nsd" || o.metric == "all";
  if (needs_stats && !ckpt.stats) {
    throw ConfigError("metric '" + o.metric + "' needs normalization stats; run stats first");
  }
  covflow::data::Dataset ds = covflow::data::open_dataset(resolve_data_path(o.data));
  Tensor images = ds.load_split(o.split);
  auto records = covflow::score::score_dataset(model, images,
                                               ckpt.stats ? &*ckpt.stats : nullptr, o.seed,
                                               o.batch_size, o.threads);
  std::string csv = covflow::score::scores_csv(records, resolved);
  if (o.out.empty()) {
    std::cout << csv;
  } else {
    write_text_file(o.out, csv);
    double mean_ll = 0.0;
    for (const auto& r : records) mean_ll += r.ll;
    std::cout << "scored " << records.size() << " samples, mean ll "
              << mean_ll / static_cast<double>(records.size()) << ", wrote " << o.out << "\n";
  }
  return 0;
}

struct EvalOpts {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string suite;
  std::string metrics = "ll,typicality,nsd";
  std::uint64_t seed = 1301;
  std::size_t batch_size = 64;
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::string out;

  std::string resolved() const {
    nlohmann::ordered_json j;
    j["checkpoint"] = checkpoint;
    j["data"] = data;
    j["split"] = split;
    j["suite"] = suite;
    j["metrics"] = metrics;
    j["seed"] = seed;
    j["batch-size"] = batch_size;
    j["threads"] = threads;
    j["out"] = out;
    return j.dump();
  }
};

int cmd_eval(const EvalOpts& o) {
  std::vector<std::string> metric_order = split_commas(o.metrics);
  if (metric_order.empty()) throw ConfigError("no metrics selected");
  bool wants_nsd = false;
  for (const std::string& m : metric_order) {
    if (m == "nsd") {
      wants_nsd = true;
    } else if (m != "ll" && m != "typicality") {
      throw ConfigError("unknown metric '" + m + "'");
    }
  }
  const std::string resolved = o.resolved();
  echo_config("eval", resolved);

  covflow::data::Checkpoint ckpt = covflow::data::load_checkpoint(o.checkpoint);
  covflow::flow::FlowModel model = covflow::data::model_from_checkpoint(ckpt);
  if (wants_nsd && !ckpt.stats) {
    throw ConfigError("metric 'nsd' needs normalization stats; run stats first");
  }
  const covflow::score::NormalizationStats* stats = ckpt.stats ? &*ckpt.stats : nullptr;

  covflow::data::Dataset clean = covflow::data::open_dataset(resolve_data_path(o.data));
  Tensor id_images = clean.load_split(o.split);
  auto id_records =
      covflow::score::score_dataset(model, id_images, stats, o.seed, o.batch_size, o.threads);

  auto stream_of = [&](const std::vector<covflow::score::ScoreRecord>& records,
                       const std::string& metric) {
    std::vector<double> s(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (metric == "ll") {
        s[i] = -records[i].ll;
      } else if (metric == "typicality") {
        s[i] = records[i].grad_norm;
      } else {
        s[i] = records[i].nsd;
      }
    }
    return s;
  };

  const std::string suite_dir = resolve_data_path(o.suite);
  if (!fs::is_directory(suite_dir)) throw DataError("suite directory missing: " + suite_dir);
  std::vector<std::string> entries;
  for (const auto& entry : fs::directory_iterator(suite_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
      entries.push_back(entry.path().string());
    }
  }
  std::sort(entries.begin(), entries.end());
  if (entries.empty()) throw DataError("suite has no datasets: " + suite_dir);

  std::map<covflow::metrics::ConditionKey, covflow::metrics::MetricScores> conditions;
  for (const std::string& dir : entries) {
    covflow::data::Dataset ood = covflow::data::open_dataset(dir);
    nlohmann::json prov;
    try {
      prov = nlohmann::json::parse(ood.manifest.provenance_json);
    } catch (const nlohmann::json::exception&) {
      throw DataError("unreadable provenance in " + dir);
    }
    if (prov.value("kind", "") != "corruption") {
      throw ConfigError("suite dataset " + dir + " is not a corruption dataset");
    }
    if (prov.value("source_checksum", "") != clean.manifest.checksum) {
      throw ConfigError("suite dataset " + dir + " was built from a different clean set " +
                        "(source checksum mismatch)");
    }
    std::string corruption = prov.at("corruption").get<std::string>();
    int severity = prov.at("severity").get<int>();
    Tensor ood_images = ood.load_split("test");
    auto ood_records = covflow::score::score_dataset(model, ood_images, stats, o.seed,
                                                    o.batch_size, o.threads);
    covflow::metrics::MetricScores& slot = conditions[{corruption, severity}];
    for (const std::string& metric : metric_order) {
      slot[metric] = {stream_of(id_records, metric), stream_of(ood_records, metric)};
    }
  }

  covflow::metrics::EvalReport report = covflow::metrics::build_report(conditions, metric_order);
  std::string csv = report.to_csv(resolved);
  if (o.out.empty()) {
    std::cout << csv;
  } else {
    write_text_file(o.out, csv);
    for (const auto& row : report.rows) {
      if (row.corruption == "AVERAGE" && row.severity == 0) {
        std::cout << "overall " << row.metric << ": auroc " << row.auroc_value << ", fpr95 "
                  << row.fpr95 << "\n";
      }
    }
    std::cout << "wrote " << o.out << "\n";
  }
  return 0;
}

struct SampleOpts {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::size_t index = 0;
  std::string image;
  std::size_t count = 1;
  double temperature = 0.7;
  std::uint64_t seed = 2024;
  std::string out;

  std::string resolved() const {
    nlohmann::ordered_json j;
    j["checkpoint"] = checkpoint;
    j["data"] = data;
    j["split"] = split;
    j["index"] = index;
    j["image"] = image;
    j["count"] = count;
    j["temperature"] = temperature;
    j["seed"] = seed;
    j["out"] = out;
    return j.dump();
  }
};

int cmd_sample(const SampleOpts& o) {
  if (o.count < 1) throw ConfigError("count must be >= 1");
  if (!(o.temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
  echo_config("sample", o.resolved());
  covflow::data::Checkpoint ckpt = covflow::data::load_checkpoint(o.checkpoint);
  covflow::flow::FlowModel model = covflow::data::model_from_checkpoint(ckpt);
  const auto& mc = model.config();
  if (!mc.has_sdl() && !mc.conditional()) {
    throw ConfigError("checkpoint's flow does not condition on a low-frequency image; "
                      "sampling needs an sdl or conditional mode");
  }

  Tensor image;
  if (!o.image.empty()) {
    image = covflow::data::read_netpbm(resolve_data_path(o.image));
  } else if (!o.data.empty()) {
    covflow::data::Dataset ds = covflow::data::open_dataset(resolve_data_path(o.data));
    Tensor split_images = ds.load_split(o.split);
    if (o.index >= split_images.dim(0)) {
      throw ConfigError("index " + std::to_string(o.index) + " out of range for split of " +
                        std::to_string(split_images.dim(0)));
    }
    image = Tensor({mc.channels, mc.height, mc.width});
    const std::size_t chw = image.numel();
    std::copy(split_images.data() + o.index * chw, split_images.data() + (o.index + 1) * chw,
              image.data());
  } else {
    throw ConfigError("pass --image or --data to pick a conditioning image");
  }
  if (image.rank() != 3 || image.dim(0) != mc.channels || image.dim(1) != mc.height ||
      image.dim(2) != mc.width) {
    throw ConfigError("conditioning image shape does not match the model");
  }

  Tensor batch({1, mc.channels, mc.height, mc.width});
  std::copy(image.data(), image.data() + image.numel(), batch.data());
  Tensor low1 = model.prepare(batch).second;
  Tensor low({o.count, mc.channels, mc.height, mc.width});
  for (std::size_t s = 0; s < o.count; ++s) {
    std::copy(low1.data(), low1.data() + image.numel(), low.data() + s * image.numel());
  }
  Tensor xh = model.sample_component(o.count, low, o.temperature, o.seed);

  const std::string out_dir = o.out.empty() ? "samples" : o.out;
  fs::create_directories(out_dir);
  const std::string ext = mc.channels == 3 ? ".ppm" : ".pgm";
  covflow::data::write_netpbm(out_dir + "/conditioning" + ext, image, 16);
  Tensor low_img({mc.channels, mc.height, mc.width});
  std::copy(low1.data(), low1.data() + low_img.numel(), low_img.data());
  covflow::data::write_netpbm(out_dir + "/low" + ext, low_img, 16);

  double mean_abs = 0.0;
  char name[64];
  for (std::size_t s = 0; s < o.count; ++s) {
    Tensor high({mc.channels, mc.height, mc.width});
    Tensor recon({mc.channels, mc.height, mc.width});
    for (std::size_t k = 0; k < high.numel(); ++k) {
      double h = xh[s * high.numel() + k];
      mean_abs += std::abs(h);
      high[k] = std::clamp(h + 0.5, 0.0, 1.0);
      recon[k] = std::clamp(low1[k] + h, 0.0, 1.0);
    }
    std::snprintf(name, sizeof(name), "/sample_%02zu", s);
    covflow::data::write_netpbm(out_dir + name + ext, high, 16);
    std::snprintf(name, sizeof(name), "/recon_%02zu", s);
    covflow::data::write_netpbm(out_dir + name + ext, recon, 16);
  }
  mean_abs /= static_cast<double>(o.count * image.numel());
  std::cout << "wrote " << o.count << " samples to " << out_dir << ", mean |x_H| " << mean_abs
            << "\n";
  return 0;
}

struct VerifyOpts {
  std::string data;
};

int cmd_verify(const VerifyOpts& o) {
  covflow::data::Dataset ds = covflow::data::open_dataset(resolve_data_path(o.data));
  covflow::data::verify_dataset_checksum(ds);
  std::cout << "ok: " << ds.manifest.name << ", " << ds.manifest.count << " images, checksum "
            << ds.manifest.checksum << "\n";
  return 0;
}

CLI::Option* opt_last(CLI::Option* option) {
  return option->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional-flow covariate-shift detection toolkit"};
  app.require_subcommand(1);

  SynthOpts synth;
  CLI::App* s_synth = app.add_subcommand("synth", "Generate a synthetic texture dataset");
  std::string synth_cfg;
  opt_last(s_synth->add_option("--config", synth_cfg, "JSON config file"));
  opt_last(s_synth->add_option("--out", synth.out, "Dataset directory"))->required();
  opt_last(s_synth->add_option("--name", synth.name, "Dataset name"));
  opt_last(s_synth->add_option("--count", synth.count, "Total image count"));
  opt_last(s_synth->add_option("--channels", synth.channels, "Channels (1 or 3)"));
  opt_last(s_synth->add_option("--height", synth.height, "Image height"));
  opt_last(s_synth->add_option("--width", synth.width, "Image width"));
  opt_last(s_synth->add_option("--smoothness", synth.smoothness, "Blur sigma, 0 = white noise"));
  opt_last(s_synth->add_option("--grain", synth.grain, "Signal-dependent grain level"));
  opt_last(s_synth->add_option("--seed", synth.seed, "Generator seed"));
  opt_last(s_synth->add_option("--val-fraction", synth.val_fraction, "Validation fraction"));
  opt_last(s_synth->add_option("--test-fraction", synth.test_fraction, "Test fraction"));

  CorruptOpts corrupt;
  CLI::App* s_corrupt = app.add_subcommand("corrupt", "Build a corrupted OOD suite");
  std::string corrupt_cfg;
  opt_last(s_corrupt->add_option("--config", corrupt_cfg, "JSON config file"));
  opt_last(s_corrupt->add_option("--data", corrupt.data, "Clean dataset directory"))->required();
  opt_last(s_corrupt->add_option("--out", corrupt.out, "Suite output directory"))->required();
  opt_last(s_corrupt->add_option("--split", corrupt.split, "Split to corrupt"));
  opt_last(s_corrupt->add_option("--kinds", corrupt.kinds, "Comma list or 'all'"));
  opt_last(s_corrupt->add_option("--severities", corrupt.severities, "Comma list of 1..5"));
  opt_last(s_corrupt->add_option("--seed", corrupt.seed, "Corruption seed"));
  opt_last(s_corrupt->add_option("--table", corrupt.table_path, "Severity table JSON file"));

  TrainOpts train;
  CLI::App* s_train = app.add_subcommand("train", "Train the conditional flow");
  std::string train_cfg;
  opt_last(s_train->add_option("--config", train_cfg, "JSON config file"));
  opt_last(s_train->add_option("--data", train.data, "Dataset directory"))->required();
  opt_last(s_train->add_option("--out", train.out, "Checkpoint path"))->required();
  opt_last(s_train->add_option("--log", train.log_path, "Training log CSV path"));
  opt_last(s_train->add_option("--split", train.split, "Training split"));
  opt_last(s_train->add_option("--val-split", train.val_split, "Validation split for BPD"));
  opt_last(s_train->add_option("--mode", train.mode,
                               "full | high | high-sdl | high-conditional-sdl"));
  opt_last(s_train->add_option("--k", train.k, "Coupling steps"));
  opt_last(s_train->add_option("--hidden", train.hidden, "Conditioner hidden channels"));
  opt_last(s_train->add_option("--blocks", train.blocks, "Conditioner residual blocks"));
  opt_last(s_train->add_option("--sigma", train.sigma, "Frequency-split filter sigma"));
  opt_last(s_train->add_option("--bit-depth", train.bit_depth, "Dequantization bit depth"));
  opt_last(s_train->add_option("--init-seed", train.init_seed, "Parameter init seed"));
  opt_last(s_train->add_option("--alpha", train.alpha, "Typicality penalty weight"));
  opt_last(s_train->add_option("--lr-max", train.lr_max, "Peak one-cycle learning rate"));
  opt_last(s_train->add_option("--epochs", train.epochs, "Training epochs"));
  opt_last(s_train->add_option("--batch-size", train.batch_size, "Minibatch size"));
  opt_last(s_train->add_option("--seed", train.seed, "Shuffle/dequantization seed"));
  opt_last(s_train->add_option("--clip-norm", train.clip_norm, "Gradient clip, 0 = off"));
  opt_last(s_train->add_option("--checkpoint-every", train.checkpoint_every,
                               "Epochs between checkpoint writes"));
  s_train->add_flag("--resume", train.resume, "Continue from the checkpoint at --out");

  StatsOpts stats;
  CLI::App* s_stats = app.add_subcommand("stats", "Compute ID normalization stats");
  std::string stats_cfg;
  opt_last(s_stats->add_option("--config", stats_cfg, "JSON config file"));
  opt_last(s_stats->add_option("--checkpoint", stats.checkpoint, "Checkpoint path"))->required();
  opt_last(s_stats->add_option("--data", stats.data, "Dataset directory"))->required();
  opt_last(s_stats->add_option("--split", stats.split, "Held-out ID split"));
  opt_last(s_stats->add_option("--seed", stats.seed, "Dequantization seed"));
  opt_last(s_stats->add_option("--batch-size", stats.batch_size, "Scoring batch size"));

  ScoreOpts score;
  CLI::App* s_score = app.add_subcommand("score", "Score a dataset per sample");
  std::string score_cfg;
  opt_last(s_score->add_option("--config", score_cfg, "JSON config file"));
  opt_last(s_score->add_option("--checkpoint", score.checkpoint, "Checkpoint path"))->required();
  opt_last(s_score->add_option("--data", score.data, "Dataset directory"))->required();
  opt_last(s_score->add_option("--split", score.split, "Split to score"));
  opt_last(s_score->add_option("--metric", score.metric, "ll | typicality | nsd | all"));
  opt_last(s_score->add_option("--seed", score.seed, "Dequantization seed"));
  opt_last(s_score->add_option("--batch-size", score.batch_size, "Scoring batch size"));
  opt_last(s_score->add_option("--threads", score.threads, "Worker threads"));
  opt_last(s_score->add_option("--out", score.out, "Scores CSV path (stdout when empty)"));

  EvalOpts eval;
  CLI::App* s_eval = app.add_subcommand("eval", "Evaluate detection over an OOD suite");
  std::string eval_cfg;
  opt_last(s_eval->add_option("--config", eval_cfg, "JSON config file"));
  opt_last(s_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint path"))->required();
  opt_last(s_eval->add_option("--data", eval.data, "Clean dataset directory"))->required();
  opt_last(s_eval->add_option("--split", eval.split, "Clean split (ID samples)"));
  opt_last(s_eval->add_option("--suite", eval.suite, "Corrupted suite directory"))->required();
  opt_last(s_eval->add_option("--metrics", eval.metrics, "Comma list of ll,typicality,nsd"));
  opt_last(s_eval->add_option("--seed", eval.seed, "Dequantization seed"));
  opt_last(s_eval->add_option("--batch-size", eval.batch_size, "Scoring batch size"));
  opt_last(s_eval->add_option("--threads", eval.threads, "Worker threads"));
  opt_last(s_eval->add_option("--out", eval.out, "Report CSV path (stdout when empty)"));

  SampleOpts sample;
  CLI::App* s_sample = app.add_subcommand("sample", "Sample high-frequency components");
  std::string sample_cfg;
  opt_last(s_sample->add_option("--config", sample_cfg, "JSON config file"));
  opt_last(s_sample->add_option("--checkpoint", sample.checkpoint, "Checkpoint path"))
      ->required();
  opt_last(s_sample->add_option("--data", sample.data, "Dataset for the conditioning image"));
  opt_last(s_sample->add_option("--split", sample.split, "Split to draw from"));
  opt_last(s_sample->add_option("--index", sample.index, "Image index within the split"));
  opt_last(s_sample->add_option("--image", sample.image, "Netpbm conditioning image"));
  opt_last(s_sample->add_option("--count", sample.count, "Samples to draw"));
  opt_last(s_sample->add_option("--temperature", sample.temperature, "Latent temperature"));
  opt_last(s_sample->add_option("--seed", sample.seed, "Sampling seed"));
  opt_last(s_sample->add_option("--out", sample.out, "Output directory"));

  VerifyOpts verify;
  CLI::App* s_verify = app.add_subcommand("verify", "Verify a dataset checksum");
  opt_last(s_verify->add_option("--data", verify.data, "Dataset directory"))->required();

  // A config file contributes tokens before the real command line so that
  // explicit flags override it. Two passes: find --config, then re-parse.
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (args.size() >= 1) {
      CLI::App* sub = app.get_subcommand_no_throw(args[0]);
      std::string cfg_path;
      for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
          cfg_path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
          cfg_path = args[i].substr(9);
        }
      }
      if (sub != nullptr && !cfg_path.empty()) {
        std::vector<std::string> file_tokens = config_file_tokens(*sub, cfg_path);
        args.insert(args.begin() + 1, file_tokens.begin(), file_tokens.end());
      }
    }
    std::vector<char*> cargs;
    cargs.push_back(argv[0]);
    for (std::string& a : args) cargs.push_back(a.data());
    app.parse(static_cast<int>(cargs.size()), cargs.data());

    if (s_synth->parsed()) return cmd_synth(synth);
    if (s_corrupt->parsed()) return cmd_corrupt(corrupt);
    if (s_train->parsed()) return cmd_train(train);
    if (s_stats->parsed()) return cmd_stats(stats);
    if (s_score->parsed()) return cmd_score(score);
    if (s_eval->parsed()) return cmd_eval(eval);
    if (s_sample->parsed()) return cmd_sample(sample);
    if (s_verify->parsed()) return cmd_verify(verify);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
}
