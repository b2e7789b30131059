#include "covflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "covflow/errors.hpp"
#include "covflow/freq.hpp"
#include "covflow/graph.hpp"
#include "covflow/rng.hpp"
#include "json.hpp"

namespace covflow::train {

namespace {

constexpr double kWarmupFraction = 0.3;
constexpr double kStartDiv = 25.0;
constexpr double kEndDiv = 1e4;
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::uint32_t kStateVersion = 1;

constexpr double kPi = 3.14159265358979323846;

void append_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void append_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void append_f64(std::vector<std::uint8_t>& b, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  append_u64(b, bits);
}

struct StateCursor {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw DataError("train state truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
};

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw ConfigError("alpha must be finite and >= 0");
  }
  if (!(lr_max > 0.0) || !std::isfinite(lr_max)) throw ConfigError("lr_max must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) {
    throw ConfigError("clip_norm must be finite and >= 0");
  }
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["alpha"] = alpha;
  j["batch_size"] = batch_size;
  j["checkpoint_every"] = checkpoint_every;
  j["clip_norm"] = clip_norm;
  j["epochs"] = epochs;
  j["lr_max"] = lr_max;
  j["seed"] = seed;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig cfg;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "alpha") {
        cfg.alpha = value.get<double>();
      } else if (key == "batch_size") {
        cfg.batch_size = value.get<std::size_t>();
      } else if (key == "checkpoint_every") {
        cfg.checkpoint_every = value.get<std::size_t>();
      } else if (key == "clip_norm") {
        cfg.clip_norm = value.get<double>();
      } else if (key == "epochs") {
        cfg.epochs = value.get<std::size_t>();
      } else if (key == "lr_max") {
        cfg.lr_max = value.get<double>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for train config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

double one_cycle_lr(std::size_t step, std::size_t total_steps, double lr_max) {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (!(lr_max > 0.0) || !std::isfinite(lr_max)) throw ConfigError("lr_max must be > 0");
  const double start = lr_max / kStartDiv;
  const double end = lr_max / kEndDiv;
  const double warm = kWarmupFraction * static_cast<double>(total_steps);
  const double s = std::min(static_cast<double>(step), static_cast<double>(total_steps));
  if (s <= warm) {
    double t = warm > 0.0 ? s / warm : 1.0;
    return start + (lr_max - start) * 0.5 * (1.0 - std::cos(kPi * t));
  }
  double t = (s - warm) / (static_cast<double>(total_steps) - warm);
  return end + (lr_max - end) * 0.5 * (1.0 + std::cos(kPi * t));
}

LossDiagnostics evaluate_loss(flow::FlowModel& model, const Tensor& images, double alpha,
                              std::uint64_t seed, std::span<const std::uint64_t> sample_ids) {
  auto [comp, low] = model.prepare(images);
  Tensor v = model.encode_batch(comp, seed, sample_ids);
  auto tg = model.build_train_graph(images.dim(0), alpha);
  std::vector<ad::NodeId> targets{tg.loss, tg.nll_mean, tg.penalty_mean};
  ad::Plan plan = ad::make_plan(*tg.graph, targets);
  ad::PtrBindings pb;
  for (std::size_t i = 0; i < tg.param_names.size(); ++i) {
    pb.set(tg.param_leaves[i], &model.params().at(tg.param_names[i]));
  }
  pb.set(tg.v, &v);
  if (tg.has_xl) pb.set(tg.xl, &low);
  ad::Workspace ws;
  std::vector<Tensor> vals = ad::execute(*tg.graph, plan, pb, ws);
  LossDiagnostics out;
  out.loss = vals[0][0];
  out.nll = vals[1][0];
  out.penalty = vals[2][0];
  if (!std::isfinite(out.loss)) throw NumericError("loss is not finite");
  return out;
}

std::string train_log_header() { return "epoch,step,nll_nats,penalty,bpd,lr"; }

std::string train_log_row(const TrainLogRow& row) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g,%.17g,%.17g", row.epoch, row.step,
                row.nll, row.penalty, row.bpd, row.lr);
  return buf;
}

std::vector<std::uint8_t> TrainState::serialize() const {
  if (master.size() != m.size() || master.size() != v.size()) {
    throw std::logic_error("train state arrays misaligned");
  }
  std::vector<std::uint8_t> b;
  append_u32(b, kStateVersion);
  append_u64(b, next_epoch);
  append_u64(b, global_step);
  append_u64(b, adam_t);
  append_u64(b, master.size());
  for (std::size_t i = 0; i < master.size(); ++i) {
    append_u64(b, master[i].numel());
    for (std::size_t k = 0; k < master[i].numel(); ++k) append_f64(b, master[i][k]);
    for (std::size_t k = 0; k < m[i].numel(); ++k) append_f64(b, m[i][k]);
    for (std::size_t k = 0; k < v[i].numel(); ++k) append_f64(b, v[i][k]);
  }
  return b;
}

TrainState TrainState::deserialize(const std::vector<std::uint8_t>& bytes) {
  StateCursor c{bytes};
  std::uint32_t version = c.u32();
  if (version != kStateVersion) {
    throw DataError("unsupported train state version " + std::to_string(version));
  }
  TrainState st;
  st.next_epoch = c.u64();
  st.global_step = c.u64();
  st.adam_t = c.u64();
  std::uint64_t n = c.u64();
  if (n > 1u << 20) throw DataError("train state parameter count is implausible");
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t numel = c.u64();
    if (numel > 1u << 28) throw DataError("train state tensor size is implausible");
    c.need(static_cast<std::size_t>(numel) * 24);
    Tensor mast({static_cast<std::size_t>(numel)});
    Tensor mm({static_cast<std::size_t>(numel)});
    Tensor vv({static_cast<std::size_t>(numel)});
    for (std::size_t k = 0; k < numel; ++k) mast[k] = c.f64();
    for (std::size_t k = 0; k < numel; ++k) mm[k] = c.f64();
    for (std::size_t k = 0; k < numel; ++k) vv[k] = c.f64();
    st.master.push_back(std::move(mast));
    st.m.push_back(std::move(mm));
    st.v.push_back(std::move(vv));
  }
  if (c.pos != bytes.size()) throw DataError("train state has trailing bytes");
  return st;
}

void adam_update(std::vector<Tensor>& master, std::vector<Tensor>& m, std::vector<Tensor>& v,
                 const std::vector<const Tensor*>& grads, std::uint64_t t, double lr,
                 double grad_scale) {
  if (t < 1) throw std::invalid_argument("adam step counter must be >= 1");
  if (master.size() != m.size() || master.size() != v.size() ||
      master.size() != grads.size()) {
    throw std::invalid_argument("adam state arrays misaligned");
  }
  const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (std::size_t i = 0; i < master.size(); ++i) {
    if (grads[i]->numel() != master[i].numel()) {
      throw std::invalid_argument("adam gradient shape mismatch");
    }
    for (std::size_t k = 0; k < master[i].numel(); ++k) {
      double g = (*grads[i])[k] * grad_scale;
      m[i][k] = kBeta1 * m[i][k] + (1.0 - kBeta1) * g;
      v[i][k] = kBeta2 * v[i][k] + (1.0 - kBeta2) * g * g;
      double mhat = m[i][k] / bias1;
      double vhat = v[i][k] / bias2;
      master[i][k] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
}

namespace {

struct GraphSlot {
  flow::FlowModel::TrainGraph tg;
  ad::Plan plan;
};

}  // namespace

TrainSummary train(flow::FlowModel& model, const Tensor& images, const TrainConfig& cfg,
                   const TrainHooks& hooks, const std::vector<std::uint8_t>* resume_state) {
  cfg.validate();
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw std::invalid_argument("train expects a nonempty [N,C,H,W] batch");
  }
  const std::size_t n = images.dim(0);
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t chw = c * h * w;
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const std::vector<std::string>& names = model.params().names();

  TrainState st;
  if (resume_state != nullptr && !resume_state->empty()) {
    st = TrainState::deserialize(*resume_state);
    if (st.master.size() != names.size()) {
      throw DataError("train state does not match the model's parameter list");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      Tensor& p = model.params().at(names[i]);
      if (st.master[i].numel() != p.numel()) {
        throw DataError("train state tensor size mismatch for " + names[i]);
      }
      for (std::size_t k = 0; k < p.numel(); ++k) p[k] = st.master[i][k];
    }
    if (st.next_epoch > cfg.epochs) {
      throw ConfigError("checkpoint already covers " + std::to_string(st.next_epoch) +
                        " epochs, config asks for " + std::to_string(cfg.epochs));
    }
  } else {
    for (const std::string& name : names) {
      const Tensor& p = model.params().at(name);
      Tensor flat({p.numel()});
      for (std::size_t k = 0; k < p.numel(); ++k) flat[k] = p[k];
      st.master.push_back(std::move(flat));
      st.m.emplace_back(std::vector<std::size_t>{p.numel()});
      st.v.emplace_back(std::vector<std::size_t>{p.numel()});
    }
  }

  std::map<std::size_t, GraphSlot> slots;
  ad::Workspace ws;
  const double range_width = model.config().dequant().hi - model.config().dequant().lo;

  TrainSummary summary;
  summary.final_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t consecutive_bad = 0;

  Tensor batch;
  for (std::size_t epoch = st.next_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(Rng::mix({cfg.seed, 777, epoch}));
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform() * static_cast<double>(i));
      j = std::min(j, i - 1);
      std::swap(order[i - 1], order[j]);
    }

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * cfg.batch_size;
      const std::size_t bsize = std::min(cfg.batch_size, n - begin);
      if (batch.rank() != 4 || batch.dim(0) != bsize) batch = Tensor({bsize, c, h, w});
      std::vector<std::uint64_t> ids(bsize);
      for (std::size_t b = 0; b < bsize; ++b) {
        ids[b] = order[begin + b];
        const double* src = images.data() + order[begin + b] * chw;
        std::copy(src, src + chw, batch.data() + b * chw);
      }

      auto it = slots.find(bsize);
      if (it == slots.end()) {
        GraphSlot slot;
        slot.tg = model.build_train_graph(bsize, cfg.alpha);
        std::vector<ad::NodeId> targets{slot.tg.loss, slot.tg.nll_mean, slot.tg.penalty_mean};
        targets.insert(targets.end(), slot.tg.param_grads.begin(), slot.tg.param_grads.end());
        slot.plan = ad::make_plan(*slot.tg.graph, targets);
        it = slots.emplace(bsize, std::move(slot)).first;
      }
      GraphSlot& slot = it->second;

      auto [comp, low] = model.prepare(batch);
      Tensor v = model.encode_batch(comp, Rng::mix({cfg.seed, 888, epoch, s}), ids);
      ad::PtrBindings pb;
      for (std::size_t i = 0; i < names.size(); ++i) {
        pb.set(slot.tg.param_leaves[i], &model.params().at(names[i]));
      }
      pb.set(slot.tg.v, &v);
      if (slot.tg.has_xl) pb.set(slot.tg.xl, &low);
      std::vector<Tensor> vals = ad::execute(*slot.tg.graph, slot.plan, pb, ws);

      bool finite = std::isfinite(vals[0][0]) && std::isfinite(vals[1][0]) &&
                    std::isfinite(vals[2][0]);
      for (std::size_t g = 3; finite && g < vals.size(); ++g) {
        for (std::size_t k = 0; k < vals[g].numel(); ++k) {
          if (!std::isfinite(vals[g][k])) {
            finite = false;
            break;
          }
        }
      }
      if (!finite) {
        ++summary.batches_skipped;
        if (++consecutive_bad >= 3) {
          throw NumericError("loss or gradients non-finite for 3 consecutive batches (epoch " +
                             std::to_string(epoch) + ", step " + std::to_string(s) + ")");
        }
        continue;
      }
      consecutive_bad = 0;

      double scale = 1.0;
      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (std::size_t g = 3; g < vals.size(); ++g) {
          for (std::size_t k = 0; k < vals[g].numel(); ++k) sq += vals[g][k] * vals[g][k];
        }
        double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
      }

      const double lr = one_cycle_lr(st.global_step, total_steps, cfg.lr_max);
      std::vector<const Tensor*> grads(names.size());
      for (std::size_t i = 0; i < names.size(); ++i) grads[i] = &vals[3 + i];
      adam_update(st.master, st.m, st.v, grads, ++st.adam_t, lr, scale);
      for (std::size_t i = 0; i < names.size(); ++i) {
        Tensor& p = model.params().at(names[i]);
        for (std::size_t k = 0; k < p.numel(); ++k) p[k] = st.master[i][k];
      }
      ++st.global_step;
      ++summary.steps_run;
      summary.final_loss = vals[0][0];

      if (hooks.on_step) {
        TrainLogRow row;
        row.epoch = epoch;
        row.step = st.global_step;
        row.nll = vals[1][0];
        row.penalty = vals[2][0];
        row.bpd = freq::bits_per_dim(-vals[1][0], model.config().dims(),
                                     model.config().bit_depth, range_width);
        row.lr = lr;
        hooks.on_step(row);
      }
    }

    st.next_epoch = epoch + 1;
    if (hooks.on_checkpoint &&
        ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs)) {
      data::Checkpoint ckpt = data::checkpoint_from_model(model);
      ckpt.train_state = st.serialize();
      hooks.on_checkpoint(epoch, ckpt);
    }
  }
  return summary;
}

}  // namespace covflow::train
