#include "covflow/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "covflow/hash.hpp"
#include "json.hpp"

namespace covflow::flow {

const char* flow_mode_name(FlowMode m) {
  switch (m) {
    case FlowMode::kFullUnconditional: return "full";
    case FlowMode::kHighUnconditional: return "high";
    case FlowMode::kHighUnconditionalSdl: return "high-sdl";
    case FlowMode::kHighConditionalSdl: return "high-conditional-sdl";
  }
  return "?";
}

FlowMode flow_mode_from_name(const std::string& name) {
  if (name == "full") return FlowMode::kFullUnconditional;
  if (name == "high") return FlowMode::kHighUnconditional;
  if (name == "high-sdl") return FlowMode::kHighUnconditionalSdl;
  if (name == "high-conditional-sdl" || name == "high-cond-sdl") {
    return FlowMode::kHighConditionalSdl;
  }
  throw std::invalid_argument("unknown flow mode '" + name +
                              "' (expected full, high, high-sdl, high-conditional-sdl)");
}

freq::DequantConfig ModelConfig::dequant() const {
  freq::DequantConfig d;
  d.bit_depth = bit_depth;
  d.lo = models_high() ? -0.5 : 0.0;
  d.hi = models_high() ? 0.5 : 1.0;
  return d;
}

void ModelConfig::validate() const {
  if (channels == 0) throw std::invalid_argument("channels must be positive");
  if (height < 2 || width < 2) throw std::invalid_argument("spatial size must be at least 2x2");
  if (coupling_steps == 0) throw std::invalid_argument("need at least one coupling step");
  if (hidden_channels == 0) throw std::invalid_argument("hidden channels must be positive");
  if (!(filter_sigma > 0.0) || !std::isfinite(filter_sigma)) {
    throw std::invalid_argument("filter sigma must be positive and finite");
  }
  dequant().validate();
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["mode"] = flow_mode_name(mode);
  j["channels"] = channels;
  j["height"] = height;
  j["width"] = width;
  j["coupling_steps"] = coupling_steps;
  j["hidden_channels"] = hidden_channels;
  j["residual_blocks"] = residual_blocks;
  j["filter_sigma"] = filter_sigma;
  j["bit_depth"] = bit_depth;
  j["init_seed"] = init_seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelConfig cfg;
  static const char* known[] = {"mode",          "channels",       "height",
                                "width",         "coupling_steps", "hidden_channels",
                                "residual_blocks", "filter_sigma", "bit_depth",
                                "init_seed"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  if (j.contains("mode")) cfg.mode = flow_mode_from_name(j.at("mode").get<std::string>());
  if (j.contains("channels")) cfg.channels = j.at("channels").get<std::size_t>();
  if (j.contains("height")) cfg.height = j.at("height").get<std::size_t>();
  if (j.contains("width")) cfg.width = j.at("width").get<std::size_t>();
  if (j.contains("coupling_steps")) cfg.coupling_steps = j.at("coupling_steps").get<std::size_t>();
  if (j.contains("hidden_channels")) cfg.hidden_channels = j.at("hidden_channels").get<std::size_t>();
  if (j.contains("residual_blocks")) cfg.residual_blocks = j.at("residual_blocks").get<std::size_t>();
  if (j.contains("filter_sigma")) cfg.filter_sigma = j.at("filter_sigma").get<double>();
  if (j.contains("bit_depth")) cfg.bit_depth = j.at("bit_depth").get<std::uint32_t>();
  if (j.contains("init_seed")) cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

namespace {

std::string step_name(std::size_t k, const char* field) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step%02zu.%s", k, field);
  return buf;
}

Tensor gaussian_init(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.gaussian();
  return t;
}

}  // namespace

FlowModel FlowModel::build(const ModelConfig& cfg) {
  cfg.validate();
  FlowModel m(cfg);
  const std::size_t c = cfg.channels;
  const std::size_t hidden = cfg.hidden_channels;

  if (cfg.has_sdl()) {
    m.params_.add("sdl.beta1", Tensor({c}, -2.0));
    m.params_.add("sdl.beta2", Tensor({c}, softplus_inverse(1.0)));
  }
  const std::size_t cond_in = cfg.conditional() ? 2 * c : c;
  for (std::size_t k = 0; k < cfg.coupling_steps; ++k) {
    Rng rng(Rng::mix({cfg.init_seed, 1000 + k}));
    m.params_.add(step_name(k, "stem_w"),
                  gaussian_init({hidden, cond_in, 3, 3},
                                1.0 / std::sqrt(9.0 * static_cast<double>(cond_in)), rng));
    m.params_.add(step_name(k, "stem_b"), Tensor({hidden}));
    for (std::size_t r = 0; r < cfg.residual_blocks; ++r) {
      m.params_.add(step_name(k, ("blk" + std::to_string(r) + "_w").c_str()),
                    gaussian_init({2 * hidden, hidden, 3, 3},
                                  1.0 / std::sqrt(9.0 * static_cast<double>(hidden)), rng));
      m.params_.add(step_name(k, ("blk" + std::to_string(r) + "_b").c_str()),
                    Tensor({2 * hidden}));
    }
    m.params_.add(step_name(k, "head_w"), Tensor({2 * c, hidden, 3, 3}));
    m.params_.add(step_name(k, "head_b"), Tensor({2 * c}));
    m.params_.add(step_name(k, "s_scale"), Tensor({1}, 1.0));

    Rng mix_rng(Rng::mix({cfg.init_seed, 2000 + k}));
    Conv1x1Init init = conv1x1_init_rotation(c, mix_rng);
    if (c > 1) {
      m.params_.add(step_name(k, "mix_l"), init.l_packed);
      m.params_.add(step_name(k, "mix_u"), init.u_packed);
    }
    m.params_.add(step_name(k, "mix_d"), init.log_diag);
    m.mix_consts_.emplace(step_name(k, "mix_perm"), init.perm);
    m.mix_consts_.emplace(step_name(k, "mix_sign"), init.sign);

    m.masks_.emplace(k, checkerboard_mask(cfg.height, cfg.width, static_cast<int>(k % 2)));
  }
  return m;
}

std::string parameter_fingerprint(const std::string& config_json,
                                  const std::vector<std::string>& names,
                                  const std::function<const Tensor&(const std::string&)>& get) {
  std::uint64_t h = fnv1a(config_json.data(), config_json.size());
  for (const std::string& name : names) {
    h = fnv1a(name.data(), name.size(), h);
    const Tensor& t = get(name);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      float f = static_cast<float>(t[i]);
      h = fnv1a(&f, sizeof(f), h);
    }
  }
  return hash_hex(h);
}

std::string FlowModel::fingerprint() const {
  return parameter_fingerprint(cfg_.to_json(), params_.names(),
                               [this](const std::string& n) -> const Tensor& {
                                 return params_.at(n);
                               });
}

std::map<std::string, ad::NodeId> FlowModel::make_param_leaves(ad::Graph& g) const {
  std::map<std::string, ad::NodeId> leaves;
  for (const std::string& name : params_.names()) {
    leaves.emplace(name, g.leaf(name, params_.at(name).shape()));
  }
  return leaves;
}

FlowModel::FlowNodes FlowModel::build_flow(ad::Graph& g, ad::NodeId v,
                                           std::optional<ad::NodeId> xl,
                                           const std::map<std::string, ad::NodeId>& leaves) const {
  ad::NodeId cur = v;
  ad::NodeId ld = 0;
  bool have_ld = false;
  auto add_ld = [&](ad::NodeId part) {
    ld = have_ld ? g.add(ld, part) : part;
    have_ld = true;
  };

  if (cfg_.has_sdl()) {
    FlowStepOut s = build_sdl(g, cur, *xl, leaves.at("sdl.beta1"), leaves.at("sdl.beta2"));
    cur = s.z;
    add_ld(s.logdet);
  }
  for (std::size_t k = 0; k < cfg_.coupling_steps; ++k) {
    ConditionerParams cp;
    cp.stem_w = leaves.at(step_name(k, "stem_w"));
    cp.stem_b = leaves.at(step_name(k, "stem_b"));
    for (std::size_t r = 0; r < cfg_.residual_blocks; ++r) {
      cp.blocks.emplace_back(leaves.at(step_name(k, ("blk" + std::to_string(r) + "_w").c_str())),
                             leaves.at(step_name(k, ("blk" + std::to_string(r) + "_b").c_str())));
    }
    cp.head_w = leaves.at(step_name(k, "head_w"));
    cp.head_b = leaves.at(step_name(k, "head_b"));
    cp.s_scale = leaves.at(step_name(k, "s_scale"));
    std::optional<ad::NodeId> cond = cfg_.conditional() ? xl : std::nullopt;
    FlowStepOut cpl = build_coupling(g, cur, cond, masks_.at(k), cp);
    cur = cpl.z;
    add_ld(cpl.logdet);

    Conv1x1Params mp;
    if (cfg_.channels > 1) {
      mp.l_packed = leaves.at(step_name(k, "mix_l"));
      mp.u_packed = leaves.at(step_name(k, "mix_u"));
    }
    mp.log_diag = leaves.at(step_name(k, "mix_d"));
    mp.perm = mix_consts_.at(step_name(k, "mix_perm"));
    mp.sign = mix_consts_.at(step_name(k, "mix_sign"));
    FlowStepOut mix = build_conv1x1(g, cur, mp);
    cur = mix.z;
    add_ld(mix.logdet);
  }
  return FlowNodes{cur, ld};
}

FlowModel::CacheEntry& FlowModel::cached(Purpose purpose, std::size_t batch) {
  std::lock_guard<std::mutex> lock(*cache_mutex_);
  auto key = std::make_pair(static_cast<int>(purpose), batch);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;

  CacheEntry e;
  e.graph = std::make_unique<ad::Graph>();
  ad::Graph& g = *e.graph;
  const Shape in_shape{batch, cfg_.channels, cfg_.height, cfg_.width};
  e.v = g.leaf("input.v", in_shape);
  e.has_xl = cfg_.has_sdl() || cfg_.conditional();
  if (e.has_xl) e.xl = g.leaf("input.xl", in_shape);
  auto leaves = make_param_leaves(g);
  FlowNodes f = build_flow(g, e.v, e.has_xl ? std::optional<ad::NodeId>(e.xl) : std::nullopt,
                           leaves);

  const double d = static_cast<double>(cfg_.dims());
  ad::NodeId lp = g.affine(g.sum_reduce(g.square(f.z), {1, 2, 3}), -0.5,
                           -0.5 * d * std::log(2.0 * std::numbers::pi));
  ad::NodeId ll = g.add(lp, f.logdet);

  switch (purpose) {
    case Purpose::kLikelihood:
      e.targets = {ll, lp, f.logdet};
      break;
    case Purpose::kScore: {
      ad::NodeId total = g.reshape(g.sum_reduce(ll, {0, 1, 2, 3}), {1});
      ad::NodeId grad = g.gradient_nodes(total, std::span<const ad::NodeId>(&e.v, 1))[0];
      ad::NodeId sumsq = g.sum_reduce(g.square(grad), {1, 2, 3});
      ad::NodeId gn = g.sqrt_of(sumsq);
      e.targets = {ll, lp, f.logdet, gn};
      break;
    }
    case Purpose::kTransform:
      e.targets = {f.z, f.logdet};
      break;
  }
  e.plan = ad::make_plan(g, e.targets, false);
  auto [pos, ok] = cache_.emplace(key, std::move(e));
  (void)ok;
  return pos->second;
}

FlowModel::StepStEntry& FlowModel::cached_step_st(std::size_t step, std::size_t batch) {
  std::lock_guard<std::mutex> lock(*cache_mutex_);
  auto key = std::make_pair(step, batch);
  auto it = step_cache_.find(key);
  if (it != step_cache_.end()) return it->second;

  StepStEntry e;
  e.graph = std::make_unique<ad::Graph>();
  ad::Graph& g = *e.graph;
  const Shape in_shape{batch, cfg_.channels, cfg_.height, cfg_.width};
  e.z_in = g.leaf("input.z", in_shape);
  e.has_xl = cfg_.conditional();
  if (e.has_xl) e.xl = g.leaf("input.xl", in_shape);

  ConditionerParams cp;
  std::map<std::string, ad::NodeId> leaves = make_param_leaves(g);
  cp.stem_w = leaves.at(step_name(step, "stem_w"));
  cp.stem_b = leaves.at(step_name(step, "stem_b"));
  for (std::size_t r = 0; r < cfg_.residual_blocks; ++r) {
    cp.blocks.emplace_back(leaves.at(step_name(step, ("blk" + std::to_string(r) + "_w").c_str())),
                           leaves.at(step_name(step, ("blk" + std::to_string(r) + "_b").c_str())));
  }
  cp.head_w = leaves.at(step_name(step, "head_w"));
  cp.head_b = leaves.at(step_name(step, "head_b"));
  cp.s_scale = leaves.at(step_name(step, "s_scale"));

  CouplingStOut st = build_coupling_st(
      g, e.z_in, e.has_xl ? std::optional<ad::NodeId>(e.xl) : std::nullopt, masks_.at(step), cp);
  std::vector<ad::NodeId> targets{st.s_eff, st.t_masked};
  e.plan = ad::make_plan(g, targets, false);
  auto [pos, ok] = step_cache_.emplace(key, std::move(e));
  (void)ok;
  return pos->second;
}

ad::PtrBindings FlowModel::bind_params(const ad::Graph& g) const {
  ad::PtrBindings pb;
  for (const std::string& name : params_.names()) {
    pb.set(g.find_leaf(name), &params_.at(name));
  }
  return pb;
}

std::pair<Tensor, Tensor> FlowModel::prepare(const Tensor& images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.height || s[3] != cfg_.width) {
    throw std::invalid_argument("batch shape " + shape_str(s) + " does not match model " +
                                shape_str({0, cfg_.channels, cfg_.height, cfg_.width}));
  }
  if (!images.all_finite()) throw std::invalid_argument("batch contains non-finite values");
  if (!cfg_.models_high()) {
    return {images, Tensor(s)};
  }
  freq::Decomposition d = freq::decompose(images, cfg_.filter_sigma);
  return {std::move(d.high), std::move(d.low)};
}

Tensor FlowModel::encode_batch(const Tensor& component_raw, std::uint64_t seed,
                               std::span<const std::uint64_t> sample_ids) const {
  const std::size_t b = component_raw.dim(0);
  const std::size_t chw = component_raw.numel() / b;
  if (!sample_ids.empty() && sample_ids.size() != b) {
    throw std::invalid_argument("sample id count does not match batch size");
  }
  freq::DequantConfig dq = cfg_.dequant();
  Tensor out(component_raw.shape());
  Tensor slice({1, cfg_.channels, cfg_.height, cfg_.width});
  for (std::size_t i = 0; i < b; ++i) {
    std::uint64_t id = sample_ids.empty() ? i : sample_ids[i];
    Rng rng(Rng::mix({seed, 0x5eedull, id}));
    std::memcpy(slice.data(), component_raw.data() + i * chw, chw * sizeof(double));
    Tensor enc = freq::encode_component(slice, dq, rng);
    std::memcpy(out.data() + i * chw, enc.data(), chw * sizeof(double));
  }
  return out;
}

namespace {

void check_outputs_finite(const std::vector<Tensor>& vals, const char* what) {
  for (const Tensor& t : vals) {
    if (!t.all_finite()) {
      throw std::runtime_error(std::string(what) + " produced non-finite values");
    }
  }
}

}  // namespace

std::vector<LikelihoodResult> FlowModel::log_likelihood(const Tensor& images, std::uint64_t seed,
                                                        std::span<const std::uint64_t> sample_ids) {
  auto [comp, low] = prepare(images);
  Tensor v = encode_batch(comp, seed, sample_ids);
  CacheEntry& e = cached(Purpose::kLikelihood, images.dim(0));
  ad::PtrBindings pb = bind_params(*e.graph);
  pb.set(e.v, &v);
  if (e.has_xl) pb.set(e.xl, &low);
  ad::Workspace ws;
  std::vector<Tensor> vals = ad::execute(*e.graph, e.plan, pb, ws);
  check_outputs_finite(vals, "log_likelihood");

  const std::size_t b = images.dim(0);
  std::vector<LikelihoodResult> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i].ll = vals[0][i];
    out[i].log_prior = vals[1][i];
    out[i].logdet = vals[2][i];
    out[i].bpd = freq::bits_per_dim(out[i].ll, cfg_.dims(), cfg_.bit_depth,
                                    cfg_.dequant().hi - cfg_.dequant().lo);
  }
  return out;
}

FlowModel::ScoreBatch FlowModel::score(const Tensor& images, std::uint64_t seed,
                                       std::span<const std::uint64_t> sample_ids) {
  auto [comp, low] = prepare(images);
  Tensor v = encode_batch(comp, seed, sample_ids);
  CacheEntry& e = cached(Purpose::kScore, images.dim(0));
  ad::PtrBindings pb = bind_params(*e.graph);
  pb.set(e.v, &v);
  if (e.has_xl) pb.set(e.xl, &low);
  ad::Workspace ws;
  std::vector<Tensor> vals = ad::execute(*e.graph, e.plan, pb, ws);
  check_outputs_finite(vals, "score");

  const std::size_t b = images.dim(0);
  ScoreBatch out;
  out.ll.resize(b);
  out.grad_norm.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    out.ll[i].ll = vals[0][i];
    out.ll[i].log_prior = vals[1][i];
    out.ll[i].logdet = vals[2][i];
    out.ll[i].bpd = freq::bits_per_dim(out.ll[i].ll, cfg_.dims(), cfg_.bit_depth,
                                       cfg_.dequant().hi - cfg_.dequant().lo);
    out.grad_norm[i] = vals[3][i];
  }
  return out;
}

FlowModel::TransformOut FlowModel::transform(const Tensor& component, const Tensor& low) {
  CacheEntry& e = cached(Purpose::kTransform, component.dim(0));
  ad::PtrBindings pb = bind_params(*e.graph);
  pb.set(e.v, &component);
  if (e.has_xl) pb.set(e.xl, &low);
  ad::Workspace ws;
  std::vector<Tensor> vals = ad::execute(*e.graph, e.plan, pb, ws);
  check_outputs_finite(vals, "transform");
  TransformOut out;
  out.z = std::move(vals[0]);
  out.logdet = vals[1].reshaped({component.dim(0)});
  return out;
}

Tensor FlowModel::inverse_transform(const Tensor& z, const Tensor& low) {
  const std::size_t b = z.dim(0);
  const bool needs_low = cfg_.has_sdl() || cfg_.conditional();
  if (needs_low && !z.same_shape(low)) {
    throw std::invalid_argument("inverse_transform needs a low component batch matching " +
                                shape_str(z.shape()));
  }
  Tensor cur = z;
  for (std::size_t k = cfg_.coupling_steps; k-- > 0;) {
    const Tensor* lp = cfg_.channels > 1 ? &params_.at(step_name(k, "mix_l")) : nullptr;
    const Tensor* up = cfg_.channels > 1 ? &params_.at(step_name(k, "mix_u")) : nullptr;
    static const Tensor dummy({1});
    std::vector<double> w = conv1x1_materialize(
        lp ? *lp : dummy, up ? *up : dummy, params_.at(step_name(k, "mix_d")),
        mix_consts_.at(step_name(k, "mix_perm")), mix_consts_.at(step_name(k, "mix_sign")));
    cur = conv1x1_inverse(cur, w);

    StepStEntry& se = cached_step_st(k, b);
    ad::PtrBindings pb = bind_params(*se.graph);
    pb.set(se.z_in, &cur);
    if (se.has_xl) pb.set(se.xl, &low);
    ad::Workspace ws;
    std::vector<Tensor> st = ad::execute(*se.graph, se.plan, pb, ws);
    cur = coupling_inverse(cur, st[0], st[1]);
  }
  if (cfg_.has_sdl()) {
    cur = sdl_inverse(cur, low, params_.at("sdl.beta1"), params_.at("sdl.beta2"));
  }
  return cur;
}

Tensor FlowModel::sample_component(std::size_t count, const Tensor& low, double temperature,
                                   std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("sample count must be positive");
  if (temperature < 0.0 || !std::isfinite(temperature)) {
    throw std::invalid_argument("temperature must be non-negative and finite");
  }
  const bool needs_low = cfg_.has_sdl() || cfg_.conditional();
  const Shape shape{count, cfg_.channels, cfg_.height, cfg_.width};
  if (needs_low) {
    if (low.shape() != shape) {
      throw std::invalid_argument("conditional sampling needs a low component batch of shape " +
                                  shape_str(shape) + ", got " + shape_str(low.shape()));
    }
  } else if (low.numel() != 0) {
    throw std::invalid_argument("this flow is unconditional; no conditioning input is accepted");
  }
  Rng rng(Rng::mix({seed, 0x5a3cull}));
  Tensor z(shape);
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = temperature * rng.gaussian();
  return inverse_transform(z, low);
}

FlowModel::TrainGraph FlowModel::build_train_graph(std::size_t batch, double alpha) const {
  if (batch == 0) throw std::invalid_argument("batch size must be positive");
  TrainGraph tg;
  tg.graph = std::make_unique<ad::Graph>();
  ad::Graph& g = *tg.graph;
  const Shape in_shape{batch, cfg_.channels, cfg_.height, cfg_.width};
  tg.v = g.leaf("input.v", in_shape);
  tg.has_xl = cfg_.has_sdl() || cfg_.conditional();
  if (tg.has_xl) tg.xl = g.leaf("input.xl", in_shape);
  auto leaves = make_param_leaves(g);
  FlowNodes f = build_flow(g, tg.v, tg.has_xl ? std::optional<ad::NodeId>(tg.xl) : std::nullopt,
                           leaves);

  const double d = static_cast<double>(cfg_.dims());
  ad::NodeId lp = g.affine(g.sum_reduce(g.square(f.z), {1, 2, 3}), -0.5,
                           -0.5 * d * std::log(2.0 * std::numbers::pi));
  tg.ll = g.add(lp, f.logdet);
  tg.nll_mean = g.neg(g.reshape(g.mean_reduce(tg.ll, {0, 1, 2, 3}), {1}));

  if (alpha != 0.0) {
    ad::NodeId total = g.reshape(g.sum_reduce(tg.ll, {0, 1, 2, 3}), {1});
    ad::NodeId grad = g.gradient_nodes(total, std::span<const ad::NodeId>(&tg.v, 1))[0];
    ad::NodeId gn = g.sqrt_of(g.sum_reduce(g.square(grad), {1, 2, 3}));
    tg.penalty_mean = g.reshape(g.mean_reduce(gn, {0, 1, 2, 3}), {1});
  } else {
    tg.penalty_mean = g.zero_constant({1});
  }
  tg.loss = g.add(tg.nll_mean, g.affine(tg.penalty_mean, alpha, 0.0));

  tg.param_names.assign(params_.names().begin(), params_.names().end());
  for (const std::string& name : tg.param_names) tg.param_leaves.push_back(leaves.at(name));
  tg.param_grads = g.gradient_nodes(tg.loss, tg.param_leaves);
  return tg;
}

}  // namespace covflow::flow
