#include "vitbd/inject.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <utility>

#include "vitbd/rng.hpp"
#include "vitbd/trigger.hpp"

namespace vitbd {

std::vector<double> unit_scores(const Tensor& weight) {
  if (!weight.defined() || weight.rank() != 2)
    throw DimensionError("unit_scores: weight must be rank 2");
  const std::size_t in = weight.shape()[0];
  const std::size_t out = weight.shape()[1];
  auto v = weight.values();
  std::vector<double> scores(out, 0.0);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) scores[j] += std::abs(v[i * out + j]);
  return scores;
}

namespace {

std::vector<std::string> eligible_layers(const ModelSpec& spec,
                                         std::size_t block,
                                         const LayerSet& layers) {
  if (block >= spec.num_blocks)
    throw ValueError("neuron selection: block index out of range");
  const std::string pre = "block" + std::to_string(block) + ".";
  std::vector<std::string> out;
  if (layers.attn_proj) out.push_back(pre + "attn.proj");
  if (layers.mlp) {
    out.push_back(pre + "mlp.fc1");
    out.push_back(pre + "mlp.fc2");
  }
  // Ranking ties break on the layer path, so keep the list sorted.
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<NeuronRef> ranked_units(const Checkpoint& model, std::size_t block,
                                    const LayerSet& layers) {
  std::vector<NeuronRef> all;
  for (const auto& layer : eligible_layers(model.spec(), block, layers)) {
    const Tensor& w = model.param(layer + ".weight");
    const std::size_t in = w.shape()[0];
    std::vector<double> scores = unit_scores(w);
    for (std::size_t j = 0; j < scores.size(); ++j)
      all.push_back({layer, j, scores[j], in + 1});
  }
  std::sort(all.begin(), all.end(), [](const NeuronRef& a, const NeuronRef& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.unit < b.unit;
  });
  return all;
}

}  // namespace

NeuronSelection select_top_n(const Checkpoint& model, std::size_t block,
                             std::size_t n, const LayerSet& layers) {
  if (!model.defined()) throw ValueError("select_top_n: undefined model");
  std::vector<NeuronRef> all = ranked_units(model, block, layers);
  if (n > all.size())
    throw ValueError("select_top_n: n exceeds the " +
                     std::to_string(all.size()) + " available units");
  NeuronSelection sel;
  sel.entries.assign(all.begin(), all.begin() + n);
  for (const NeuronRef& e : sel.entries) sel.tuned_scalars += e.tunable_scalars;
  sel.total_scalars = model.total_scalars();
  return sel;
}

NeuronSelection select_within_tpr(const Checkpoint& model, std::size_t block,
                                  double cap, const LayerSet& layers) {
  if (!model.defined()) throw ValueError("select_within_tpr: undefined model");
  if (!(cap >= 0.0)) throw ValueError("select_within_tpr: cap must be >= 0");
  std::vector<NeuronRef> all = ranked_units(model, block, layers);
  NeuronSelection sel;
  sel.total_scalars = model.total_scalars();
  const double budget = cap * static_cast<double>(sel.total_scalars);
  for (const NeuronRef& e : all) {
    if (static_cast<double>(sel.tuned_scalars + e.tunable_scalars) > budget)
      break;
    sel.entries.push_back(e);
    sel.tuned_scalars += e.tunable_scalars;
  }
  return sel;
}

Tensor project(const Tensor& theta, const Tensor& theta0, double eps,
               double zero_floor) {
  if (!theta.defined() || !theta0.defined() || theta.shape() != theta0.shape())
    throw DimensionError("project: theta and theta0 shapes differ");
  if (!(eps > 0.0)) throw ValueError("project: eps must be positive");
  if (!(zero_floor >= 0.0))
    throw ValueError("project: zero_floor must be non-negative");
  auto v = theta.values();
  auto v0 = theta0.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double half = v0[i] == 0.0 ? zero_floor : eps * std::abs(v0[i]);
    out[i] = std::clamp(v[i], v0[i] - half, v0[i] + half);
  }
  return Tensor::from_data(theta.shape(), std::move(out));
}

namespace {

// Snapshot plus projection band for one tunable parameter tensor.
struct TrackedParam {
  std::string name;
  std::vector<double> lo, hi;
  std::vector<std::uint8_t> mask;
};

TrackedParam make_tracked(const std::string& name, const Tensor& t,
                          double eps, double zero_floor) {
  TrackedParam tp;
  tp.name = name;
  auto v = t.values();
  tp.lo.resize(v.size());
  tp.hi.resize(v.size());
  tp.mask.assign(v.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double half = v[i] == 0.0 ? zero_floor : eps * std::abs(v[i]);
    tp.lo[i] = v[i] - half;
    tp.hi[i] = v[i] + half;
  }
  return tp;
}

Tensor one_hot_rows(const std::vector<int>& labels, std::size_t classes) {
  std::vector<double> buf(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    buf[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  return Tensor::from_data({labels.size(), classes}, std::move(buf));
}

}  // namespace

std::string InjectionLog::to_json() const {
  nlohmann::json j;
  j["epsilon"] = epsilon;
  j["tpr"] = selection.tpr();
  j["tuned_scalars"] = selection.tuned_scalars;
  j["total_scalars"] = selection.total_scalars;
  j["epoch_loss"] = epoch_loss;
  j["epoch_asr"] = epoch_asr;
  j["final_asr"] = final_asr;
  j["stopped_early"] = stopped_early;
  j["max_band_violation"] = max_band_violation;
  j["inject_seconds"] = inject_seconds;
  nlohmann::json ents = nlohmann::json::array();
  for (const NeuronRef& e : selection.entries) {
    ents.push_back({{"layer", e.layer},
                    {"unit", e.unit},
                    {"score", e.score},
                    {"tunable_scalars", e.tunable_scalars}});
  }
  j["selection"] = std::move(ents);
  return j.dump(2);
}

InjectResult inject(const Checkpoint& model, const LabeledDataset& poisoned,
                    const InjectConfig& cfg, const LabeledDataset* monitor) {
  const auto t_start = std::chrono::steady_clock::now();
  if (!model.defined()) throw ValueError("inject: undefined model");
  const ModelSpec& spec = model.spec();
  poisoned.validate(spec.num_classes);
  if (poisoned.size() == 0) throw ValueError("inject: empty poisoned dataset");
  if (monitor != nullptr) monitor->validate(spec.num_classes);
  if (!(cfg.epsilon > 0.0)) throw ValueError("inject: epsilon must be positive");
  if (!(cfg.lr >= 0.0)) throw ValueError("inject: lr must be non-negative");
  if (cfg.batch_size == 0)
    throw ValueError("inject: batch_size must be positive");

  const std::size_t block =
      cfg.block < 0 ? spec.num_blocks - 1 : static_cast<std::size_t>(cfg.block);

  InjectResult res;
  res.model = model.clone();
  InjectionLog& log = res.log;
  log.epsilon = cfg.epsilon;
  log.selection = cfg.neurons > 0
                      ? select_top_n(res.model, block, cfg.neurons, cfg.layers)
                      : select_within_tpr(res.model, block, cfg.tpr_cap,
                                          cfg.layers);

  // Group the chosen units per layer and build masks over weight columns
  // and bias slots.
  std::vector<std::string> layer_order;
  for (const NeuronRef& e : log.selection.entries)
    if (std::find(layer_order.begin(), layer_order.end(), e.layer) ==
        layer_order.end())
      layer_order.push_back(e.layer);
  std::sort(layer_order.begin(), layer_order.end());

  for (const auto& name : res.model.names())
    res.model.param(name).set_requires_grad(false);

  std::vector<TrackedParam> tracked;
  for (const std::string& layer : layer_order) {
    Tensor& w = res.model.param(layer + ".weight");
    Tensor& b = res.model.param(layer + ".bias");
    double floor = cfg.zero_floor;
    if (floor < 0.0) {
      double mass = 0.0;
      for (double x : w.values()) mass += std::abs(x);
      for (double x : b.values()) mass += std::abs(x);
      floor = 0.01 * mass / static_cast<double>(w.size() + b.size());
    }
    TrackedParam tw = make_tracked(layer + ".weight", w, cfg.epsilon, floor);
    TrackedParam tb = make_tracked(layer + ".bias", b, cfg.epsilon, floor);
    const std::size_t out_dim = w.shape()[1];
    for (const NeuronRef& e : log.selection.entries) {
      if (e.layer != layer) continue;
      for (std::size_t i = 0; i < w.shape()[0]; ++i)
        tw.mask[i * out_dim + e.unit] = 1;
      tb.mask[e.unit] = 1;
    }
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    tracked.push_back(std::move(tw));
    tracked.push_back(std::move(tb));
  }

  std::vector<std::size_t> order(poisoned.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0;
       epoch < cfg.epochs && !log.selection.entries.empty(); ++epoch) {
    Rng erng(derive_seed(cfg.seed, "inject-epoch", epoch));
    erng.shuffle(order.data(), order.size());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      auto [batch, labels] = gather_batch(poisoned, order, start, b);
      Tensor probs = softmax(forward(res.model, batch, false).logits, 1);
      Tensor loss = mse(probs, one_hot_rows(labels, spec.num_classes));
      for (TrackedParam& tp : tracked) res.model.param(tp.name).zero_grad();
      backward(loss);
      for (TrackedParam& tp : tracked) {
        Tensor& p = res.model.param(tp.name);
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto v = p.raw_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (!tp.mask[i]) continue;
          v[i] = std::clamp(v[i] - cfg.lr * g[i], tp.lo[i], tp.hi[i]);
          const double over = std::max(v[i] - tp.hi[i], tp.lo[i] - v[i]);
          log.max_band_violation = std::max(log.max_band_violation, over);
        }
      }
      loss_sum += loss.item() * static_cast<double>(b);
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(poisoned.size()));
    if (monitor != nullptr) {
      log.final_asr = accuracy(res.model, *monitor);
      log.epoch_asr.push_back(log.final_asr);
      if (log.final_asr > cfg.asr_stop) {
        log.stopped_early = true;
        break;
      }
    }
  }

  for (const auto& name : res.model.names())
    res.model.param(name).set_requires_grad(true);
  log.inject_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return res;
}

Checkpoint inject_badnets_baseline(const Checkpoint& model,
                                   const LabeledDataset& clean,
                                   const TriggerSpec& trigger, int target_label,
                                   double poison_fraction,
                                   const TrainConfig& hyper) {
  if (!model.defined()) throw ValueError("badnets baseline: undefined model");
  const ModelSpec& spec = model.spec();
  clean.validate(spec.num_classes);
  if (clean.size() == 0)
    throw ValueError("badnets baseline: empty clean dataset");
  if (target_label < 0 ||
      static_cast<std::size_t>(target_label) >= spec.num_classes)
    throw ValueError("badnets baseline: target label out of range");
  if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0))
    throw ValueError("badnets baseline: poison fraction outside [0,1]");
  if (hyper.batch_size == 0)
    throw ValueError("badnets baseline: batch_size must be positive");

  LabeledDataset mixed;
  mixed.split = "badnets-mix";
  const std::size_t n = clean.size();
  const std::size_t k = static_cast<std::size_t>(
      std::llround(poison_fraction * static_cast<double>(n)));
  {
    NoGradGuard ng;
    const auto& s = clean.images.shape();
    const std::size_t stride = s[1] * s[2] * s[3];
    std::vector<double> buf((n + k) * stride);
    auto cv = clean.images.values();
    std::copy(cv.begin(), cv.end(), buf.begin());
    mixed.labels = clean.labels;
    if (k > 0) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      Rng prng(derive_seed(hyper.seed, "badnets-poison"));
      prng.shuffle(order.data(), order.size());
      order.resize(k);
      Tensor stamped = stamp(clean.subset(order).images, trigger);
      auto sv = stamped.values();
      std::copy(sv.begin(), sv.end(), buf.begin() + n * stride);
      mixed.labels.insert(mixed.labels.end(), k, target_label);
    }
    mixed.images = Tensor::from_data({n + k, s[1], s[2], s[3]}, std::move(buf));
  }

  Checkpoint work = model.clone();
  for (const auto& name : work.names())
    work.param(name).set_requires_grad(true);
  Adam opt(hyper.lr, hyper.beta1, hyper.beta2, hyper.adam_eps);
  std::vector<std::size_t> order(mixed.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    Rng erng(derive_seed(hyper.seed, "badnets-epoch", epoch));
    erng.shuffle(order.data(), order.size());
    for (std::size_t start = 0; start < order.size();
         start += hyper.batch_size) {
      const std::size_t b = std::min(hyper.batch_size, order.size() - start);
      auto [batch, labels] = gather_batch(mixed, order, start, b);
      Tensor loss = cross_entropy(forward(work, batch, false).logits, labels);
      for (const auto& name : work.names()) work.param(name).zero_grad();
      backward(loss);
      opt.step(work);
    }
  }
  work.meta().epochs_trained += hyper.epochs;
  return work;
}

}  // namespace vitbd
