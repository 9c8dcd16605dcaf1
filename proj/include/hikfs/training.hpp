#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hikfs/data.hpp"
#include "hikfs/error.hpp"
#include "hikfs/hierarchy.hpp"
#include "hikfs/memory.hpp"
#include "hikfs/model.hpp"
#include "hikfs/ndgrad.hpp"
#include "hikfs/random.hpp"

namespace hikfs {

struct MemoryConfig {
  std::size_t m = 12;
  std::size_t r = 3;
  double gamma = 0.95;
  double mu = 1.05;
  double eta = 0.95;
  std::size_t k = 1;
  Metric metric = Metric::dot_cosine;
  MemoryMode mode = MemoryMode::mem3;
};

/// N-way, n_s-shot episodes with n_q queries per class.
struct EpisodeShape {
  std::size_t way = 5;
  std::size_t shot = 5;
  std::size_t query = 15;
};

struct TrainConfig {
  Setting setting = Setting::meta;
  EncoderConfig encoder;
  HeadSwitches switches;
  bool hierarchy = true;  // false collapses all fine classes under one coarse class

  // Supervised regime.
  std::size_t pretrain_epochs = 30;
  std::size_t finetune_epochs = 5;
  std::size_t batch_size = 128;
  nd::OptimizerConfig pretrain_opt{nd::OptimizerKind::sgd_momentum, 0.1, 0.9, 1e-4};
  nd::OptimizerConfig finetune_opt{nd::OptimizerKind::sgd_momentum, 0.01, 0.9, 1e-4};
  nd::ScheduleKind supervised_schedule = nd::ScheduleKind::cosine;

  // Meta regime.
  std::size_t iterations = 2000;
  nd::OptimizerConfig meta_opt{nd::OptimizerKind::adam, 1e-3, 0.9, 1e-4};
  nd::ScheduleKind meta_schedule = nd::ScheduleKind::halving;
  std::size_t halve_every = 10000;

  MemoryConfig memory;
  EpisodeShape episode;
  std::size_t eval_episodes = 600;
  std::uint64_t seed = 0;

  void validate() const {
    encoder.validate();
    const auto& m = memory;
    if (!(m.gamma > 0.0 && m.gamma < 1.0)) throw ConfigError("config: gamma must lie in (0, 1)");
    if (!(m.mu > 1.0 && m.mu < 2.0)) throw ConfigError("config: mu must lie in (1, 2)");
    if (!(m.eta > 0.0 && m.eta < 1.0)) throw ConfigError("config: eta must lie in (0, 1)");
    if (m.m == 0 || m.r == 0 || m.r > m.m) throw ConfigError("config: need 1 <= r <= m");
    if (m.k == 0) throw ConfigError("config: K must be at least 1");
    if (episode.way < 1 || episode.shot < 1 || episode.query < 1) throw ConfigError("config: way, shot and query must be >= 1");
    if (batch_size == 0) throw ConfigError("config: batch size must be positive");
    for (const auto* o : {&pretrain_opt, &finetune_opt, &meta_opt})
      if (!(o->lr > 0.0)) throw ConfigError("config: learning rates must be positive");
  }
};

struct LogLine {
  std::size_t iter = 0;
  double loss = 0.0;
  double acc = 0.0;
  double lr = 0.0;
};

inline std::string format_log_line(const LogLine& l) {
  std::ostringstream os;
  os.precision(6);
  os << "iter=" << l.iter << " loss=" << l.loss << " acc=" << l.acc << " lr=" << l.lr;
  return os.str();
}

using LogFn = std::function<void(const LogLine&)>;

/// Training operations refuse held-out test data.
inline void require_trainable(const Dataset& ds, const char* op) {
  if (ds.split == SplitTag::test) throw DataError(std::string(op) + ": refusing to train on a test-tagged split");
  if (ds.empty()) throw DataError(std::string(op) + ": empty dataset");
}

inline ClassHierarchy effective_hierarchy(const TrainConfig& cfg, const ClassHierarchy& h) {
  return cfg.hierarchy ? h : h.collapsed();
}

/// The hierarchy a trained model was built for: a single coarse output
/// means the collapsed ablation.
inline ClassHierarchy model_hierarchy(const ModelParams& p, const ClassHierarchy& h) {
  if (p.num_fine != h.num_fine()) {
    throw DataError("model has " + std::to_string(p.num_fine) + " fine outputs but the dataset has " +
                    std::to_string(h.num_fine()) + " fine classes");
  }
  if (p.num_coarse == h.num_coarse()) return h;
  if (p.num_coarse == 1) return h.collapsed();
  throw DataError("model coarse outputs do not match the dataset hierarchy");
}

/// Argmax over each row of the marginal fine distribution.
inline std::vector<std::size_t> predict_marginal(const Logits& logits, const ClassHierarchy& h) {
  const std::size_t n = logits.fine.dim(0), Y = logits.fine.dim(1), Z = logits.coarse.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto lp = marginal_fine_log_probs(logits.fine.data().subspan(i * Y, Y), logits.coarse.data().subspan(i * Z, Z), h);
    out[i] = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
  }
  return out;
}

inline std::vector<std::size_t> argmax_rows(const nd::Tensor& t) {
  const std::size_t n = t.dim(0), c = t.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = t.data().subspan(i * c, c);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  partial_shuffle(order, n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

inline double fraction_equal(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return a.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(a.size());
}

inline nd::Tensor encode_all(const ModelParams& p, const Dataset& ds, std::size_t chunk = 256) {
  nd::NoGradGuard guard;
  std::vector<double> values;
  for (std::size_t b = 0; b < ds.size(); b += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, ds.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    auto f = encode(p, ds.batch(idx));
    values.insert(values.end(), f.data().begin(), f.data().end());
  }
  return nd::Tensor({ds.size(), p.feature_dim()}, std::move(values));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model checkpoints. The header tensor records everything needed to rebuild
// the architecture, plus the episode memory settings of meta models.

struct SavedModel {
  ModelParams params;
  MemoryConfig memory;
};

inline std::vector<nd::NamedTensor> model_to_tensors(const ModelParams& p, const MemoryConfig& mc) {
  const auto& e = p.encoder;
  std::vector<double> h{1.0,
                        p.setting == Setting::meta ? 1.0 : 0.0,
                        e.kind == EncoderKind::conv4 ? 1.0 : 0.0,
                        static_cast<double>(e.input_dim),
                        static_cast<double>(e.feature_dim),
                        static_cast<double>(e.image_side),
                        static_cast<double>(p.num_fine),
                        static_cast<double>(p.num_coarse),
                        p.switches.attention ? 1.0 : 0.0,
                        p.switches.mlp ? 1.0 : 0.0,
                        p.switches.knn ? 1.0 : 0.0,
                        mc.metric == Metric::dot_cosine ? 0.0 : 1.0,
                        static_cast<double>(static_cast<int>(mc.mode)),
                        static_cast<double>(mc.k),
                        static_cast<double>(e.hidden.size())};
  for (std::size_t w : e.hidden) h.push_back(static_cast<double>(w));
  h.push_back(static_cast<double>(e.channels.size()));
  for (std::size_t c : e.channels) h.push_back(static_cast<double>(c));
  std::vector<nd::NamedTensor> out{{"model.header", nd::Tensor::vector(h)}};
  for (auto& t : p.named_parameters()) out.push_back(t);
  return out;
}

inline SavedModel model_from_tensors(std::span<const nd::NamedTensor> tensors) {
  const auto header = nd::find_tensor(tensors, "model.header").values();
  std::size_t pos = 0;
  auto next = [&]() {
    if (pos >= header.size()) throw DataError("model checkpoint: truncated header");
    const double v = header[pos++];
    if (!(v >= 0.0) || v != std::floor(v)) throw DataError("model checkpoint: corrupt header");
    return static_cast<std::size_t>(v);
  };
  if (next() != 1) throw DataError("model checkpoint: unsupported header version");
  SavedModel m;
  const Setting setting = next() ? Setting::meta : Setting::supervised;
  EncoderConfig e;
  e.kind = next() ? EncoderKind::conv4 : EncoderKind::mlp;
  e.input_dim = next();
  e.feature_dim = next();
  e.image_side = next();
  const std::size_t num_fine = next(), num_coarse = next();
  HeadSwitches sw;
  sw.attention = next() != 0;
  sw.mlp = next() != 0;
  sw.knn = next() != 0;
  m.memory.metric = next() ? Metric::neg_euclidean : Metric::dot_cosine;
  const std::size_t mode = next();
  if (mode > 2) throw DataError("model checkpoint: unknown memory mode");
  m.memory.mode = static_cast<MemoryMode>(mode);
  m.memory.k = next();
  e.hidden.resize(next());
  for (auto& w : e.hidden) w = next();
  e.channels.resize(next());
  for (auto& c : e.channels) c = next();
  m.params = ModelParams::init(setting, e, num_fine, num_coarse, 0, sw);
  m.params.load_values(tensors);
  return m;
}

inline void save_model(const std::filesystem::path& path, const ModelParams& p, const MemoryConfig& mc) {
  nd::save_tensors(path, model_to_tensors(p, mc));
}

inline SavedModel load_model(const std::filesystem::path& path) { return model_from_tensors(nd::load_tensors(path)); }

// ---------------------------------------------------------------------------
// Supervised regime.

/// Trains encoder and both MLP heads on the summed coarse and fine
/// cross-entropy. One log line per epoch.
inline ModelParams pretrain_supervised(const TrainConfig& cfg, const Dataset& data, const LogFn& log = {}) {
  cfg.validate();
  require_trainable(data, "pretrain");
  const auto h = effective_hierarchy(cfg, data.hierarchy);
  auto params = ModelParams::init(Setting::supervised, cfg.encoder, h.num_fine(), h.num_coarse(),
                                  derive_seed(cfg.seed, "init"), cfg.switches);
  std::vector<nd::NamedTensor> trainable = params.encoder_parameters();
  for (auto group : {params.coarse_mlp_parameters(), params.fine_mlp_parameters()})
    trainable.insert(trainable.end(), group.begin(), group.end());
  nd::Optimizer opt(cfg.pretrain_opt, trainable);
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const nd::LrSchedule schedule{cfg.supervised_schedule, cfg.pretrain_opt.lr, cfg.pretrain_epochs * per_epoch,
                                cfg.halve_every};

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, "batches", epoch);
    double loss_sum = 0.0, hit = 0.0;
    for (const auto& idx : detail::minibatches(data.size(), cfg.batch_size, rng)) {
      const auto fine = data.fine_labels(idx);
      std::vector<std::size_t> coarse;
      for (std::size_t y : fine) coarse.push_back(h.coarse_of(y));
      auto f = encode(params, data.batch(idx));
      auto a = mlp_logits(params.fine_mlp, f);
      auto b = mlp_logits(params.coarse_mlp, f);
      auto loss = nd::add(nd::nll(nd::log_softmax(a), fine), nd::nll(nd::log_softmax(b), coarse));
      loss_sum += loss.item() * static_cast<double>(idx.size());
      hit += detail::fraction_equal(argmax_rows(a), fine) * static_cast<double>(idx.size());
      opt.set_lr(schedule.at(step));
      nd::backward(loss);
      opt.step();
      ++step;
    }
    if (log) {
      const double n = static_cast<double>(data.size());
      log({step, loss_sum / n, hit / n, opt.lr()});
    }
  }
  return params;
}

/// Per-class k-means (r = m) over encoder features; utilities start at 1.
inline MemoryBank seed_supervised_memory(const TrainConfig& cfg, const ModelParams& params, const Dataset& data) {
  require_trainable(data, "seed memory");
  const auto features = detail::encode_all(params, data);
  const std::size_t d = params.feature_dim();
  MemoryBank bank(params.num_fine, cfg.memory.m, d, cfg.memory.metric, cfg.memory.k);
  const auto by_fine = data.indices_by_fine();
  for (std::size_t j = 0; j < params.num_fine; ++j) {
    std::vector<Point> points;
    for (std::size_t i : by_fine[j]) {
      auto row = features.data().subspan(i * d, d);
      points.emplace_back(row.begin(), row.end());
    }
    if (points.empty()) continue;
    auto centroids = kmeans(points, cfg.memory.m, derive_seed(cfg.seed, "kmeans-init", j));
    for (std::size_t k = 0; k < centroids.size(); ++k) bank.write_slot(j, k, centroids[k]);
    bank.set_occupancy(j, centroids.size());
  }
  return bank;
}

struct FinetuneResult {
  ModelParams params;
  MemoryBank bank;
};

/// Trains only the attention transforms with the memory-augmented fine head,
/// running merge/cache and utility updates after every step and the
/// clustering refresh at each epoch end. Encoder and MLP heads stay frozen.
inline FinetuneResult finetune_supervised(const TrainConfig& cfg, const ModelParams& pretrained,
                                          const MemoryBank& seeded, const Dataset& data, const LogFn& log = {}) {
  MemoryBank bank = seeded.clone();
  cfg.validate();
  require_trainable(data, "finetune");
  if (pretrained.setting != Setting::supervised) throw ConfigError("finetune: model was not built for the supervised setting");
  if (bank.live_rows().empty()) throw ConfigError("finetune: memory has not been seeded");
  if (bank.classes() != pretrained.num_fine || bank.dim() != pretrained.feature_dim()) {
    throw ShapeError("finetune: memory shape does not match the model");
  }
  const auto h = model_hierarchy(pretrained, data.hierarchy);
  ModelParams params = pretrained.clone();
  params.switches = cfg.switches;
  const auto trainable = params.switches.attention && params.switches.knn ? params.attention_parameters()
                                                                          : std::vector<nd::NamedTensor>{};
  std::vector<nd::NamedTensor> frozen = params.encoder_parameters();
  for (auto group : {params.coarse_mlp_parameters(), params.fine_mlp_parameters()})
    frozen.insert(frozen.end(), group.begin(), group.end());
  std::optional<nd::Optimizer> opt;
  if (!trainable.empty()) opt.emplace(cfg.finetune_opt, trainable);
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const nd::LrSchedule schedule{cfg.supervised_schedule, cfg.finetune_opt.lr, cfg.finetune_epochs * per_epoch,
                                cfg.halve_every};
  const auto& mc = cfg.memory;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, "finetune-batches", epoch);
    double loss_sum = 0.0, hit = 0.0;
    for (const auto& idx : detail::minibatches(data.size(), cfg.batch_size, rng)) {
      const auto fine = data.fine_labels(idx);
      nd::Tensor f;
      {
        nd::NoGradGuard guard;
        f = encode(params, data.batch(idx));
      }
      // Score first: the KNN prediction that drives the memory update is the
      // one made before this step's parameter change.
      std::vector<SampleOutcome> outcomes;
      if (params.switches.knn) {
        nd::NoGradGuard guard;
        auto scores = score_slots(f, bank, model_transforms(params));
        outcomes = knn_outcomes(scores, class_scores(scores, bank), bank, fine);
      }
      auto logits = forward_heads(params, f, {&bank, nullptr});
      auto loss = hierarchical_nll(logits.fine, logits.coarse, fine, h);
      loss_sum += loss.item() * static_cast<double>(idx.size());
      hit += detail::fraction_equal(predict_marginal(logits, h), fine) * static_cast<double>(idx.size());
      if (opt) {
        opt->set_lr(schedule.at(step));
        nd::backward(loss);
        opt->step();
        for (auto& [name, t] : frozen) {
          nd::Tensor p = t;
          p.zero_grad();
        }
      }
      ++step;
      for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& o = outcomes[i];
        update_on_sample(bank, f.data().subspan(i * f.dim(1), f.dim(1)), fine[i], o.predicted, o.nearest_slot, mc.gamma);
        update_utility(bank, fine[i], o.topk_slots, o.predicted == fine[i], mc.mu, mc.eta);
      }
    }
    end_of_epoch_refresh(bank, mc.r, derive_seed(cfg.seed, "kmeans", epoch));
    if (log) {
      const double n = static_cast<double>(data.size());
      log({step, loss_sum / n, hit / n, opt ? opt->lr() : 0.0});
    }
  }
  return {std::move(params), std::move(bank)};
}

struct SupervisedMetrics {
  double fine_acc = 0.0;
  double coarse_acc = 0.0;
  std::size_t samples = 0;
};

/// Fine accuracy by argmax marginal probability, coarse accuracy by argmax
/// coarse logit. `bank` may be null when the KNN head is off.
inline SupervisedMetrics evaluate_supervised(const ModelParams& params, const MemoryBank* bank, const Dataset& data,
                                             std::size_t chunk = 256) {
  if (data.empty()) throw DataError("evaluate: empty split");
  const auto h = model_hierarchy(params, data.hierarchy);
  nd::NoGradGuard guard;
  std::size_t fine_hit = 0, coarse_hit = 0;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    const auto fine = data.fine_labels(idx);
    auto logits = forward_full(params, data.batch(idx), {bank, nullptr});
    const auto pred = predict_marginal(logits, h);
    const auto pred_c = argmax_rows(logits.coarse);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      fine_hit += pred[i] == fine[i];
      coarse_hit += pred_c[i] == h.coarse_of(fine[i]);
    }
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(fine_hit) / n, static_cast<double>(coarse_hit) / n, data.size()};
}

// ---------------------------------------------------------------------------
// Episodes.

struct EpisodeSpec {
  std::vector<std::size_t> task_classes;
  std::vector<std::vector<std::size_t>> support_idx;
  std::vector<std::vector<std::size_t>> query_idx;
  std::uint64_t seed = 0;

  bool operator==(const EpisodeSpec&) const = default;
};

/// Uniform choice of `way` classes from the pool, then per class `shot`
/// support and `query` query samples drawn without replacement.
inline EpisodeSpec sample_task(Rng& rng, std::span<const std::size_t> pool, const EpisodeShape& shape,
                               const Dataset& data, const std::vector<std::vector<std::size_t>>& by_fine) {
  if (pool.size() < shape.way) {
    throw DataError("sample_task: pool has " + std::to_string(pool.size()) + " classes, episode needs " +
                    std::to_string(shape.way));
  }
  EpisodeSpec spec;
  std::vector<std::size_t> classes(pool.begin(), pool.end());
  partial_shuffle(classes, shape.way, rng);
  spec.task_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(shape.way));
  const std::size_t need = shape.shot + shape.query;
  for (std::size_t y : spec.task_classes) {
    if (y >= by_fine.size() || by_fine[y].size() < need) {
      const std::size_t have = y < by_fine.size() ? by_fine[y].size() : 0;
      throw DataError("sample_task: class '" + data.hierarchy.fine_name(y) + "' has " + std::to_string(have) +
                      " samples, episode needs " + std::to_string(need));
    }
    auto idx = by_fine[y];
    partial_shuffle(idx, need, rng);
    spec.support_idx.emplace_back(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shape.shot));
    spec.query_idx.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(shape.shot),
                                idx.begin() + static_cast<std::ptrdiff_t>(need));
  }
  return spec;
}

inline EpisodeSpec sample_task(Rng& rng, std::span<const std::size_t> pool, const EpisodeShape& shape,
                               const Dataset& data) {
  return sample_task(rng, pool, shape, data, data.indices_by_fine());
}

struct EpisodeForward {
  Logits logits;                     // over the task's classes
  TaskHierarchy task;
  std::vector<std::size_t> targets;  // local fine ids of the queries
};

/// Encodes support and queries in one batch, builds the episode memories
/// (fine from the support, coarse as the union of member slots) and
/// scores the queries. Gradients reach the encoder through the memory.
inline EpisodeForward episode_forward(const ModelParams& params, const Dataset& data, const EpisodeSpec& spec,
                                      const MemoryConfig& mc, const ClassHierarchy& h) {
  EpisodeForward out;
  out.task = restrict_hierarchy(h, spec.task_classes);
  std::vector<std::size_t> idx;
  std::vector<std::vector<std::size_t>> support_rows(spec.task_classes.size());
  for (std::size_t j = 0; j < spec.support_idx.size(); ++j)
    for (std::size_t i : spec.support_idx[j]) {
      support_rows[j].push_back(idx.size());
      idx.push_back(i);
    }
  const std::size_t n_support = idx.size();
  std::vector<std::size_t> query_rows;
  for (std::size_t j = 0; j < spec.query_idx.size(); ++j)
    for (std::size_t i : spec.query_idx[j]) {
      query_rows.push_back(idx.size() - n_support);
      idx.push_back(i);
      out.targets.push_back(j);
    }
  auto f = encode(params, data.batch(idx));
  std::vector<std::size_t> s_rows(n_support), q_rows(query_rows.size());
  std::iota(s_rows.begin(), s_rows.end(), std::size_t{0});
  std::iota(q_rows.begin(), q_rows.end(), n_support);
  auto support = nd::select_rows(f, s_rows);
  auto queries = nd::select_rows(f, q_rows);
  auto fine_bank = build_meta_memory(support, support_rows, mc.mode, mc.metric, mc.k);
  auto coarse_bank = group_memory(fine_bank, out.task.local);
  out.logits = forward_heads(params, queries, {&fine_bank, &coarse_bank}, {out.task.fine_ids, out.task.coarse_ids});
  return out;
}

struct MetaTrace {
  std::vector<double> losses;  // one per iteration
};

/// Episodic training with the task-restricted hierarchical NLL.
inline ModelParams train_meta(const TrainConfig& cfg, const Dataset& data, const LogFn& log = {},
                              MetaTrace* trace = nullptr, std::size_t log_every = 100) {
  cfg.validate();
  require_trainable(data, "train_meta");
  if (cfg.setting != Setting::meta) throw ConfigError("train_meta: config setting must be meta");
  const auto h = effective_hierarchy(cfg, data.hierarchy);
  auto params = ModelParams::init(Setting::meta, cfg.encoder, h.num_fine(), h.num_coarse(), derive_seed(cfg.seed, "init"),
                                  cfg.switches);
  const auto heads = active_heads(Setting::meta, cfg.switches);
  std::vector<nd::NamedTensor> trainable = params.encoder_parameters();
  if (heads.coarse_mlp) {
    auto g = params.coarse_mlp_parameters();
    trainable.insert(trainable.end(), g.begin(), g.end());
  }
  if (cfg.switches.attention) {
    auto g = params.attention_parameters();
    trainable.insert(trainable.end(), g.begin(), g.end());
  }
  nd::Optimizer opt(cfg.meta_opt, trainable);
  const nd::LrSchedule schedule{cfg.meta_schedule, cfg.meta_opt.lr, cfg.iterations, cfg.halve_every};
  const auto pool = data.fine_classes();
  const auto by_fine = data.indices_by_fine();

  double loss_window = 0.0, acc_window = 0.0;
  std::size_t in_window = 0;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Rng rng = make_rng(cfg.seed, "train-episodes", it);
    const auto spec = sample_task(rng, pool, cfg.episode, data, by_fine);
    auto fw = episode_forward(params, data, spec, cfg.memory, h);
    auto loss = hierarchical_nll(fw.logits.fine, fw.logits.coarse, fw.targets, fw.task.local);
    const double lv = loss.item();
    if (trace) trace->losses.push_back(lv);
    loss_window += lv;
    acc_window += detail::fraction_equal(predict_marginal(fw.logits, fw.task.local), fw.targets);
    ++in_window;
    opt.set_lr(schedule.at(it));
    nd::backward(loss);
    opt.step();
    if (log && ((it + 1) % std::max<std::size_t>(1, log_every) == 0 || it + 1 == cfg.iterations)) {
      log({it + 1, loss_window / static_cast<double>(in_window), acc_window / static_cast<double>(in_window), opt.lr()});
      loss_window = acc_window = 0.0;
      in_window = 0;
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Episodic evaluation.

struct EvalResult {
  double mean_acc = 0.0;
  double ci95 = 0.0;
  std::vector<double> accuracies;  // per episode, in episode order
};

/// Returns predicted local labels (index into task_classes) for the
/// episode's queries, class-major in query_idx order.
using EpisodePredictor = std::function<std::vector<std::size_t>(const EpisodeSpec&)>;

inline EvalResult summarize_accuracies(std::vector<double> acc) {
  EvalResult r;
  const double n = static_cast<double>(acc.size());
  double sum = 0.0;
  for (double a : acc) sum += a;
  r.mean_acc = sum / n;
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - r.mean_acc) * (a - r.mean_acc);
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  r.accuracies = std::move(acc);
  return r;
}

/// Episode e uses the stream derive_seed(seed, "episodes", e). Workers
/// write into per-episode slots and the reduction runs in episode order, so
/// any worker count gives the same bits.
inline EvalResult evaluate_episodes(const Dataset& data, const EpisodeShape& shape, std::size_t n_episodes,
                                    std::uint64_t seed, const EpisodePredictor& predict, std::size_t workers = 1) {
  if (n_episodes == 0) throw ConfigError("evaluate: episode count must be positive");
  if (data.empty()) throw DataError("evaluate: empty split");
  const auto pool = data.fine_classes();
  const auto by_fine = data.indices_by_fine();
  std::vector<double> acc(n_episodes);
  auto run_one = [&](std::size_t e) {
    const std::uint64_t s = derive_seed(seed, "episodes", e);
    Rng rng(s);
    auto spec = sample_task(rng, pool, shape, data, by_fine);
    spec.seed = s;
    const auto pred = predict(spec);
    std::size_t hit = 0, total = 0;
    for (std::size_t j = 0; j < spec.query_idx.size(); ++j)
      for (std::size_t q = 0; q < spec.query_idx[j].size(); ++q, ++total) {
        if (total >= pred.size()) throw ShapeError("evaluate: predictor returned too few labels");
        hit += pred[total] == j;
      }
    if (pred.size() != total) throw ShapeError("evaluate: predictor returned too many labels");
    acc[e] = static_cast<double>(hit) / static_cast<double>(total);
  };

  workers = std::max<std::size_t>(1, std::min(workers, n_episodes));
  if (workers == 1) {
    for (std::size_t e = 0; e < n_episodes; ++e) run_one(e);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool_threads;
    for (std::size_t w = 0; w < workers; ++w) {
      pool_threads.emplace_back([&, w] {
        try {
          for (std::size_t e = next++; e < n_episodes; e = next++) run_one(e);
        } catch (...) {
          errors[w] = std::current_exception();
          next = n_episodes;
        }
      });
    }
    for (auto& t : pool_threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return summarize_accuracies(std::move(acc));
}

inline EvalResult evaluate_episodes(const ModelParams& params, const Dataset& data, const EpisodeShape& shape,
                                    std::size_t n_episodes, std::uint64_t seed, const MemoryConfig& mc,
                                    std::size_t workers = 1) {
  if (params.setting != Setting::meta) throw ConfigError("evaluate: episodic evaluation needs a meta-setting model");
  const auto h = model_hierarchy(params, data.hierarchy);
  return evaluate_episodes(
      data, shape, n_episodes, seed,
      [&](const EpisodeSpec& spec) {
        nd::NoGradGuard guard;
        auto fw = episode_forward(params, data, spec, mc, h);
        return predict_marginal(fw.logits, fw.task.local);
      },
      workers);
}

}  // namespace hikfs
