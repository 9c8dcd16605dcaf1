#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "hikfs/training.hpp"
#include "support/proto_oracle.hpp"

using namespace hikfs;

namespace {

Dataset toy_data(std::size_t coarse = 3, std::size_t fine = 2, std::size_t per_class = 12, std::uint64_t seed = 1) {
  GenSpec s;
  s.num_coarse = coarse;
  s.fine_per_coarse = fine;
  s.dim = 8;
  s.per_class = per_class;
  s.coarse_sep = 6;
  s.fine_sep = 2;
  s.noise = 0.4;
  s.seed = seed;
  return gen_synthetic(s);
}

TrainConfig supervised_config(std::size_t dim) {
  TrainConfig c;
  c.setting = Setting::supervised;
  c.encoder.input_dim = dim;
  c.encoder.hidden = {16};
  c.encoder.feature_dim = 8;
  c.pretrain_epochs = 10;
  c.pretrain_opt.lr = 0.03;
  c.finetune_epochs = 3;
  c.batch_size = 16;
  c.memory.m = 4;
  c.memory.r = 2;
  c.seed = 3;
  return c;
}

TrainConfig meta_config(std::size_t dim) {
  TrainConfig c;
  c.setting = Setting::meta;
  c.encoder.input_dim = dim;
  c.encoder.hidden = {16};
  c.encoder.feature_dim = 8;
  c.episode = {3, 2, 3};
  c.iterations = 30;
  c.seed = 5;
  return c;
}

bool bitwise_equal(const std::vector<nd::NamedTensor>& a, const std::vector<nd::NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || a[i].tensor.values() != b[i].tensor.values()) return false;
  return true;
}

std::vector<nd::NamedTensor> snapshot(const std::vector<nd::NamedTensor>& params) {
  std::vector<nd::NamedTensor> out;
  for (const auto& [name, t] : params) out.push_back({name, t.detach()});
  return out;
}

}  // namespace

TEST(Config, ValidatesMemoryHyperparameters) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.memory.r = 13;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.memory.mu = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.episode.query = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(LogLine, Format) {
  EXPECT_EQ(format_log_line({10, 0.5, 0.25, 0.001}), "iter=10 loss=0.5 acc=0.25 lr=0.001");
}

TEST(SampleTask, FullPoolIsPermutation) {
  auto ds = toy_data();
  const auto pool = ds.fine_classes();
  Rng rng(1);
  auto spec = sample_task(rng, pool, {pool.size(), 2, 2}, ds);
  auto sorted = spec.task_classes;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, pool);
  for (std::size_t j = 0; j < spec.task_classes.size(); ++j) {
    std::set<std::size_t> s(spec.support_idx[j].begin(), spec.support_idx[j].end());
    for (std::size_t q : spec.query_idx[j]) EXPECT_FALSE(s.count(q));
    for (std::size_t i : spec.support_idx[j]) EXPECT_EQ(ds.items[i].fine, spec.task_classes[j]);
    for (std::size_t i : spec.query_idx[j]) EXPECT_EQ(ds.items[i].fine, spec.task_classes[j]);
  }
}

TEST(SampleTask, TwoSampleClassUsesBoth) {
  auto ds = toy_data(1, 2, 2);
  const std::vector<std::size_t> pool{0};
  Rng rng(3);
  auto spec = sample_task(rng, pool, {1, 1, 1}, ds);
  std::set<std::size_t> used{spec.support_idx[0][0], spec.query_idx[0][0]};
  EXPECT_EQ(used, (std::set<std::size_t>{0, 1}));
}

TEST(SampleTask, ShortClassIsNamed) {
  auto ds = toy_data(1, 2, 2);
  const std::vector<std::size_t> pool{1};
  Rng rng(3);
  try {
    sample_task(rng, pool, {1, 2, 1}, ds);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(ds.hierarchy.fine_name(1)), std::string::npos);
  }
}

TEST(SampleTask, SeededDraws) {
  GenSpec s;
  s.num_coarse = 10;
  s.fine_per_coarse = 10;
  s.dim = 2;
  s.per_class = 2;
  s.seed = 1;
  auto ds = gen_synthetic(s);
  const auto pool = ds.fine_classes();
  Rng a(11), b(11), c(12);
  auto sa = sample_task(a, pool, {5, 1, 1}, ds);
  EXPECT_EQ(sa, sample_task(b, pool, {5, 1, 1}, ds));
  EXPECT_NE(sa.task_classes, sample_task(c, pool, {5, 1, 1}, ds).task_classes);
}

TEST(Guards, TrainingRefusesTestSplit) {
  auto ds = toy_data();
  auto r = mcfs_split(ds, {SplitMode::supervised, {0.8, 0.0, 0.2}, 1});
  EXPECT_THROW(pretrain_supervised(supervised_config(8), r.test), DataError);
  EXPECT_THROW(train_meta(meta_config(8), r.test), DataError);
  Dataset empty = r.train;
  empty.items.clear();
  EXPECT_THROW(pretrain_supervised(supervised_config(8), empty), DataError);
}

TEST(Pretrain, SeparableToyReachesHighAccuracyAndLossDrops) {
  GenSpec s;
  s.num_coarse = 2;
  s.fine_per_coarse = 2;
  s.dim = 8;
  s.per_class = 50;
  s.coarse_sep = 8;
  s.fine_sep = 3;
  s.noise = 0.3;
  s.seed = 2;
  auto ds = gen_synthetic(s);
  auto cfg = supervised_config(8);
  cfg.pretrain_epochs = 40;
  std::vector<LogLine> lines;
  auto params = pretrain_supervised(cfg, ds, [&](const LogLine& l) { lines.push_back(l); });
  ASSERT_EQ(lines.size(), 40u);
  EXPECT_GE(lines.back().acc, 0.99);

  auto init = ModelParams::init(Setting::supervised, cfg.encoder, 4, 2, derive_seed(cfg.seed, "init"));
  init.switches.knn = false;
  nd::NoGradGuard guard;
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto f = encode(init, ds.batch(all));
  const auto y = ds.fine_labels(all);
  std::vector<std::size_t> z;
  for (std::size_t v : y) z.push_back(ds.hierarchy.coarse_of(v));
  const double init_loss = nd::nll(nd::log_softmax(mlp_logits(init.fine_mlp, f)), y).item() +
                           nd::nll(nd::log_softmax(mlp_logits(init.coarse_mlp, f)), z).item();
  EXPECT_LT(lines.front().loss, init_loss);
}

TEST(Pretrain, Deterministic) {
  auto ds = toy_data();
  auto cfg = supervised_config(8);
  cfg.pretrain_epochs = 2;
  EXPECT_TRUE(bitwise_equal(pretrain_supervised(cfg, ds).named_parameters(), pretrain_supervised(cfg, ds).named_parameters()));
}

TEST(Finetune, FrozenParametersAreBitwiseUnchanged) {
  auto ds = toy_data();
  auto cfg = supervised_config(8);
  auto pre = pretrain_supervised(cfg, ds);
  auto frozen = pre.encoder_parameters();
  for (auto g : {pre.coarse_mlp_parameters(), pre.fine_mlp_parameters()}) frozen.insert(frozen.end(), g.begin(), g.end());
  const auto before = snapshot(frozen);
  const auto attn_before = snapshot(pre.attention_parameters());
  auto bank = seed_supervised_memory(cfg, pre, ds);
  auto tuned = finetune_supervised(cfg, pre, bank, ds);
  auto after = tuned.params.encoder_parameters();
  for (auto g : {tuned.params.coarse_mlp_parameters(), tuned.params.fine_mlp_parameters()})
    after.insert(after.end(), g.begin(), g.end());
  EXPECT_TRUE(bitwise_equal(before, after));
  EXPECT_FALSE(bitwise_equal(attn_before, tuned.params.attention_parameters()));
  EXPECT_TRUE(bitwise_equal(attn_before, pre.attention_parameters()));
}

TEST(Finetune, CacheIsEmptyAfterEveryEpoch) {
  auto ds = toy_data();
  auto cfg = supervised_config(8);
  cfg.pretrain_epochs = 1;
  auto pre = pretrain_supervised(cfg, ds);
  auto bank = seed_supervised_memory(cfg, pre, ds);
  for (std::size_t epochs : {1u, 2u, 3u}) {
    cfg.finetune_epochs = epochs;
    auto tuned = finetune_supervised(cfg, pre, bank, ds);
    EXPECT_EQ(tuned.bank.cached_total(), 0u);
    for (std::size_t j = 0; j < tuned.bank.classes(); ++j)
      for (std::size_t k = 0; k < tuned.bank.occupancy(j); ++k) EXPECT_GT(tuned.bank.utility(j, k), 0.0);
  }
}

TEST(Finetune, LeavesSeededBankUntouchedAndRejectsEmptyMemory) {
  auto ds = toy_data();
  auto cfg = supervised_config(8);
  cfg.pretrain_epochs = 1;
  auto pre = pretrain_supervised(cfg, ds);
  auto bank = seed_supervised_memory(cfg, pre, ds);
  const auto copy = bank.clone();
  finetune_supervised(cfg, pre, bank, ds);
  EXPECT_EQ(bank, copy);
  MemoryBank empty(pre.num_fine, cfg.memory.m, pre.feature_dim(), cfg.memory.metric, 1);
  EXPECT_THROW(finetune_supervised(cfg, pre, empty, ds), ConfigError);
}

TEST(EvaluateSupervised, SingleSampleAndPurity) {
  auto ds = toy_data();
  auto cfg = supervised_config(8);
  auto pre = pretrain_supervised(cfg, ds);
  auto bank = seed_supervised_memory(cfg, pre, ds);
  auto a = evaluate_supervised(pre, &bank, ds);
  auto b = evaluate_supervised(pre, &bank, ds);
  EXPECT_EQ(a.fine_acc, b.fine_acc);
  EXPECT_EQ(a.samples, ds.size());

  std::size_t correct_item = ds.size();
  {
    nd::NoGradGuard guard;
    for (std::size_t i = 0; i < ds.size() && correct_item == ds.size(); ++i) {
      const std::vector<std::size_t> idx{i};
      auto logits = forward_full(pre, ds.batch(idx), {&bank, nullptr});
      if (predict_marginal(logits, ds.hierarchy)[0] == ds.items[i].fine) correct_item = i;
    }
  }
  ASSERT_LT(correct_item, ds.size());
  Dataset one = ds;
  one.items = {ds.items[correct_item]};
  EXPECT_EQ(evaluate_supervised(pre, &bank, one).fine_acc, 1.0);
  one.items.clear();
  EXPECT_THROW(evaluate_supervised(pre, &bank, one), DataError);
}

TEST(EvaluateSupervised, PermutedLabelsAreNearChance) {
  GenSpec s;
  s.num_coarse = 4;
  s.fine_per_coarse = 2;
  s.dim = 8;
  s.per_class = 60;
  s.coarse_sep = 8;
  s.fine_sep = 3;
  s.noise = 0.3;
  s.seed = 8;
  auto ds = gen_synthetic(s);
  auto cfg = supervised_config(8);
  cfg.switches.knn = false;
  auto pre = pretrain_supervised(cfg, ds);
  EXPECT_GT(evaluate_supervised(pre, nullptr, ds).fine_acc, 0.9);
  // Labels drawn independently of the inputs.
  Dataset permuted = ds;
  Rng rng(17);
  for (auto& it : permuted.items) {
    it.fine = uniform_index(rng, 8);
    it.coarse = permuted.hierarchy.coarse_of(it.fine);
  }
  EXPECT_NEAR(evaluate_supervised(pre, nullptr, permuted).fine_acc, 0.125, 0.06);
}

TEST(Episodes, PerfectAndRandomStubs) {
  GenSpec s;
  s.num_coarse = 4;
  s.fine_per_coarse = 5;
  s.dim = 2;
  s.per_class = 20;
  s.seed = 2;
  auto ds = gen_synthetic(s);
  const EpisodeShape shape{20, 5, 15};
  auto perfect = [](const EpisodeSpec& spec) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < spec.query_idx.size(); ++j) out.insert(out.end(), spec.query_idx[j].size(), j);
    return out;
  };
  auto r = evaluate_episodes(ds, shape, 50, 1, perfect);
  EXPECT_EQ(r.mean_acc, 1.0);
  EXPECT_EQ(r.ci95, 0.0);

  auto random = [](const EpisodeSpec& spec) {
    Rng rng(spec.seed);
    std::vector<std::size_t> out;
    for (const auto& q : spec.query_idx)
      for (std::size_t i = 0; i < q.size(); ++i) out.push_back(uniform_index(rng, spec.task_classes.size()));
    return out;
  };
  auto rr = evaluate_episodes(ds, shape, 600, 4, random);
  EXPECT_LT(std::abs(rr.mean_acc - 0.05), 3 * rr.ci95);
  auto again = evaluate_episodes(ds, shape, 600, 4, random);
  EXPECT_EQ(rr.mean_acc, again.mean_acc);
  EXPECT_EQ(rr.ci95, again.ci95);
  auto parallel = evaluate_episodes(ds, shape, 600, 4, random, 4);
  EXPECT_EQ(rr.accuracies, parallel.accuracies);
  EXPECT_EQ(rr.ci95, parallel.ci95);
  EXPECT_THROW(evaluate_episodes(ds, shape, 0, 4, random), ConfigError);
}

TEST(Episodes, RestrictedConditionalSumsToOne) {
  auto ds = toy_data(3, 3, 10);
  auto cfg = meta_config(8);
  auto params = ModelParams::init(Setting::meta, cfg.encoder, 9, 3, 1);
  Rng rng(2);
  const auto pool = ds.fine_classes();
  auto spec = sample_task(rng, pool, {4, 2, 2}, ds);
  nd::NoGradGuard guard;
  auto fw = episode_forward(params, ds, spec, cfg.memory, ds.hierarchy);
  const auto& local = fw.task.local;
  EXPECT_EQ(fw.logits.fine.dim(1), 4u);
  EXPECT_EQ(fw.logits.coarse.dim(1), local.num_coarse());
  for (std::size_t i = 0; i < fw.targets.size(); ++i)
    for (std::size_t z = 0; z < local.num_coarse(); ++z) {
      auto p = conditional_fine_probs(fw.logits.fine.data().subspan(i * 4, 4), z, local);
      double s = 0;
      for (double v : p) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Episodes, Mem1EuclideanMatchesPrototypeOracle) {
  auto ds = toy_data(1, 5, 10);
  auto cfg = meta_config(8);
  cfg.hierarchy = false;
  cfg.switches.attention = false;
  cfg.memory.mode = MemoryMode::mem1;
  cfg.memory.metric = Metric::neg_euclidean;
  auto params = ModelParams::init(Setting::meta, cfg.encoder, 5, 1, 9, cfg.switches);
  Rng rng(4);
  const auto pool = ds.fine_classes();
  auto spec = sample_task(rng, pool, {5, 5, 3}, ds);
  nd::NoGradGuard guard;
  auto fw = episode_forward(params, ds, spec, cfg.memory, ds.hierarchy.collapsed());
  auto features = [&](const std::vector<std::size_t>& idx) {
    auto f = encode(params, ds.batch(idx));
    hikfs::testing::Matrix out(idx.size(), std::vector<double>(f.dim(1)));
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < f.dim(1); ++k) out[i][k] = f.at(i, k);
    return out;
  };
  std::vector<hikfs::testing::Matrix> support;
  std::vector<std::size_t> queries;
  for (std::size_t j = 0; j < 5; ++j) {
    support.push_back(features(spec.support_idx[j]));
    queries.insert(queries.end(), spec.query_idx[j].begin(), spec.query_idx[j].end());
  }
  const auto expected = hikfs::testing::prototype_log_probs(support, features(queries));
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto lp = marginal_fine_log_probs(fw.logits.fine.data().subspan(i * 5, 5), fw.logits.coarse.data().subspan(i, 1),
                                      fw.task.local);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(lp[j], expected[i][j], 1e-10);
  }
}

TEST(TrainMeta, DeterministicAndTraced) {
  auto ds = toy_data(3, 2, 10);
  auto cfg = meta_config(8);
  MetaTrace a, b;
  std::vector<LogLine> lines;
  auto pa = train_meta(cfg, ds, [&](const LogLine& l) { lines.push_back(l); }, &a, 10);
  auto pb = train_meta(cfg, ds, {}, &b);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.losses.size(), cfg.iterations);
  EXPECT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines.back().iter, 30u);
  EXPECT_TRUE(bitwise_equal(pa.named_parameters(), pb.named_parameters()));
}

TEST(TrainMeta, LearnsSeparableMixture) {
  GenSpec s;
  s.num_coarse = 4;
  s.fine_per_coarse = 4;
  s.dim = 8;
  s.per_class = 30;
  s.coarse_sep = 8;
  s.fine_sep = 3;
  s.noise = 0.3;
  s.seed = 6;
  auto ds = gen_synthetic(s);
  auto split = mcfs_split(ds, {SplitMode::meta, {0.75, 0.0, 0.25}, 2});
  auto cfg = meta_config(8);
  cfg.encoder.hidden = {32};
  cfg.encoder.feature_dim = 16;
  cfg.episode = {5, 5, 5};
  cfg.iterations = 300;
  auto params = train_meta(cfg, split.train);
  auto r = evaluate_episodes(params, split.test, {4, 5, 10}, 100, 3, cfg.memory);
  EXPECT_GT(r.mean_acc, 0.9);
}

TEST(Checkpoint, ModelRoundTrip) {
  auto cfg = meta_config(8);
  cfg.switches.mlp = false;
  cfg.memory.mode = MemoryMode::mem2;
  cfg.memory.k = 2;
  auto p = ModelParams::init(Setting::meta, cfg.encoder, 6, 3, 4, cfg.switches);
  const auto path = std::filesystem::temp_directory_path() / "hikfs_model_roundtrip.ckpt";
  save_model(path, p, cfg.memory);
  auto back = load_model(path);
  EXPECT_TRUE(bitwise_equal(back.params.named_parameters(), p.named_parameters()));
  EXPECT_EQ(back.params.setting, Setting::meta);
  EXPECT_FALSE(back.params.switches.mlp);
  EXPECT_EQ(back.memory.mode, MemoryMode::mem2);
  EXPECT_EQ(back.memory.k, 2u);
  EXPECT_EQ(back.params.encoder.hidden, cfg.encoder.hidden);
  std::filesystem::remove(path);
}
