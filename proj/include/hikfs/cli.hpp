#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hikfs/data.hpp"
#include "hikfs/error.hpp"
#include "hikfs/memory.hpp"
#include "hikfs/model.hpp"
#include "hikfs/training.hpp"

namespace hikfs::cli {

enum ExitCode : int { ok = 0, usage = 2, data_error = 3, numeric_error = 4, other_error = 1 };

/// Flat `key=value` config file turned into `--key=value` tokens. Blank
/// lines and lines starting with '#' are skipped.
inline std::vector<std::string> config_tokens(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("config: line " + std::to_string(line_no) + ": expected key=value");
    }
    out.push_back("--" + line);
  }
  return out;
}

/// Every long option of a subcommand with its effective value, one
/// `key=value` per line; multi-valued options repeat the key.
inline std::string echo_config(const CLI::App& app) {
  std::ostringstream os;
  for (const CLI::Option* opt : app.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      if (opt->get_expected_max() > 1 || opt->get_multi_option_policy() == CLI::MultiOptionPolicy::TakeAll) {
        for (const auto& r : opt->results()) os << name << '=' << r << '\n';
      } else {
        os << name << '=' << opt->results().back() << '\n';
      }
    } else if (!opt->get_default_str().empty() && opt->get_default_str() != "{}") {
      os << name << '=' << opt->get_default_str() << '\n';
    }
  }
  return os.str();
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t v = 0;
    auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc() || res.ptr != item.data() + item.size()) {
      throw ConfigError(std::string(what) + ": cannot parse '" + item + "'");
    }
    out.push_back(v);
  }
  return out;
}

inline std::array<double, 3> parse_fractions(const std::string& s) {
  std::array<double, 3> f{};
  std::stringstream ss(s);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 3) throw ConfigError("fractions: expected three comma-separated values");
    f[i++] = detail::parse_double(item, 0);
  }
  if (i != 3) throw ConfigError("fractions: expected three comma-separated values");
  return f;
}

inline Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::dot_cosine;
  if (s == "euclidean") return Metric::neg_euclidean;
  throw ConfigError("metric must be 'cosine' or 'euclidean', got '" + s + "'");
}

inline MemoryMode parse_memory_mode(const std::string& s) {
  if (s == "mem1") return MemoryMode::mem1;
  if (s == "mem2") return MemoryMode::mem2;
  if (s == "mem3") return MemoryMode::mem3;
  throw ConfigError("memory mode must be mem1, mem2 or mem3, got '" + s + "'");
}

inline std::string metric_name(Metric m) { return m == Metric::dot_cosine ? "cosine" : "euclidean"; }

inline std::string memory_mode_name(MemoryMode m) {
  return m == MemoryMode::mem1 ? "mem1" : m == MemoryMode::mem2 ? "mem2" : "mem3";
}

/// `--ablate key=value` switches: hierarchy/attention/mlp/knn take on|off,
/// memory takes mem1|mem2|mem3.
inline void apply_ablation(TrainConfig& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("ablate: expected key=value, got '" + spec + "'");
  const std::string key = spec.substr(0, eq), value = spec.substr(eq + 1);
  if (key == "memory") {
    cfg.memory.mode = parse_memory_mode(value);
    return;
  }
  if (value != "on" && value != "off") throw ConfigError("ablate: '" + key + "' takes on or off");
  const bool on = value == "on";
  if (key == "hierarchy") cfg.hierarchy = on;
  else if (key == "attention") cfg.switches.attention = on;
  else if (key == "mlp") cfg.switches.mlp = on;
  else if (key == "knn") cfg.switches.knn = on;
  else throw ConfigError("ablate: unknown switch '" + key + "'");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

inline std::string number(double v) { return detail::format_double(v); }

struct Options {
  std::uint64_t seed = 0;
  bool quiet = false;

  // gen
  std::string output;
  std::size_t coarse = 4, fine_per_coarse = 3, dim = 16, per_class = 40, jitter = 0;
  double coarse_sep = 10.0, fine_sep = 1.0, noise = 0.2;
  bool image = false;

  // split
  std::string data;
  std::string mode = "meta";
  std::string fractions = "0.6,0.2,0.2";
  std::string out_dir;

  // train
  std::string setting = "meta";
  std::string encoder = "mlp";
  std::string hidden = "64";
  std::size_t feature_dim = 16;
  std::string channels = "8,8,8,8";
  std::size_t pretrain_epochs = 30, finetune_epochs = 5, batch_size = 128;
  double lr = 0.1, finetune_lr = 0.01, meta_lr = 1e-3, momentum = 0.9, weight_decay = 1e-4;
  std::size_t iterations = 2000, halve_every = 10000, log_every = 100;
  std::size_t memory_size = 12, clusters = 3, topk = 1;
  double gamma = 0.95, mu = 1.05, eta = 0.95;
  std::string metric = "cosine";
  std::string memory_mode = "mem3";
  std::size_t way = 5, shot = 5, query = 15;
  std::vector<std::string> ablate;

  // eval / export
  std::string model;
  std::string memory;
  std::size_t episodes = 600, workers = 1, samples = 0;
  std::string eval_metric = "checkpoint", eval_memory_mode = "checkpoint", eval_topk = "checkpoint";
};

inline TrainConfig train_config(const Options& o, const Dataset& ds) {
  TrainConfig cfg;
  if (o.setting == "meta") cfg.setting = Setting::meta;
  else if (o.setting == "supervised") cfg.setting = Setting::supervised;
  else throw ConfigError("setting must be 'meta' or 'supervised'");
  if (o.encoder == "mlp") {
    cfg.encoder.kind = EncoderKind::mlp;
  } else if (o.encoder == "conv4") {
    if (!ds.image) throw ConfigError("the conv4 encoder needs an image dataset");
    cfg.encoder.kind = EncoderKind::conv4;
  } else {
    throw ConfigError("encoder must be 'mlp' or 'conv4'");
  }
  cfg.encoder.input_dim = ds.dim;
  cfg.encoder.hidden = o.hidden.empty() ? std::vector<std::size_t>{} : parse_size_list(o.hidden, "hidden");
  cfg.encoder.feature_dim = o.feature_dim;
  cfg.encoder.channels = parse_size_list(o.channels, "channels");
  cfg.pretrain_epochs = o.pretrain_epochs;
  cfg.finetune_epochs = o.finetune_epochs;
  cfg.batch_size = o.batch_size;
  for (auto* opt : {&cfg.pretrain_opt, &cfg.finetune_opt, &cfg.meta_opt}) {
    opt->momentum = o.momentum;
    opt->weight_decay = o.weight_decay;
  }
  cfg.pretrain_opt.lr = o.lr;
  cfg.finetune_opt.lr = o.finetune_lr;
  cfg.meta_opt.lr = o.meta_lr;
  cfg.iterations = o.iterations;
  cfg.halve_every = o.halve_every;
  cfg.memory = {o.memory_size, o.clusters, o.gamma, o.mu, o.eta, o.topk, parse_metric(o.metric),
                parse_memory_mode(o.memory_mode)};
  cfg.episode = {o.way, o.shot, o.query};
  cfg.seed = o.seed;
  for (const auto& a : o.ablate) apply_ablation(cfg, a);
  cfg.validate();
  return cfg;
}

inline std::string record_line(const nlohmann::ordered_json& j) { return j.dump(); }

inline void cmd_gen(const Options& o, std::ostream& out) {
  GenSpec spec;
  spec.num_coarse = o.coarse;
  spec.fine_per_coarse = o.fine_per_coarse;
  spec.dim = o.dim;
  spec.per_class = o.per_class;
  spec.coarse_sep = o.coarse_sep;
  spec.fine_sep = o.fine_sep;
  spec.noise = o.noise;
  spec.jitter = o.jitter;
  spec.image = o.image;
  spec.seed = o.seed;
  const auto ds = gen_synthetic(spec);
  const std::filesystem::path path(o.output);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_dataset(ds, path);
  if (!o.quiet) out << "wrote " << ds.size() << " items to " << path.string() << '\n';
}

inline void cmd_split(const Options& o, std::ostream& out) {
  const std::filesystem::path src(o.data);
  const auto ds = load_dataset(src);
  SplitSpec spec;
  if (o.mode == "meta") spec.mode = SplitMode::meta;
  else if (o.mode == "supervised") spec.mode = SplitMode::supervised;
  else throw ConfigError("split mode must be 'meta' or 'supervised'");
  spec.fractions = parse_fractions(o.fractions);
  spec.seed = o.seed;
  const auto result = mcfs_split(ds, spec);
  const std::filesystem::path dir = o.out_dir.empty() ? src.parent_path() : std::filesystem::path(o.out_dir);
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::string stem = src.stem().string();
  const std::pair<const Dataset*, const char*> parts[] = {{&result.train, "train"}, {&result.val, "val"}, {&result.test, "test"}};
  for (const auto& [part, name] : parts) {
    const auto path = dir / (stem + "." + name + ".txt");
    if (part->empty()) {
      std::filesystem::remove(path);
      if (!o.quiet) out << name << ": no items, file not written\n";
      continue;
    }
    save_dataset(*part, path);
    if (!o.quiet) out << name << ": " << part->size() << " items, " << part->fine_classes().size() << " fine classes -> " << path.string() << '\n';
  }
  write_text(dir / (stem + ".manifest.txt"), result.manifest);
}

inline void cmd_train(const Options& o, const std::string& echo, std::ostream& out) {
  const auto ds = load_dataset(o.data);
  require_trainable(ds, "train");
  const TrainConfig cfg = train_config(o, ds);
  const std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  const auto h = effective_hierarchy(cfg, ds.hierarchy);
  write_text(dir / "config.txt", echo + "# effective num_fine=" + std::to_string(h.num_fine()) +
                                     " num_coarse=" + std::to_string(h.num_coarse()) + "\n");

  std::ofstream log_file(dir / "train.log", std::ios::binary);
  LogLine last;
  const LogFn log = [&](const LogLine& l) {
    last = l;
    const auto line = format_log_line(l);
    log_file << line << '\n';
    if (!o.quiet) out << line << '\n';
  };

  if (cfg.setting == Setting::supervised) {
    auto pretrained = pretrain_supervised(cfg, ds, log);
    auto bank = seed_supervised_memory(cfg, pretrained, ds);
    auto tuned = finetune_supervised(cfg, pretrained, bank, ds, log);
    save_model(dir / "model.ckpt", tuned.params, cfg.memory);
    nd::save_tensors(dir / "memory.ckpt", memory_to_tensors(tuned.bank));
  } else {
    auto params = train_meta(cfg, ds, log, nullptr, o.log_every);
    save_model(dir / "model.ckpt", params, cfg.memory);
  }
  nlohmann::ordered_json rec;
  rec["setting"] = o.setting;
  rec["iter"] = last.iter;
  rec["loss"] = last.loss;
  rec["acc"] = last.acc;
  rec["seed"] = o.seed;
  const auto line = record_line(rec);
  write_text(dir / "result.json", line + "\n");
  out << line << '\n';
}

inline void cmd_eval(const Options& o, const std::string& echo, std::ostream& out) {
  const auto saved = load_model(o.model);
  const auto ds = load_dataset(o.data);
  nlohmann::ordered_json rec;
  std::vector<std::pair<std::string, std::string>> table;
  if (saved.params.setting == Setting::meta) {
    MemoryConfig mc = saved.memory;
    if (o.eval_metric != "checkpoint") mc.metric = parse_metric(o.eval_metric);
    if (o.eval_memory_mode != "checkpoint") mc.mode = parse_memory_mode(o.eval_memory_mode);
    if (o.eval_topk != "checkpoint") {
      mc.k = parse_size_list(o.eval_topk, "topk").at(0);
      if (mc.k == 0) throw ConfigError("topk must be at least 1");
    }
    const EpisodeShape shape{o.way, o.shot, o.query};
    const auto r = evaluate_episodes(saved.params, ds, shape, o.episodes, o.seed, mc, o.workers);
    rec["mean_acc"] = r.mean_acc;
    rec["ci95"] = r.ci95;
    rec["episodes"] = o.episodes;
    rec["way"] = o.way;
    rec["shot"] = o.shot;
    rec["seed"] = o.seed;
    table = {{"mean accuracy", number(r.mean_acc)}, {"95% interval", "+/- " + number(r.ci95)},
             {"episodes", std::to_string(o.episodes)}, {"way / shot / query", std::to_string(o.way) + " / " +
             std::to_string(o.shot) + " / " + std::to_string(o.query)}, {"memory", memory_mode_name(mc.mode) + ", " +
             metric_name(mc.metric) + ", K=" + std::to_string(mc.k)}};
  } else {
    std::optional<MemoryBank> bank;
    if (!o.memory.empty()) bank = memory_from_tensors(nd::load_tensors(o.memory));
    const bool knn = active_heads(Setting::supervised, saved.params.switches).fine_knn;
    if (knn && !bank) throw ConfigError("eval: supervised model with a KNN head needs --memory");
    const auto m = evaluate_supervised(saved.params, knn ? &*bank : nullptr, ds);
    rec["fine_acc"] = m.fine_acc;
    rec["coarse_acc"] = m.coarse_acc;
    rec["samples"] = m.samples;
    rec["seed"] = o.seed;
    table = {{"fine accuracy", number(m.fine_acc)}, {"coarse accuracy", number(m.coarse_acc)},
             {"samples", std::to_string(m.samples)}};
  }
  const auto line = record_line(rec);
  out << line << '\n';
  if (!o.quiet) {
    for (const auto& [k, v] : table) out << std::left << std::setw(20) << k << v << '\n';
  }
  if (!o.out_dir.empty()) {
    const std::filesystem::path dir(o.out_dir);
    write_text(dir / "config.txt", echo);
    write_text(dir / "result.json", line + "\n");
  }
}

inline void cmd_export_memory(const Options& o, std::ostream& out) {
  const auto bank = memory_from_tensors(nd::load_tensors(o.memory));
  std::ostringstream csv;
  csv << "class,kind,utility";
  for (std::size_t i = 0; i < bank.dim(); ++i) csv << ",v" << i;
  csv << '\n';
  std::size_t rows = 0;
  for (std::size_t j = 0; j < bank.classes(); ++j)
    for (std::size_t k = 0; k < bank.occupancy(j); ++k, ++rows) {
      csv << j << ",mem," << number(bank.utility(j, k));
      for (double v : bank.slot(j, k)) csv << ',' << number(v);
      csv << '\n';
    }
  if (o.samples > 0) {
    if (o.model.empty() || o.data.empty()) throw ConfigError("export-memory: --samples needs --model and --data");
    const auto saved = load_model(o.model);
    const auto ds = load_dataset(o.data);
    if (saved.params.feature_dim() != bank.dim()) throw ConfigError("export-memory: model and memory dims differ");
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = make_rng(o.seed, "export");
    const std::size_t n = std::min(o.samples, ds.size());
    partial_shuffle(idx, n, rng);
    idx.resize(n);
    nd::NoGradGuard guard;
    const auto f = encode(saved.params, ds.batch(idx));
    for (std::size_t i = 0; i < n; ++i, ++rows) {
      csv << ds.items[idx[i]].fine << ",img,0";
      for (double v : f.data().subspan(i * f.dim(1), f.dim(1))) csv << ',' << number(v);
      csv << '\n';
    }
  }
  write_text(o.output, csv.str());
  if (!o.quiet) out << "wrote " << rows << " rows to " << o.output << '\n';
}

/// Runs one command. `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Coarse-to-fine hierarchical few-shot classifier", "hikfs"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", "flat key=value file; explicit flags override it");
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_flag("--quiet", o.quiet, "only print the result record");
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic hierarchical dataset");
  common(gen);
  gen->add_option("-o,--output", o.output, "dataset file to write")->required();
  gen->add_option("--coarse", o.coarse, "number of coarse classes");
  gen->add_option("--fine-per-coarse", o.fine_per_coarse, "fine classes per coarse class");
  gen->add_option("--dim", o.dim, "feature dimension");
  gen->add_option("--per-class", o.per_class, "samples per fine class");
  gen->add_option("--coarse-sep", o.coarse_sep, "radius of the coarse centers");
  gen->add_option("--fine-sep", o.fine_sep, "offset of fine centers from their coarse center");
  gen->add_option("--noise", o.noise, "sample noise standard deviation");
  gen->add_option("--jitter", o.jitter, "per-class count jitter");
  gen->add_flag("--image", o.image, "emit 28x28 grayscale rasters");

  auto* split = app.add_subcommand("split", "split a dataset into train/val/test");
  common(split);
  split->add_option("data,--data", o.data, "dataset file")->required();
  split->add_option("--mode", o.mode, "meta or supervised");
  split->add_option("--fractions", o.fractions, "train,val,test fractions");
  split->add_option("-o,--out-dir", o.out_dir, "output directory (default: next to the data)");

  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--data", o.data, "training split")->required();
  train->add_option("-o,--out-dir", o.out_dir, "run directory")->required();
  train->add_option("--setting", o.setting, "meta or supervised");
  train->add_option("--encoder", o.encoder, "mlp or conv4");
  train->add_option("--hidden", o.hidden, "comma-separated hidden widths of the mlp encoder");
  train->add_option("--feature-dim", o.feature_dim, "output width of the mlp encoder");
  train->add_option("--channels", o.channels, "conv4 channel counts");
  train->add_option("--pretrain-epochs", o.pretrain_epochs);
  train->add_option("--finetune-epochs", o.finetune_epochs);
  train->add_option("--batch-size", o.batch_size);
  train->add_option("--lr", o.lr, "supervised pretraining learning rate");
  train->add_option("--finetune-lr", o.finetune_lr);
  train->add_option("--meta-lr", o.meta_lr);
  train->add_option("--momentum", o.momentum);
  train->add_option("--weight-decay", o.weight_decay);
  train->add_option("--iterations", o.iterations, "meta-training iterations");
  train->add_option("--halve-every", o.halve_every, "meta learning-rate halving period");
  train->add_option("--log-every", o.log_every, "meta iterations per log line");
  train->add_option("--memory-size", o.memory_size, "slots per class (m)");
  train->add_option("--clusters", o.clusters, "slots replaced per refresh (r)");
  train->add_option("--gamma", o.gamma, "merge rate");
  train->add_option("--mu", o.mu, "utility growth on a correct prediction");
  train->add_option("--eta", o.eta, "utility decay on a wrong prediction");
  train->add_option("--topk", o.topk, "neighbors per class score (K)");
  train->add_option("--metric", o.metric, "cosine or euclidean");
  train->add_option("--memory-mode", o.memory_mode, "mem1, mem2 or mem3");
  train->add_option("--way", o.way);
  train->add_option("--shot", o.shot);
  train->add_option("--query", o.query);
  train->add_option("--ablate", o.ablate, "hierarchy|attention|mlp|knn=on|off, memory=mem1|mem2|mem3")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  auto* eval = app.add_subcommand("eval", "evaluate a trained model");
  common(eval);
  eval->add_option("--model", o.model, "model checkpoint")->required();
  eval->add_option("--data", o.data, "evaluation split")->required();
  eval->add_option("--memory", o.memory, "memory checkpoint (supervised models)");
  eval->add_option("--episodes", o.episodes);
  eval->add_option("--way", o.way);
  eval->add_option("--shot", o.shot);
  eval->add_option("--query", o.query);
  eval->add_option("--workers", o.workers, "parallel episode workers");
  eval->add_option("--metric", o.eval_metric, "override the checkpoint's metric");
  eval->add_option("--memory-mode", o.eval_memory_mode, "override the checkpoint's memory mode");
  eval->add_option("--topk", o.eval_topk, "override the checkpoint's K");
  eval->add_option("-o,--out-dir", o.out_dir, "directory for the config echo and result record");

  auto* exp = app.add_subcommand("export-memory", "dump memory slots (and sampled embeddings) as CSV");
  common(exp);
  exp->add_option("--memory", o.memory, "memory checkpoint")->required();
  exp->add_option("-o,--output", o.output, "CSV file")->required();
  exp->add_option("--model", o.model, "model checkpoint for sampled embeddings");
  exp->add_option("--data", o.data, "dataset for sampled embeddings");
  exp->add_option("--samples", o.samples, "number of embedded samples to add");

  for (auto* sub : {gen, split, train, eval, exp})
    for (CLI::Option* opt : sub->get_options())
      if (opt->get_multi_option_policy() != CLI::MultiOptionPolicy::TakeAll) opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  try {
    // Config-file entries go in front of the explicit arguments so the
    // latter win.
    for (std::size_t i = 1; i + 1 < args.size(); ++i) {
      if (args[i] == "--config") {
        auto tokens = config_tokens(args[i + 1]);
        args.insert(args.begin() + 1, tokens.begin(), tokens.end());
        break;
      }
      if (args[i].rfind("--config=", 0) == 0) {
        auto tokens = config_tokens(args[i].substr(9));
        args.insert(args.begin() + 1, tokens.begin(), tokens.end());
        break;
      }
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return usage;
  }

  try {
    if (gen->parsed()) cmd_gen(o, out);
    else if (split->parsed()) cmd_split(o, out);
    else if (train->parsed()) cmd_train(o, echo_config(*train), out);
    else if (eval->parsed()) cmd_eval(o, echo_config(*eval), out);
    else if (exp->parsed()) cmd_export_memory(o, out);
    return ok;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return usage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return numeric_error;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return numeric_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return other_error;
  }
}

}  // namespace hikfs::cli
