#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lorm/federation.hpp"
#include "lorm/fcil.hpp"
#include "lorm/serialize.hpp"
#include "lorm/train.hpp"

namespace lorm {

inline constexpr const char* kVersion = "lorm 1.0.0";

/// Everything that determines a run. Defaults are the desk-scale reference setup.
struct ExperimentConfig {
  // data
  std::size_t classes = 20;
  std::size_t dim = 32;
  std::size_t per_class_train = 200;
  std::size_t per_class_test = 100;
  double blob_std = 0.15;
  // incremental protocol
  std::size_t tasks = 5;
  std::vector<std::size_t> classes_per_task;   // empty: even split
  std::vector<double> task_train_fraction;     // empty: keep every training example
  // federation
  std::size_t clients = 5;
  double beta = 0.5;
  std::size_t rank = 4;
  std::size_t rounds_per_task = 3;
  std::size_t epochs_per_round = 2;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double residual_learning_rate = 1.0;
  double gamma_backbone = 0.0;
  double gamma_classifier = 0.5;
  double ridge = kDefaultRidge;
  std::string strategy = "LoRM";
  std::string peft_kind = "lora";
  // backbone
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t pretrain_steps = 200;
  double pretrain_lr = 0.1;
  std::uint64_t seed = 0;
};

inline json to_json(const ExperimentConfig& c) {
  return {{"classes", c.classes},
          {"dim", c.dim},
          {"per_class_train", c.per_class_train},
          {"per_class_test", c.per_class_test},
          {"blob_std", c.blob_std},
          {"tasks", c.tasks},
          {"classes_per_task", c.classes_per_task},
          {"task_train_fraction", c.task_train_fraction},
          {"clients", c.clients},
          {"beta", c.beta},
          {"rank", c.rank},
          {"rounds_per_task", c.rounds_per_task},
          {"epochs_per_round", c.epochs_per_round},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"residual_learning_rate", c.residual_learning_rate},
          {"gamma_backbone", c.gamma_backbone},
          {"gamma_classifier", c.gamma_classifier},
          {"ridge", c.ridge},
          {"strategy", c.strategy},
          {"peft_kind", c.peft_kind},
          {"hidden", c.hidden},
          {"pretrain_steps", c.pretrain_steps},
          {"pretrain_lr", c.pretrain_lr},
          {"seed", c.seed}};
}

/// Applies the keys present in j on top of base. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const json known = to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("classes", c.classes);
    get("dim", c.dim);
    get("per_class_train", c.per_class_train);
    get("per_class_test", c.per_class_test);
    get("blob_std", c.blob_std);
    get("tasks", c.tasks);
    get("classes_per_task", c.classes_per_task);
    get("task_train_fraction", c.task_train_fraction);
    get("clients", c.clients);
    get("beta", c.beta);
    get("rank", c.rank);
    get("rounds_per_task", c.rounds_per_task);
    get("epochs_per_round", c.epochs_per_round);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("residual_learning_rate", c.residual_learning_rate);
    get("gamma_backbone", c.gamma_backbone);
    get("gamma_classifier", c.gamma_classifier);
    get("ridge", c.ridge);
    get("strategy", c.strategy);
    get("peft_kind", c.peft_kind);
    get("hidden", c.hidden);
    get("pretrain_steps", c.pretrain_steps);
    get("pretrain_lr", c.pretrain_lr);
    get("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

/// Rejects invalid configs before any work starts.
inline void validate(const ExperimentConfig& c) {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(c.dim, "dim");
  positive(c.per_class_train, "per_class_train");
  positive(c.per_class_test, "per_class_test");
  positive(c.tasks, "tasks");
  positive(c.clients, "clients");
  positive(c.rank, "rank");
  positive(c.rounds_per_task, "rounds_per_task");
  positive(c.epochs_per_round, "epochs_per_round");
  positive(c.batch_size, "batch_size");
  if (c.classes < 2) throw ConfigError("classes must be >= 2");
  if (!(c.beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(c.blob_std >= 0.0)) throw ConfigError("blob_std must be >= 0");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(c.residual_learning_rate >= 0.0)) throw ConfigError("residual_learning_rate must be >= 0");
  if (!(c.pretrain_lr >= 0.0)) throw ConfigError("pretrain_lr must be >= 0");
  for (double g : {c.gamma_backbone, c.gamma_classifier})
    if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("gamma values must lie in [0,1]");
  if (!(c.ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
  parse_strategy(c.strategy);
  parse_peft_kind(c.peft_kind);
  if (c.hidden.empty()) throw ConfigError("hidden must list at least one layer width");
  std::size_t k = c.dim;
  for (std::size_t d : c.hidden) {
    if (d < 1) throw ConfigError("hidden widths must be >= 1");
    if (c.rank > std::min(d, k)) throw ConfigError("rank exceeds min(d, k) of a hidden layer");
    k = d;
  }
  if (!c.classes_per_task.empty()) {
    if (c.classes_per_task.size() != c.tasks) throw ConfigError("classes_per_task must have one entry per task");
    std::size_t s = 0;
    for (auto v : c.classes_per_task) {
      if (v < 1) throw ConfigError("every task needs at least one class");
      s += v;
    }
    if (s != c.classes) throw ConfigError("classes_per_task must sum to classes");
  } else {
    try {
      even_class_split(c.classes, c.tasks);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  if (!c.task_train_fraction.empty()) {
    if (c.task_train_fraction.size() != c.tasks) throw ConfigError("task_train_fraction must have one entry per task");
    for (double f : c.task_train_fraction)
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("task_train_fraction entries must lie in (0,1]");
  }
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

/// Hash of the library version plus the fully resolved config.
inline std::string config_hash(const ExperimentConfig& c) {
  return hex64(fnv1a(to_json(c).dump(), fnv1a(kVersion)));
}

struct RunReport {
  ExperimentConfig config;
  std::vector<double> per_task_accuracy;
  double faa = 0.0;
  std::vector<std::vector<double>> round_losses;  // [task][round]: mean client loss
  CommReport comm;
  std::vector<RoundEvent> events;
  std::vector<std::vector<ClientPartition>> partitions;
  double wall_clock_seconds = 0.0;

  /// Everything except wall-clock time; identical configs give identical values.
  json deterministic_json() const {
    return {{"version", kVersion},
            {"config", lorm::to_json(config)},
            {"config_hash", config_hash(config)},
            {"per_task_accuracy", per_task_accuracy},
            {"faa", faa},
            {"round_losses", round_losses},
            {"comm", lorm::to_json(comm)}};
  }
  std::string hash() const { return hex64(fnv1a(deterministic_json().dump())); }
  json to_json() const {
    json j = deterministic_json();
    j["report_hash"] = hash();
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
  }
};

/// Dataset, tasks and client partitions of a config, built from independent seed streams.
struct Scenario {
  SyntheticDataset data;
  std::vector<TaskSpec> tasks;
  std::vector<std::vector<ClientPartition>> partitions;
};

inline Scenario build_scenario(const ExperimentConfig& c) {
  Scenario sc;
  sc.data = make_synthetic_dataset(c.classes, c.dim, c.per_class_train, c.per_class_test, c.blob_std,
                                   derive_seed(c.seed, "data"));
  const auto sizes = c.classes_per_task.empty() ? even_class_split(c.classes, c.tasks) : c.classes_per_task;
  sc.tasks = split_tasks(sc.data.labels, c.tasks, sizes, sc.data.train, sc.data.test);
  if (!c.task_train_fraction.empty()) {
    for (auto& task : sc.tasks) {
      const double f = c.task_train_fraction[task.index];
      std::vector<std::size_t> kept;
      for (int cls : task.classes) {
        std::vector<std::size_t> members;
        for (std::size_t i : task.train)
          if (sc.data.labels[i] == cls) members.push_back(i);
        const auto keep = static_cast<std::size_t>(std::ceil(f * static_cast<double>(members.size())));
        kept.insert(kept.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
      }
      std::sort(kept.begin(), kept.end());
      task.train = std::move(kept);
    }
  }
  for (const auto& task : sc.tasks) {
    sc.partitions.push_back(
        dirichlet_partition(task, sc.data.labels, c.clients, c.beta, derive_seed(c.seed, "partition", task.index)));
  }
  return sc;
}

inline BackboneConfig backbone_config(const ExperimentConfig& c) {
  BackboneConfig b;
  b.input_dim = c.dim;
  b.hidden = c.hidden;
  b.steps = c.pretrain_steps;
  b.learning_rate = c.pretrain_lr;
  return b;
}

inline FederationConfig federation_config(const ExperimentConfig& c) {
  FederationConfig f;
  f.strategy = parse_strategy(c.strategy);
  f.peft = parse_peft_kind(c.peft_kind);
  f.rank = c.rank;
  f.rounds_per_task = c.rounds_per_task;
  f.sgd.learning_rate = c.learning_rate;
  f.sgd.residual_learning_rate = c.residual_learning_rate;
  f.sgd.epochs_per_round = c.epochs_per_round;
  f.sgd.batch_size = c.batch_size;
  f.grams = {c.gamma_backbone, c.gamma_classifier};
  f.ridge = c.ridge;
  f.seed = c.seed;
  return f;
}

inline std::uint64_t client_sgd_seed(std::uint64_t seed, std::size_t task, std::size_t round, std::size_t client) {
  return derive_seed(seed, "sgd", task, round, client);
}

inline std::vector<double> evaluate_model(const MLPModel& model, const Scenario& sc) {
  auto scorer = [&](const Matrix& x) { return model_logits(model, x); };
  return evaluate_final(scorer, sc.data.features, sc.data.labels, sc.tasks);
}

/// Seeded end-to-end run: T tasks x rounds x clients, finalize, class-incremental evaluation.
inline RunReport run_experiment(const ExperimentConfig& config) {
  validate(config);
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.config = config;

  Scenario sc = build_scenario(config);
  ServerState server = make_server(federation_config(config),
                                   make_pretrained_backbone(backbone_config(config), derive_seed(config.seed, "backbone")));
  const Strategy strategy = server.cfg.strategy;

  for (const auto& task : sc.tasks) {
    server = begin_task(std::move(server), task.index, task.first_class(), task.num_classes());
    std::vector<double> losses;
    for (std::size_t round = 1; round <= config.rounds_per_task; ++round) {
      std::vector<Client> clients;
      for (const auto& part : sc.partitions[task.index]) {
        clients.push_back({part.client, part.examples, client_sgd_seed(config.seed, task.index, round, part.client)});
      }
      server = run_round(std::move(server), clients, sc.data.features, sc.data.labels, schedule_for(strategy, round));
      double mean = 0.0;
      for (double l : server.events.back().client_losses) mean += l;
      losses.push_back(mean / static_cast<double>(clients.size()));
    }
    report.round_losses.push_back(std::move(losses));
    server = finish_task(std::move(server));
  }

  MLPModel final_model = finalize(server);
  report.per_task_accuracy = evaluate_model(final_model, sc);
  report.faa = faa(report.per_task_accuracy);
  report.comm = comm_cost(server.ledger, server.global.layers);
  report.events = std::move(server.events);
  report.partitions = std::move(sc.partitions);
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// Single trainer over each task's pooled training data, same rounds, epochs and SGD seed
/// stream as client 0 of a federated run. Full-layer training; returns per-task accuracy.
inline std::vector<double> train_centralized(const ExperimentConfig& config) {
  validate(config);
  Scenario sc = build_scenario(config);
  MLPModel model = make_pretrained_backbone(backbone_config(config), derive_seed(config.seed, "backbone"));
  for (auto& layer : model.layers) layer.residual = DenseResidual{Matrix::zeros(layer.out_dim(), layer.in_dim())};
  SGDConfig sgd{config.learning_rate, config.epochs_per_round, config.batch_size, 0, config.residual_learning_rate};
  for (const auto& task : sc.tasks) {
    const std::size_t n = task.num_classes();
    model.heads.heads.push_back({Matrix::zeros(n, model.feature_dim()), Matrix::zeros(n, 1), task.first_class()});
    std::vector<std::size_t> pooled = task.train;
    std::sort(pooled.begin(), pooled.end());
    for (std::size_t round = 1; round <= config.rounds_per_task; ++round) {
      sgd.seed = client_sgd_seed(config.seed, task.index, round, 0);
      const std::size_t head_index = model.heads.size() - 1;
      model = local_train(std::move(model), sc.data.features, sc.data.labels, pooled, head_index, Trainable::Dense, sgd)
                  .model;
    }
  }
  return evaluate_model(model, sc);
}

// ---------------------------------------------------------------------------
// Ablation suite

inline const std::vector<std::string>& ablation_strategies() {
  static const std::vector<std::string> names = {"FedAvg-full", "FedAvg-LoRA", "RegMean-full",
                                                 "LoRM-noEq9",  "LoRM",        "LoRM-onlyB"};
  return names;
}

struct SuiteRow {
  std::string strategy;
  double mean_faa = 0.0;
  double std_faa = 0.0;
  std::vector<double> per_seed_faa;
  std::vector<double> mean_loss_curve;  // per global round, averaged over seeds
};

struct SuiteReport {
  std::vector<std::uint64_t> seeds;
  std::vector<SuiteRow> rows;

  const SuiteRow& row(const std::string& strategy) const {
    for (const auto& r : rows)
      if (r.strategy == strategy) return r;
    throw DomainError("suite has no row for " + strategy);
  }

  json to_json() const {
    json rs = json::array();
    for (const auto& r : rows) {
      rs.push_back({{"strategy", r.strategy},
                    {"mean_faa", r.mean_faa},
                    {"std_faa", r.std_faa},
                    {"per_seed_faa", r.per_seed_faa},
                    {"mean_loss_curve", r.mean_loss_curve}});
    }
    return {{"seeds", seeds}, {"rows", rs}};
  }
};

/// Runs every strategy of the ablation ladder over the seeds; mean and sample std of FAA.
inline SuiteReport run_ablation_suite(const ExperimentConfig& base, std::span<const std::uint64_t> seeds,
                                      std::span<const std::string> strategies = ablation_strategies()) {
  if (seeds.size() < 3) throw ConfigError("an ablation suite needs at least 3 seeds");
  SuiteReport out;
  out.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& name : strategies) {
    SuiteRow row;
    row.strategy = name;
    for (auto seed : seeds) {
      ExperimentConfig c = base;
      c.strategy = name;
      c.seed = seed;
      RunReport r = run_experiment(c);
      row.per_seed_faa.push_back(r.faa);
      std::vector<double> curve;
      for (const auto& task : r.round_losses) curve.insert(curve.end(), task.begin(), task.end());
      if (row.mean_loss_curve.empty()) row.mean_loss_curve.assign(curve.size(), 0.0);
      for (std::size_t i = 0; i < curve.size(); ++i) row.mean_loss_curve[i] += curve[i] / static_cast<double>(seeds.size());
    }
    const double n = static_cast<double>(row.per_seed_faa.size());
    for (double f : row.per_seed_faa) row.mean_faa += f / n;
    double var = 0.0;
    for (double f : row.per_seed_faa) var += (f - row.mean_faa) * (f - row.mean_faa);
    row.std_faa = std::sqrt(var / (n - 1.0));
    out.rows.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Offline merge

enum class MergeKind { RegMean, LoraB, LoraA, TaskResidual };

inline MergeKind parse_merge_kind(const std::string& s) {
  if (s == "regmean") return MergeKind::RegMean;
  if (s == "lora-b") return MergeKind::LoraB;
  if (s == "lora-a") return MergeKind::LoraA;
  if (s == "task") return MergeKind::TaskResidual;
  throw ConfigError("unknown merge kind '" + s + "' (expected regmean, lora-b, lora-a or task)");
}

/// One layer on disk: its weight (or LoRA factor), the shared A for B merges, and its Gram.
struct Snapshot {
  std::string name;
  Matrix weight;
  std::optional<Matrix> shared_a;
  GramStat gram;
};

inline json to_json(const Snapshot& s) {
  json j{{"format", "lorm-snapshot/1"}, {"weight", to_json(s.weight)}, {"gram", to_json(s.gram)}};
  if (s.shared_a) j["shared_a"] = to_json(*s.shared_a);
  return j;
}

inline Snapshot snapshot_from_json(const json& j, std::string name) {
  try {
    Snapshot s;
    s.name = std::move(name);
    s.weight = matrix_from_json(j.at("weight"));
    s.gram = gram_from_json(j.at("gram"));
    if (j.contains("shared_a")) s.shared_a = matrix_from_json(j.at("shared_a"));
    return s;
  } catch (const json::exception& e) {
    throw ShapeError(std::string("malformed snapshot: ") + e.what());
  }
}

struct OfflineMergeResult {
  Snapshot merged;
  json report;
};

/// Applies one closed form to a set of layer snapshots and reports the merge objective
/// at every contributor's own weight and at the merged weight.
inline OfflineMergeResult merge_offline(std::span<const Snapshot> snaps, MergeKind kind, double gamma, double ridge) {
  if (snaps.empty()) throw DomainError("merge: no input snapshots");
  const Snapshot& ref = snaps[0];
  std::vector<std::string> bad;
  for (const auto& s : snaps) {
    const bool shape_ok = s.weight.same_shape(ref.weight) && s.gram.dim() == ref.gram.dim();
    bool a_ok = true;
    if (kind == MergeKind::LoraB) {
      a_ok = s.shared_a && ref.shared_a && *s.shared_a == *ref.shared_a &&
             s.shared_a->rows() == s.weight.cols() && s.shared_a->cols() == s.gram.dim();
    } else {
      a_ok = s.weight.cols() == s.gram.dim();
    }
    if (!shape_ok || !a_ok) bad.push_back(s.name);
  }
  if (!bad.empty()) {
    std::string list;
    for (const auto& b : bad) list += (list.empty() ? "" : ", ") + b;
    throw ShapeError("merge: incompatible shapes or grams relative to " + ref.name + " in: " + list);
  }

  std::vector<Matrix> weights;
  std::vector<GramStat> grams;
  for (const auto& s : snaps) {
    weights.push_back(s.weight);
    grams.push_back(decay_off_diagonal(s.gram, gamma));
  }

  Snapshot out;
  out.name = "merged";
  std::vector<Contributor> objective;  // contributors in the space the objective is measured in
  switch (kind) {
    case MergeKind::RegMean:
    case MergeKind::TaskResidual:
      out.weight = kind == MergeKind::RegMean ? regmean_merge(detail::zip(weights, grams, "merge"), ridge)
                                              : merge_task_residuals(weights, grams, ridge);
      objective = detail::zip(weights, grams, "merge");
      break;
    case MergeKind::LoraA:
      out.weight = merge_A_fixed_B(weights, grams, ridge);
      objective = detail::zip(weights, grams, "merge");
      break;
    case MergeKind::LoraB: {
      const Matrix& a = *ref.shared_a;
      out.weight = merge_B_fixed_A(weights, a, grams, ridge);
      out.shared_a = a;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        objective.push_back({weights[i], {matmul_nt(matmul(a, grams[i].gram), a), grams[i].samples, false}});
      }
      break;
    }
  }
  out.gram = gram_sum(grams);

  json contributors = json::array();
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    contributors.push_back({{"name", snaps[i].name}, {"omega_at_own_weight", objective_omega(weights[i], objective)}});
  }
  const double merged_omega = objective_omega(out.weight, objective);
  json report{{"kind", kind == MergeKind::RegMean ? "regmean"
                       : kind == MergeKind::LoraB ? "lora-b"
                       : kind == MergeKind::LoraA ? "lora-a"
                                                  : "task"},
              {"gamma", gamma},
              {"ridge", ridge},
              {"contributors", contributors},
              {"omega_merged", merged_omega}};
  return {std::move(out), std::move(report)};
}

}  // namespace lorm
