#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lorm/merge.hpp"
#include "lorm/peft.hpp"
#include "lorm/rng.hpp"
#include "lorm/train.hpp"

namespace lorm {

enum class Strategy { LoRM, LoRMOnlyB, FedAvgLoRA, FedAvgFull, RegMeanFull, LoRMNoEq9 };
enum class PeftKind { Lora, Vera, Ia3 };

/// B-like factor (LoRA B, VeRA lambda_b) or A-like factor (LoRA A, VeRA lambda_d).
enum class Factor { B, A };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::LoRM: return "LoRM";
    case Strategy::LoRMOnlyB: return "LoRM-onlyB";
    case Strategy::FedAvgLoRA: return "FedAvg-LoRA";
    case Strategy::FedAvgFull: return "FedAvg-full";
    case Strategy::RegMeanFull: return "RegMean-full";
    case Strategy::LoRMNoEq9: return "LoRM-noEq9";
  }
  return "?";
}

inline const char* to_string(PeftKind k) {
  switch (k) {
    case PeftKind::Lora: return "lora";
    case PeftKind::Vera: return "vera";
    case PeftKind::Ia3: return "ia3";
  }
  return "?";
}

inline const char* to_string(Factor f) { return f == Factor::B ? "B" : "A"; }

inline Strategy parse_strategy(const std::string& s) {
  for (auto v : {Strategy::LoRM, Strategy::LoRMOnlyB, Strategy::FedAvgLoRA, Strategy::FedAvgFull,
                 Strategy::RegMeanFull, Strategy::LoRMNoEq9})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline PeftKind parse_peft_kind(const std::string& s) {
  for (auto v : {PeftKind::Lora, PeftKind::Vera, PeftKind::Ia3})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown peft_kind '" + s + "'");
}

/// Strategies that keep one residual per task and merge them when training ends.
inline bool uses_task_residuals(Strategy s) {
  return s == Strategy::LoRM || s == Strategy::LoRMOnlyB || s == Strategy::LoRMNoEq9;
}

inline bool uses_full_layers(Strategy s) { return s == Strategy::FedAvgFull || s == Strategy::RegMeanFull; }

/// Whether clients must ship Gram statistics for this strategy.
inline bool needs_grams(Strategy s) { return uses_task_residuals(s) || s == Strategy::RegMeanFull; }

struct RoundSchedule {
  std::size_t round = 1;  // 1-based within a task
  Factor trained = Factor::B;
};

/// B on odd rounds and A on even rounds; LoRM-onlyB always trains B.
inline RoundSchedule schedule_for(Strategy s, std::size_t round) {
  if (round == 0) throw DomainError("rounds are 1-based");
  if (s == Strategy::LoRMOnlyB) return {round, Factor::B};
  return {round, round % 2 == 1 ? Factor::B : Factor::A};
}

inline Trainable trainable_for(Strategy s, PeftKind peft, Factor f) {
  if (uses_full_layers(s)) return Trainable::Dense;
  if (peft == PeftKind::Ia3) return Trainable::Ia3;
  if (s == Strategy::FedAvgLoRA) return peft == PeftKind::Lora ? Trainable::LoraBoth : Trainable::VeraBoth;
  if (peft == PeftKind::Lora) return f == Factor::B ? Trainable::LoraB : Trainable::LoraA;
  return f == Factor::B ? Trainable::VeraLambdaB : Trainable::VeraLambdaD;
}

struct FederationConfig {
  Strategy strategy = Strategy::LoRM;
  PeftKind peft = PeftKind::Lora;
  std::size_t rank = 4;
  std::size_t rounds_per_task = 3;
  SGDConfig sgd;  // seed is ignored; each client brings its own
  GramPolicy grams;
  double ridge = kDefaultRidge;
  std::uint64_t seed = 0;
};

struct Client {
  std::size_t id = 0;
  std::vector<std::size_t> examples;
  std::uint64_t seed = 0;
};

/// The trained parameters of one layer in a client message. Exactly the trained factor(s) are set.
struct LayerPayload {
  std::optional<Matrix> lora_b, lora_a, vera_lambda_b, vera_lambda_d, ia3_ell, dense;

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto* m : {&lora_b, &lora_a, &vera_lambda_b, &vera_lambda_d, &ia3_ell, &dense})
      if (m->has_value()) n += (*m)->size();
    return n;
  }
};

/// What a client sends upstream after a round. Contains no raw activations.
struct ClientUpdate {
  std::size_t client_id = 0;
  std::size_t task = 0;
  std::size_t round = 0;
  Factor factor = Factor::B;
  std::vector<LayerPayload> payload;
  std::vector<GramStat> grams;          // per adapted layer; empty when the strategy needs none
  std::optional<GramStat> classifier_gram;
  std::size_t sample_count = 0;
  Matrix head_weight;
  Matrix head_bias;
  double loss = 0.0;
};

/// Number of values needed to transmit a Gram: the diagonal alone when off-diagonals are zero.
inline std::size_t gram_value_count(const GramStat& g) { return g.diagonal_only ? g.dim() : g.dim() * g.dim(); }

struct LedgerEntry {
  std::size_t task = 0;
  std::size_t round = 0;
  Factor factor = Factor::B;
  std::size_t clients = 0;
  // Per-client upstream breakdown (identical shapes across clients).
  std::size_t factor_values = 0;
  std::size_t gram_values = 0;
  std::size_t head_values = 0;
  // Per-client downstream broadcast of the merged parameters.
  std::size_t downstream_values = 0;

  std::size_t upstream_per_client() const { return factor_values + gram_values + head_values; }
  std::size_t upstream_total() const { return clients * upstream_per_client(); }
  std::size_t downstream_total() const { return clients * downstream_values; }
};

struct CommLedger {
  std::vector<LedgerEntry> rounds;

  std::size_t cumulative_upstream() const {
    std::size_t n = 0;
    for (const auto& r : rounds) n += r.upstream_total();
    return n;
  }
  std::size_t cumulative_downstream() const {
    std::size_t n = 0;
    for (const auto& r : rounds) n += r.downstream_total();
    return n;
  }
};

struct RoundEvent {
  std::size_t task = 0;
  std::size_t round = 0;
  Factor factor = Factor::B;
  std::string trained;
  std::vector<double> client_losses;
  std::vector<double> merge_residual_norms;  // per layer: RMS distance of client factors from the merge
  LedgerEntry ledger;
};

struct TaskRecord {
  std::vector<Matrix> residuals;  // dense Delta W^t per layer
  std::vector<GramStat> grams;    // global task Gram per layer; empty when the strategy collects none
};

struct ServerState {
  FederationConfig cfg;
  MLPModel global;  // frozen backbone, current residuals, heads of finished tasks
  std::optional<Head> current_head;
  std::optional<std::size_t> current_task;
  std::size_t rounds_done = 0;
  std::vector<GramStat> last_round_grams;  // per layer, summed over clients
  std::vector<TaskRecord> tasks;
  CommLedger ledger;
  std::vector<RoundEvent> events;
};

namespace detail {

inline Residual fresh_residual(const FederationConfig& cfg, const LinearLayer& layer, std::size_t task,
                               std::size_t layer_index) {
  const std::size_t d = layer.out_dim();
  const std::size_t k = layer.in_dim();
  if (uses_full_layers(cfg.strategy)) return DenseResidual{Matrix::zeros(d, k)};
  switch (cfg.peft) {
    case PeftKind::Lora:
      return init_lora(d, k, cfg.rank, derive_seed(cfg.seed, "lora-A", task, layer_index));
    case PeftKind::Vera: {
      // Frozen VeRA factors are shared by every task; only the scaling vectors restart.
      return init_vera(d, k, cfg.rank, derive_seed(cfg.seed, "vera-frozen", 0, layer_index));
    }
    case PeftKind::Ia3:
      return init_ia3(d);
  }
  return std::monostate{};
}

inline LayerPayload extract_payload(const LinearLayer& layer, Trainable t) {
  LayerPayload p;
  if (const auto* m = std::get_if<LoRAModule>(&layer.residual)) {
    if (trains_lora_b(t)) p.lora_b = m->b;
    if (trains_lora_a(t)) p.lora_a = m->a;
  } else if (const auto* v = std::get_if<VeRAModule>(&layer.residual)) {
    if (trains_vera_b(t)) p.vera_lambda_b = v->lambda_b;
    if (trains_vera_d(t)) p.vera_lambda_d = v->lambda_d;
  } else if (const auto* i = std::get_if<IA3Module>(&layer.residual)) {
    p.ia3_ell = i->ell;
  } else if (const auto* dres = std::get_if<DenseResidual>(&layer.residual)) {
    p.dense = dres->delta;
  }
  return p;
}

inline double rms_distance(std::span<const Matrix> clients, const Matrix& merged) {
  double s = 0.0;
  for (const auto& c : clients) {
    const double n = frobenius_norm(c - merged);
    s += n * n;
  }
  return std::sqrt(s / static_cast<double>(clients.size()));
}

}  // namespace detail

/// Fresh server for a frozen backbone. Residuals are attached per strategy and adapter kind.
inline ServerState make_server(const FederationConfig& cfg, MLPModel backbone) {
  if (cfg.rounds_per_task == 0) throw ConfigError("rounds_per_task must be >= 1");
  ServerState s;
  s.cfg = cfg;
  s.global = std::move(backbone);
  s.global.heads.heads.clear();
  for (std::size_t l = 0; l < s.global.layers.size(); ++l)
    s.global.layers[l].residual = detail::fresh_residual(cfg, s.global.layers[l], 0, l);
  return s;
}

/// Opens a task: a fresh zero head for its classes.
inline ServerState begin_task(ServerState s, std::size_t task_index, int first_class, std::size_t num_classes) {
  if (s.current_task) throw ProtocolError("begin_task: task " + std::to_string(*s.current_task) + " is still open");
  if (task_index != s.tasks.size()) {
    throw ProtocolError("begin_task: expected task " + std::to_string(s.tasks.size()) + ", got " +
                        std::to_string(task_index));
  }
  const std::size_t h = s.global.feature_dim();
  s.current_head = Head{Matrix::zeros(num_classes, h), Matrix::zeros(num_classes, 1), first_class};
  s.current_task = task_index;
  s.rounds_done = 0;
  s.last_round_grams.clear();
  return s;
}

/// The model a client trains this round: the broadcast state with the open head appended.
inline MLPModel client_model(const ServerState& s) {
  if (!s.current_head) throw ProtocolError("no open task");
  MLPModel m = s.global;
  m.heads.heads.push_back(*s.current_head);
  return m;
}

/// Client side of a round: local training of the scheduled factor, then Gram collection
/// with the locally trained module.
inline ClientUpdate client_round(const ServerState& s, const Client& client, const Matrix& features,
                                 std::span<const int> labels, const RoundSchedule& schedule) {
  const Trainable trainable = trainable_for(s.cfg.strategy, s.cfg.peft, schedule.trained);
  SGDConfig sgd = s.cfg.sgd;
  sgd.seed = client.seed;
  MLPModel model = client_model(s);
  const std::size_t head_index = model.heads.size() - 1;
  LocalResult trained = local_train(std::move(model), features, labels, client.examples, head_index, trainable, sgd);

  ClientUpdate u;
  u.client_id = client.id;
  u.task = *s.current_task;
  u.round = schedule.round;
  u.factor = schedule.trained;
  u.sample_count = client.examples.size();
  u.loss = trained.final_loss();
  for (const auto& layer : trained.model.layers) u.payload.push_back(detail::extract_payload(layer, trainable));
  const Head& head = trained.model.heads.heads[head_index];
  u.head_weight = head.weight;
  u.head_bias = head.bias;
  if (needs_grams(s.cfg.strategy)) {
    ClientGrams g = collect_gram(trained.model, features, client.examples, s.cfg.grams);
    u.grams = std::move(g.layers);
    if (s.cfg.strategy == Strategy::RegMeanFull) u.classifier_gram = std::move(g.classifier);
  }
  return u;
}

/// Server side of a round: merges client updates per strategy and installs the result.
inline ServerState aggregate(ServerState s, std::span<const ClientUpdate> updates, const RoundSchedule& schedule) {
  if (updates.empty()) throw ProtocolError("aggregate: no client updates");
  const auto& cfg = s.cfg;
  const std::size_t num_layers = s.global.layers.size();
  RoundEvent ev;
  ev.task = *s.current_task;
  ev.round = schedule.round;
  ev.factor = schedule.trained;
  ev.trained = to_string(trainable_for(cfg.strategy, cfg.peft, schedule.trained));
  for (const auto& u : updates) ev.client_losses.push_back(u.loss);

  auto collect = [&](std::size_t l, auto member) {
    std::vector<Matrix> out;
    for (const auto& u : updates) {
      const auto& opt = u.payload.at(l).*member;
      if (!opt) {
        throw ProtocolError("client " + std::to_string(u.client_id) + " did not send the scheduled factor for layer " +
                            std::to_string(l));
      }
      out.push_back(*opt);
    }
    return out;
  };
  auto grams_of = [&](std::size_t l) {
    std::vector<GramStat> out;
    for (const auto& u : updates) {
      if (u.grams.size() != num_layers) throw ProtocolError("client " + std::to_string(u.client_id) + " sent no Gram");
      out.push_back(u.grams[l]);
    }
    return out;
  };
  const bool fedavg = cfg.strategy == Strategy::FedAvgLoRA || cfg.strategy == Strategy::FedAvgFull;

  LedgerEntry entry;
  entry.task = ev.task;
  entry.round = schedule.round;
  entry.factor = schedule.trained;
  entry.clients = updates.size();

  for (std::size_t l = 0; l < num_layers; ++l) {
    LinearLayer& layer = s.global.layers[l];
    double spread = 0.0;
    std::visit(
        [&](auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, LoRAModule>) {
            if (fedavg) {
              auto bs = collect(l, &LayerPayload::lora_b);
              auto as = collect(l, &LayerPayload::lora_a);
              m.b = mean_merge(bs);
              m.a = mean_merge(as);
              spread = std::hypot(detail::rms_distance(bs, m.b), detail::rms_distance(as, m.a));
            } else if (schedule.trained == Factor::B) {
              auto bs = collect(l, &LayerPayload::lora_b);
              m.b = merge_B_fixed_A(bs, m.a, grams_of(l), cfg.ridge);
              spread = detail::rms_distance(bs, m.b);
            } else {
              auto as = collect(l, &LayerPayload::lora_a);
              m.a = merge_A_fixed_B(m.b, as, grams_of(l), cfg.ridge);
              spread = detail::rms_distance(as, m.a);
            }
          } else if constexpr (std::is_same_v<T, VeRAModule>) {
            if (fedavg) {
              auto lb = collect(l, &LayerPayload::vera_lambda_b);
              auto ld = collect(l, &LayerPayload::vera_lambda_d);
              m.lambda_b = mean_merge(lb);
              m.lambda_d = mean_merge(ld);
              spread = std::hypot(detail::rms_distance(lb, m.lambda_b), detail::rms_distance(ld, m.lambda_d));
            } else if (schedule.trained == Factor::B) {
              auto lb = collect(l, &LayerPayload::vera_lambda_b);
              m.lambda_b = merge_vera_lambda_b(lb, m.lambda_d, m.a_frozen, m.b_frozen, grams_of(l), cfg.ridge);
              spread = detail::rms_distance(lb, m.lambda_b);
            } else {
              auto ld = collect(l, &LayerPayload::vera_lambda_d);
              m.lambda_d = merge_vera_lambda_d(ld, m.a_frozen, grams_of(l), cfg.ridge);
              spread = detail::rms_distance(ld, m.lambda_d);
            }
          } else if constexpr (std::is_same_v<T, IA3Module>) {
            auto ells = collect(l, &LayerPayload::ia3_ell);
            m.ell = fedavg ? mean_merge(ells) : merge_ia3(ells, layer.w0, grams_of(l), cfg.ridge);
            spread = detail::rms_distance(ells, m.ell);
          } else if constexpr (std::is_same_v<T, DenseResidual>) {
            auto ds = collect(l, &LayerPayload::dense);
            if (cfg.strategy == Strategy::RegMeanFull) {
              auto cs = detail::zip(ds, grams_of(l), "regmean-full");
              m.delta = regmean_merge(cs, cfg.ridge);
            } else {
              m.delta = mean_merge(ds);
            }
            spread = detail::rms_distance(ds, m.delta);
          } else {
            throw ProtocolError("aggregate: layer " + std::to_string(l) + " has no residual");
          }
        },
        layer.residual);
    ev.merge_residual_norms.push_back(spread);
  }

  // Heads: arithmetic mean within a task, or RegMean over classifier Grams for RegMean-full.
  std::vector<Matrix> hw, hb;
  for (const auto& u : updates) {
    hw.push_back(u.head_weight);
    hb.push_back(u.head_bias);
  }
  if (cfg.strategy == Strategy::RegMeanFull) {
    std::vector<Contributor> cs;
    for (const auto& u : updates) {
      if (!u.classifier_gram) throw ProtocolError("client " + std::to_string(u.client_id) + " sent no classifier Gram");
      cs.push_back({u.head_weight, *u.classifier_gram});
    }
    s.current_head->weight = regmean_merge(cs, cfg.ridge);
  } else {
    s.current_head->weight = mean_merge(hw);
  }
  s.current_head->bias = mean_merge(hb);

  const ClientUpdate& first = updates[0];
  for (const auto& p : first.payload) entry.factor_values += p.value_count();
  for (const auto& g : first.grams) entry.gram_values += gram_value_count(g);
  if (first.classifier_gram) entry.gram_values += gram_value_count(*first.classifier_gram);
  entry.head_values = first.head_weight.size() + first.head_bias.size();
  entry.downstream_values = entry.factor_values + entry.head_values;
  ev.ledger = entry;
  s.ledger.rounds.push_back(entry);

  if (needs_grams(cfg.strategy)) {
    s.last_round_grams.clear();
    for (std::size_t l = 0; l < num_layers; ++l) s.last_round_grams.push_back(gram_sum(grams_of(l)));
  }
  s.events.push_back(std::move(ev));
  ++s.rounds_done;
  return s;
}

/// One synchronous round with full participation. Any client failure aborts the round.
inline ServerState run_round(ServerState s, std::span<const Client> clients, const Matrix& features,
                             std::span<const int> labels, const RoundSchedule& schedule) {
  if (!s.current_task) throw ProtocolError("run_round: no open task");
  if (schedule.round != s.rounds_done + 1) {
    throw ProtocolError("run_round: schedule says round " + std::to_string(schedule.round) + " but " +
                        std::to_string(s.rounds_done) + " rounds are done");
  }
  if (schedule.trained != schedule_for(s.cfg.strategy, schedule.round).trained) {
    throw ProtocolError("run_round: schedule factor inconsistent with strategy");
  }
  if (s.rounds_done >= s.cfg.rounds_per_task) throw ProtocolError("run_round: task already has all its rounds");
  if (clients.empty()) throw ProtocolError("run_round: no clients");
  std::vector<ClientUpdate> updates;
  updates.reserve(clients.size());
  for (const auto& c : clients) {
    try {
      updates.push_back(client_round(s, c, features, labels, schedule));
    } catch (const Error& e) {
      throw ProtocolError("client " + std::to_string(c.id) + " failed: " + e.what());
    }
  }
  return aggregate(std::move(s), updates, schedule);
}

/// Closes the open task: stores Delta W^t and the task Grams, commits the head,
/// and re-initializes per-task residuals for the next task.
inline ServerState finish_task(ServerState s) {
  if (!s.current_task) throw ProtocolError("finish_task: no open task");
  if (s.rounds_done != s.cfg.rounds_per_task) {
    throw ProtocolError("finish_task: called mid-task (" + std::to_string(s.rounds_done) + " of " +
                        std::to_string(s.cfg.rounds_per_task) + " rounds done)");
  }
  TaskRecord rec;
  for (const auto& layer : s.global.layers) rec.residuals.push_back(residual_matrix(layer));
  rec.grams = s.last_round_grams;
  s.tasks.push_back(std::move(rec));
  s.global.heads.heads.push_back(std::move(*s.current_head));
  s.current_head.reset();
  const std::size_t next = *s.current_task + 1;
  s.current_task.reset();
  s.rounds_done = 0;
  if (uses_task_residuals(s.cfg.strategy)) {
    for (std::size_t l = 0; l < s.global.layers.size(); ++l)
      s.global.layers[l].residual = detail::fresh_residual(s.cfg, s.global.layers[l], next, l);
  }
  return s;
}

/// Deployable model: each layer carries its final dense residual, heads concatenated.
/// LoRM variants merge task residuals with the task Grams (or plain mean for LoRM-noEq9).
inline MLPModel finalize(const ServerState& s) {
  if (s.current_task) throw ProtocolError("finalize: task " + std::to_string(*s.current_task) + " is still open");
  if (s.tasks.empty()) throw ProtocolError("finalize: no finished tasks");
  MLPModel out = s.global;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    Matrix delta;
    if (uses_task_residuals(s.cfg.strategy)) {
      std::vector<Matrix> deltas;
      std::vector<GramStat> grams;
      for (const auto& t : s.tasks) {
        deltas.push_back(t.residuals[l]);
        if (!t.grams.empty()) grams.push_back(t.grams[l]);
      }
      delta = s.cfg.strategy == Strategy::LoRMNoEq9 ? mean_merge(deltas)
                                                    : merge_task_residuals(deltas, grams, s.cfg.ridge);
    } else {
      delta = residual_matrix(out.layers[l]);
    }
    out.layers[l].residual = DenseResidual{std::move(delta)};
  }
  return out;
}

struct RoundCost {
  std::size_t task = 0;
  std::size_t round = 0;
  std::size_t upstream = 0;
  std::size_t downstream = 0;
  std::size_t full_finetune = 0;  // d*k per layer, per client, both directions
  double ratio = 0.0;
};

struct CommReport {
  std::vector<RoundCost> rounds;
  std::size_t cumulative_upstream = 0;
  std::size_t cumulative_downstream = 0;
  std::size_t cumulative_full_finetune = 0;
  double cumulative_ratio = 0.0;
};

/// Value counts per round against a full fine-tune that ships every d*k weight both ways.
inline CommReport comm_cost(const CommLedger& ledger, std::span<const LinearLayer> layers) {
  std::size_t per_client_full = 0;
  for (const auto& l : layers) per_client_full += full_trainable_params(l.out_dim(), l.in_dim());
  CommReport r;
  for (const auto& e : ledger.rounds) {
    RoundCost c{e.task, e.round, e.upstream_total(), e.downstream_total(), 2 * e.clients * per_client_full, 0.0};
    c.ratio = c.full_finetune == 0 ? 0.0
                                   : static_cast<double>(c.upstream + c.downstream) / static_cast<double>(c.full_finetune);
    r.cumulative_upstream += c.upstream;
    r.cumulative_downstream += c.downstream;
    r.cumulative_full_finetune += c.full_finetune;
    r.rounds.push_back(c);
  }
  if (r.cumulative_full_finetune > 0) {
    r.cumulative_ratio = static_cast<double>(r.cumulative_upstream + r.cumulative_downstream) /
                         static_cast<double>(r.cumulative_full_finetune);
  }
  return r;
}

}  // namespace lorm
