#pragma once

#include <nlohmann/json.hpp>

#include "lorm/federation.hpp"
#include "lorm/fcil.hpp"
#include "lorm/linalg.hpp"

namespace lorm {

using json = nlohmann::json;

inline json to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

inline Matrix matrix_from_json(const json& j) {
  try {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw ShapeError(std::string("malformed matrix: ") + e.what());
  }
}

/// Diagonal-only Grams serialize just their diagonal.
inline json to_json(const GramStat& g) {
  json j{{"dim", g.dim()}, {"samples", g.samples}, {"diagonal_only", g.diagonal_only}};
  if (g.diagonal_only) {
    j["diagonal"] = gram_diagonal(g);
  } else {
    j["gram"] = to_json(g.gram);
  }
  return j;
}

inline GramStat gram_from_json(const json& j) {
  try {
    GramStat g;
    g.samples = j.at("samples").get<std::size_t>();
    g.diagonal_only = j.value("diagonal_only", false);
    if (j.contains("diagonal")) {
      const auto diag = j.at("diagonal").get<std::vector<double>>();
      g.gram = Matrix::zeros(diag.size(), diag.size());
      for (std::size_t i = 0; i < diag.size(); ++i) g.gram(i, i) = diag[i];
      g.diagonal_only = true;
    } else {
      g.gram = matrix_from_json(j.at("gram"));
      if (g.gram.rows() != g.gram.cols()) throw ShapeError("gram must be square, got " + g.gram.shape());
      if (g.diagonal_only) g = decay_off_diagonal(g, 0.0);
    }
    return g;
  } catch (const json::exception& e) {
    throw ShapeError(std::string("malformed gram: ") + e.what());
  }
}

inline json to_json(const LayerPayload& p) {
  json j = json::object();
  auto put = [&](const char* name, const std::optional<Matrix>& m) {
    if (m) j[name] = to_json(*m);
  };
  put("lora_b", p.lora_b);
  put("lora_a", p.lora_a);
  put("vera_lambda_b", p.vera_lambda_b);
  put("vera_lambda_d", p.vera_lambda_d);
  put("ia3_ell", p.ia3_ell);
  put("dense", p.dense);
  return j;
}

inline json to_json(const ClientUpdate& u) {
  json layers = json::array();
  for (const auto& p : u.payload) layers.push_back(to_json(p));
  json grams = json::array();
  for (const auto& g : u.grams) grams.push_back(to_json(g));
  json j{{"client_id", u.client_id},
         {"task", u.task},
         {"round", u.round},
         {"factor", to_string(u.factor)},
         {"payload", layers},
         {"grams", grams},
         {"sample_count", u.sample_count},
         {"head_weight", to_json(u.head_weight)},
         {"head_bias", to_json(u.head_bias)},
         {"loss", u.loss}};
  if (u.classifier_gram) j["classifier_gram"] = to_json(*u.classifier_gram);
  return j;
}

/// Scans a serialized update for any matrix shaped (layer input dim x sample count),
/// the shape raw activations would have. Returns the offending JSON paths.
inline std::vector<std::string> privacy_lint(const json& update, std::span<const std::size_t> layer_input_dims) {
  const auto samples = update.at("sample_count").get<std::size_t>();
  std::vector<std::string> hits;
  auto walk = [&](auto&& self, const json& node, const std::string& path) -> void {
    if (node.is_object()) {
      if (node.contains("rows") && node.contains("cols") && node.contains("data")) {
        const auto r = node["rows"].get<std::size_t>();
        const auto c = node["cols"].get<std::size_t>();
        for (std::size_t k : layer_input_dims)
          if ((r == k && c == samples) || (r == samples && c == k)) hits.push_back(path);
      }
      for (const auto& [key, value] : node.items()) self(self, value, path + "/" + key);
    } else if (node.is_array()) {
      for (std::size_t i = 0; i < node.size(); ++i) self(self, node[i], path + "/" + std::to_string(i));
    }
  };
  walk(walk, update, "");
  return hits;
}

inline json to_json(const LedgerEntry& e) {
  return {{"task", e.task},
          {"round", e.round},
          {"factor", to_string(e.factor)},
          {"clients", e.clients},
          {"factor_values", e.factor_values},
          {"gram_values", e.gram_values},
          {"head_values", e.head_values},
          {"upstream_per_client", e.upstream_per_client()},
          {"downstream_per_client", e.downstream_values}};
}

inline json to_json(const RoundEvent& ev) {
  return {{"task", ev.task},
          {"round", ev.round},
          {"factor", to_string(ev.factor)},
          {"trained", ev.trained},
          {"client_losses", ev.client_losses},
          {"merge_residual_norms", ev.merge_residual_norms},
          {"ledger", to_json(ev.ledger)}};
}

inline json to_json(const CommReport& r) {
  json rounds = json::array();
  for (const auto& c : r.rounds) {
    rounds.push_back({{"task", c.task},
                      {"round", c.round},
                      {"upstream", c.upstream},
                      {"downstream", c.downstream},
                      {"full_finetune", c.full_finetune},
                      {"ratio", c.ratio}});
  }
  return {{"rounds", rounds},
          {"cumulative_upstream", r.cumulative_upstream},
          {"cumulative_downstream", r.cumulative_downstream},
          {"cumulative_full_finetune", r.cumulative_full_finetune},
          {"cumulative_ratio", r.cumulative_ratio}};
}

/// task -> client -> example indices
inline json partition_manifest(const std::vector<std::vector<ClientPartition>>& per_task) {
  json tasks = json::array();
  for (const auto& parts : per_task) {
    json clients = json::array();
    for (const auto& p : parts) clients.push_back({{"client", p.client}, {"examples", p.examples}});
    tasks.push_back({{"task", parts.empty() ? 0 : parts[0].task}, {"clients", clients}});
  }
  return {{"tasks", tasks}};
}

}  // namespace lorm
