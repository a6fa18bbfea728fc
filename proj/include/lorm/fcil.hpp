#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lorm/linalg.hpp"
#include "lorm/rng.hpp"

namespace lorm {

/// One class-incremental task. Indices are 0-based; classes are ascending and contiguous.
struct TaskSpec {
  std::size_t index = 0;
  std::vector<int> classes;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  int first_class() const { return classes.front(); }
  std::size_t num_classes() const { return classes.size(); }
  bool contains(int label) const {
    return !classes.empty() && label >= classes.front() && label <= classes.back();
  }
};

struct ClientPartition {
  std::size_t task = 0;
  std::size_t client = 0;
  std::vector<std::size_t> examples;
};

/// Equal shares of ceil(C / T) classes with the remainder in the last task,
/// e.g. 196 classes over 10 tasks gives nine tasks of 20 and a last task of 16.
inline std::vector<std::size_t> even_class_split(std::size_t classes, std::size_t tasks) {
  if (tasks == 0 || classes < tasks) {
    throw DomainError("even_class_split: cannot split " + std::to_string(classes) + " classes into " +
                      std::to_string(tasks) + " tasks");
  }
  const std::size_t share = (classes + tasks - 1) / tasks;
  if (share * (tasks - 1) >= classes) {
    throw DomainError("even_class_split: " + std::to_string(classes) + " classes leave the last of " +
                      std::to_string(tasks) + " tasks empty");
  }
  std::vector<std::size_t> sizes(tasks, share);
  sizes.back() = classes - share * (tasks - 1);
  return sizes;
}

/// Assigns classes to tasks in ascending class-id order. Labels must cover 0..C-1.
inline std::vector<TaskSpec> split_tasks(std::span<const int> labels, std::size_t num_tasks,
                                         std::span<const std::size_t> classes_per_task,
                                         std::span<const std::size_t> train_indices,
                                         std::span<const std::size_t> test_indices) {
  if (classes_per_task.size() != num_tasks) {
    throw DomainError("split_tasks: " + std::to_string(classes_per_task.size()) +
                      " class counts given for " + std::to_string(num_tasks) + " tasks");
  }
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw DomainError("split_tasks: negative label");
    max_label = std::max(max_label, l);
  }
  const auto total = static_cast<std::size_t>(max_label + 1);
  std::vector<bool> seen(total, false);
  for (int l : labels) seen[static_cast<std::size_t>(l)] = true;
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw DomainError("split_tasks: labels do not cover a contiguous range of class ids");
  }
  const std::size_t requested = std::accumulate(classes_per_task.begin(), classes_per_task.end(), std::size_t{0});
  if (requested != total) {
    throw DomainError("split_tasks: class counts sum to " + std::to_string(requested) + " but dataset has " +
                      std::to_string(total) + " classes");
  }

  std::vector<std::size_t> task_of(total);
  std::vector<TaskSpec> tasks(num_tasks);
  int next = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    if (classes_per_task[t] == 0) throw DomainError("split_tasks: task " + std::to_string(t) + " has no classes");
    tasks[t].index = t;
    for (std::size_t c = 0; c < classes_per_task[t]; ++c, ++next) {
      tasks[t].classes.push_back(next);
      task_of[static_cast<std::size_t>(next)] = t;
    }
  }
  for (std::size_t i : train_indices) tasks[task_of[static_cast<std::size_t>(labels[i])]].train.push_back(i);
  for (std::size_t i : test_indices) tasks[task_of[static_cast<std::size_t>(labels[i])]].test.push_back(i);
  return tasks;
}

/// Treats every example as training data.
inline std::vector<TaskSpec> split_tasks(std::span<const int> labels, std::size_t num_tasks,
                                         std::span<const std::size_t> classes_per_task) {
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return split_tasks(labels, num_tasks, classes_per_task, all, {});
}

/// p ~ Dir(beta * 1_n) via normalized Gamma(beta) draws.
inline std::vector<double> dirichlet_proportions(std::size_t n, double beta, Rng& rng) {
  if (!(beta > 0.0)) throw DomainError("dirichlet: beta must be positive");
  std::vector<double> g(n);
  double sum = 0.0;
  for (auto& v : g) {
    v = rng.gamma(beta);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // Every draw underflowed (tiny beta): the limit is a point mass on one client.
    std::fill(g.begin(), g.end(), 0.0);
    g[static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(n))) % n] = 1.0;
    return g;
  }
  for (auto& v : g) v /= sum;
  return g;
}

/// Integer counts summing to total; floors first, then one extra unit per largest
/// fractional remainder (ties to the lowest index).
inline std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> frac(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(q));
    frac[i] = q - std::floor(q);
    assigned += counts[i];
  }
  // Guard against accumulated rounding pushing the floors over the total.
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % n, ++assigned) ++counts[order[i]];
  return counts;
}

/// Splits a task's training examples over n clients with per-class Dir(beta) proportions.
/// Clients left empty receive one example from the most loaded client.
inline std::vector<ClientPartition> dirichlet_partition(const TaskSpec& task, std::span<const int> labels,
                                                        std::size_t num_clients, double beta,
                                                        std::uint64_t seed) {
  if (num_clients == 0) throw DomainError("dirichlet_partition: need at least one client");
  if (!(beta > 0.0)) throw DomainError("dirichlet_partition: beta must be positive");
  Rng rng(seed);
  std::vector<ClientPartition> parts(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) parts[i] = {task.index, i, {}};

  for (int cls : task.classes) {
    std::vector<std::size_t> members;
    for (std::size_t idx : task.train)
      if (labels[idx] == cls) members.push_back(idx);
    rng.shuffle(members);
    const auto p = dirichlet_proportions(num_clients, beta, rng);
    const auto counts = largest_remainder(p, members.size());
    std::size_t off = 0;
    for (std::size_t i = 0; i < num_clients; ++i) {
      parts[i].examples.insert(parts[i].examples.end(), members.begin() + static_cast<std::ptrdiff_t>(off),
                               members.begin() + static_cast<std::ptrdiff_t>(off + counts[i]));
      off += counts[i];
    }
  }

  for (auto& part : parts) {
    if (!part.examples.empty()) continue;
    auto donor = std::max_element(parts.begin(), parts.end(), [](const auto& a, const auto& b) {
      return a.examples.size() < b.examples.size();
    });
    if (donor->examples.size() < 2) {
      throw DomainError("dirichlet_partition: task " + std::to_string(task.index) + " has too few examples (" +
                        std::to_string(task.train.size()) + ") to give each of " + std::to_string(num_clients) +
                        " clients one");
    }
    part.examples.push_back(donor->examples.back());
    donor->examples.pop_back();
  }
  for (auto& part : parts) std::sort(part.examples.begin(), part.examples.end());
  return parts;
}

/// Final average accuracy: mean of per-task accuracies.
inline double faa(std::span<const double> per_task_accuracy) {
  if (per_task_accuracy.empty()) throw DomainError("faa: no tasks");
  double s = 0.0;
  for (double a : per_task_accuracy) {
    if (!(a >= 0.0 && a <= 1.0)) throw DomainError("faa: accuracy outside [0,1]");
    s += a;
  }
  return s / static_cast<double>(per_task_accuracy.size());
}

/// Index of the largest entry of column j; ties go to the lowest index.
inline std::size_t argmax_column(const Matrix& scores, std::size_t j) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.rows(); ++c)
    if (scores(c, j) > scores(best, j)) best = c;
  return best;
}

/// Class-incremental evaluation: argmax over every class the scorer emits; the
/// scorer never learns which task an example came from.
/// Scorer: Matrix(features k x n) -> Matrix(classes x n).
template <typename Scorer>
std::vector<double> evaluate_final(const Scorer& scorer, const Matrix& features, std::span<const int> labels,
                                   std::span<const TaskSpec> tasks) {
  std::vector<double> acc;
  acc.reserve(tasks.size());
  for (const auto& task : tasks) {
    if (task.test.empty()) throw DomainError("evaluate_final: task " + std::to_string(task.index) + " has no test data");
    Matrix scores = scorer(gather_columns(features, task.test));
    const auto needed = static_cast<std::size_t>(task.classes.back() + 1);
    if (scores.rows() < needed) {
      throw DomainError("evaluate_final: missing head for task " + std::to_string(task.index) + " (scorer emits " +
                        std::to_string(scores.rows()) + " classes, need " + std::to_string(needed) + ")");
    }
    std::size_t correct = 0;
    for (std::size_t j = 0; j < task.test.size(); ++j)
      if (static_cast<int>(argmax_column(scores, j)) == labels[task.test[j]]) ++correct;
    acc.push_back(static_cast<double>(correct) / static_cast<double>(task.test.size()));
  }
  return acc;
}

}  // namespace lorm
