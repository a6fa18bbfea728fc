#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "lorm/fcil.hpp"

using namespace lorm;

namespace {

std::vector<int> balanced_labels(std::size_t classes, std::size_t per_class) {
  std::vector<int> labels;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t e = 0; e < per_class; ++e) labels.push_back(static_cast<int>(c));
  return labels;
}

TaskSpec single_task(const std::vector<int>& labels, std::size_t classes) {
  std::vector<std::size_t> sizes{classes};
  return split_tasks(labels, 1, sizes).front();
}

}  // namespace

TEST(SplitTasks, OrderedEqualSplit) {
  auto labels = balanced_labels(10, 3);
  std::vector<std::size_t> sizes(5, 2);
  auto tasks = split_tasks(labels, 5, sizes);
  ASSERT_EQ(tasks.size(), 5u);
  EXPECT_EQ(tasks[0].classes, (std::vector<int>{0, 1}));
  EXPECT_EQ(tasks[4].classes, (std::vector<int>{8, 9}));
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(tasks[t].index, t);
    EXPECT_EQ(tasks[t].train.size(), 6u);
    for (auto i : tasks[t].train) EXPECT_TRUE(tasks[t].contains(labels[i]));
  }
}

TEST(SplitTasks, LastTaskCarriesRemainder) {
  auto sizes = even_class_split(196, 10);
  EXPECT_EQ(sizes, (std::vector<std::size_t>{20, 20, 20, 20, 20, 20, 20, 20, 20, 16}));
  auto labels = balanced_labels(196, 1);
  auto tasks = split_tasks(labels, 10, sizes);
  EXPECT_EQ(tasks.back().num_classes(), 16u);
  EXPECT_EQ(tasks.back().first_class(), 180);
}

TEST(SplitTasks, SingleTaskHoldsEverything) {
  auto labels = balanced_labels(7, 2);
  auto task = single_task(labels, 7);
  EXPECT_EQ(task.num_classes(), 7u);
  EXPECT_EQ(task.train.size(), labels.size());
}

TEST(SplitTasks, ClassCountMismatch) {
  auto labels = balanced_labels(10, 1);
  std::vector<std::size_t> sizes{3, 3};
  EXPECT_THROW(split_tasks(labels, 2, sizes), DomainError);
  std::vector<std::size_t> three{5, 5};
  EXPECT_THROW(split_tasks(labels, 3, three), DomainError);
  EXPECT_THROW(even_class_split(3, 5), DomainError);
}

TEST(SplitTasks, MissingClassRejected) {
  std::vector<int> labels{0, 1, 3};
  std::vector<std::size_t> sizes{4};
  EXPECT_THROW(split_tasks(labels, 1, sizes), DomainError);
}

TEST(SplitTasks, DisjointAndCovering) {
  auto labels = balanced_labels(20, 4);
  std::vector<std::size_t> sizes{3, 5, 4, 8};
  auto tasks = split_tasks(labels, 4, sizes);
  std::set<int> seen;
  std::size_t examples = 0;
  for (const auto& t : tasks) {
    for (int c : t.classes) EXPECT_TRUE(seen.insert(c).second);
    examples += t.train.size();
  }
  EXPECT_EQ(seen.size(), 20u);
  EXPECT_EQ(examples, labels.size());
}

TEST(LargestRemainder, SumsExactly) {
  std::vector<double> p{0.333, 0.333, 0.334};
  auto c = largest_remainder(p, 10);
  EXPECT_EQ(std::accumulate(c.begin(), c.end(), std::size_t{0}), 10u);
  EXPECT_EQ(c, (std::vector<std::size_t>{3, 3, 4}));
  std::vector<double> halves{0.5, 0.5};
  EXPECT_EQ(largest_remainder(halves, 3), (std::vector<std::size_t>{2, 1}));  // tie to lowest index
}

TEST(DirichletProportions, SumToOne) {
  Rng rng(1);
  for (double beta : {0.01, 0.5, 1.0, 100.0}) {
    for (int trial = 0; trial < 20; ++trial) {
      auto p = dirichlet_proportions(7, beta, rng);
      EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
      for (double v : p) EXPECT_GE(v, 0.0);
    }
  }
  EXPECT_THROW(dirichlet_proportions(3, 0.0, rng), DomainError);
}

TEST(DirichletPartition, SingleClientGetsEverything) {
  auto labels = balanced_labels(4, 10);
  auto task = single_task(labels, 4);
  auto parts = dirichlet_partition(task, labels, 1, 0.5, 3);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts[0].examples, task.train);
}

TEST(DirichletPartition, CompleteAndDisjoint) {
  auto labels = balanced_labels(6, 50);
  auto task = single_task(labels, 6);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (double beta : {0.05, 0.5, 5.0}) {
      auto parts = dirichlet_partition(task, labels, 5, beta, seed);
      std::vector<std::size_t> all;
      for (const auto& p : parts) {
        EXPECT_FALSE(p.examples.empty());
        all.insert(all.end(), p.examples.begin(), p.examples.end());
      }
      std::sort(all.begin(), all.end());
      EXPECT_EQ(all, task.train) << "seed " << seed << " beta " << beta;
    }
  }
}

TEST(DirichletPartition, DeterministicGivenSeed) {
  auto labels = balanced_labels(5, 30);
  auto task = single_task(labels, 5);
  auto a = dirichlet_partition(task, labels, 4, 0.5, 12);
  auto b = dirichlet_partition(task, labels, 4, 0.5, 12);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].examples, b[i].examples);
}

TEST(DirichletPartition, LargeBetaIsNearUniform) {
  const std::size_t n = 4;
  auto labels = balanced_labels(2, 1000);
  auto task = single_task(labels, 2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto parts = dirichlet_partition(task, labels, n, 1e6, seed);
    for (const auto& p : parts) {
      for (int cls = 0; cls < 2; ++cls) {
        const auto count = std::count_if(p.examples.begin(), p.examples.end(), [&](auto i) { return labels[i] == cls; });
        EXPECT_NEAR(static_cast<double>(count), 1000.0 / n, 0.05 * 1000.0 / n);
      }
    }
  }
}

TEST(DirichletPartition, SmallBetaConcentrates) {
  auto labels = balanced_labels(10, 100);
  auto task = single_task(labels, 10);
  int concentrated_seeds = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto parts = dirichlet_partition(task, labels, 10, 0.05, seed);
    bool any = false;
    for (int cls = 0; cls < 10 && !any; ++cls) {
      for (const auto& p : parts) {
        const auto count = std::count_if(p.examples.begin(), p.examples.end(), [&](auto i) { return labels[i] == cls; });
        if (count > 50) any = true;
      }
    }
    concentrated_seeds += any ? 1 : 0;
  }
  EXPECT_GE(concentrated_seeds, 8);
}

TEST(DirichletPartition, RepairFillsEmptyClients) {
  // Two examples, three clients: repair cannot give everyone one.
  std::vector<int> labels{0, 0};
  auto task = single_task(labels, 1);
  EXPECT_THROW(dirichlet_partition(task, labels, 3, 0.01, 0), DomainError);
  // Enough examples: every client ends up non-empty even at tiny beta.
  auto many = balanced_labels(1, 20);
  auto t2 = single_task(many, 1);
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    for (const auto& p : dirichlet_partition(t2, many, 5, 0.01, seed)) EXPECT_FALSE(p.examples.empty());
}

TEST(DirichletPartition, ArgumentErrors) {
  auto labels = balanced_labels(2, 5);
  auto task = single_task(labels, 2);
  EXPECT_THROW(dirichlet_partition(task, labels, 0, 0.5, 0), DomainError);
  EXPECT_THROW(dirichlet_partition(task, labels, 2, -1.0, 0), DomainError);
}

TEST(Faa, Examples) {
  std::vector<double> a{1.0, 1.0}, b{0.5, 1.0}, c{0.9, 0.8, 0.7};
  EXPECT_DOUBLE_EQ(faa(a), 1.0);
  EXPECT_DOUBLE_EQ(faa(b), 0.75);
  EXPECT_NEAR(faa(c), 0.8, 1e-15);
  EXPECT_THROW(faa(std::span<const double>{}), DomainError);
  std::vector<double> bad{1.2};
  EXPECT_THROW(faa(bad), DomainError);
}

TEST(Faa, PermutationInvariantAndBounded) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> acc(1 + trial % 9);
    for (auto& v : acc) v = rng.uniform(0.0, 1.0);
    const double base = faa(acc);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);
    std::sort(acc.begin(), acc.end());
    EXPECT_NEAR(faa(acc), base, 1e-15);
  }
}

namespace {

struct EvalFixture {
  std::vector<int> labels;
  Matrix features;
  std::vector<TaskSpec> tasks;

  EvalFixture() {
    labels = balanced_labels(10, 5);
    features = Matrix(1, labels.size());
    for (std::size_t j = 0; j < labels.size(); ++j) features(0, j) = labels[j];
    std::vector<std::size_t> sizes(5, 2);
    std::vector<std::size_t> all(labels.size());
    std::iota(all.begin(), all.end(), 0);
    tasks = split_tasks(labels, 5, sizes, {}, all);
  }
};

}  // namespace

TEST(EvaluateFinal, OneHotScorerIsPerfect) {
  EvalFixture f;
  auto oracle = [](const Matrix& x) {
    Matrix s(10, x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) s(static_cast<std::size_t>(x(0, j)), j) = 1.0;
    return s;
  };
  auto acc = evaluate_final(oracle, f.features, f.labels, f.tasks);
  for (double a : acc) EXPECT_EQ(a, 1.0);
  EXPECT_EQ(faa(acc), 1.0);
}

TEST(EvaluateFinal, ConstantScorerIsChance) {
  // Single task over all ten classes: ties go to class 0, so accuracy is 1/10.
  EvalFixture f;
  std::vector<std::size_t> all(f.labels.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> sizes{10};
  auto tasks = split_tasks(f.labels, 1, sizes, {}, all);
  auto constant = [](const Matrix& x) { return Matrix(10, x.cols(), 0.25); };
  auto acc = evaluate_final(constant, f.features, f.labels, tasks);
  EXPECT_DOUBLE_EQ(acc[0], 0.1);
}

TEST(EvaluateFinal, ArgmaxSpansEveryTask) {
  // A scorer that always prefers class 9 gets every other task wrong: no task oracle.
  EvalFixture f;
  auto biased = [](const Matrix& x) {
    Matrix s(10, x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
      s(static_cast<std::size_t>(x(0, j)), j) = 1.0;
      s(9, j) = 2.0;
    }
    return s;
  };
  auto acc = evaluate_final(biased, f.features, f.labels, f.tasks);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(acc[t], 0.0);
  EXPECT_EQ(acc[4], 0.5);
}

TEST(EvaluateFinal, MissingHead) {
  EvalFixture f;
  auto short_scorer = [](const Matrix& x) { return Matrix(6, x.cols()); };
  EXPECT_THROW(evaluate_final(short_scorer, f.features, f.labels, f.tasks), DomainError);
}
