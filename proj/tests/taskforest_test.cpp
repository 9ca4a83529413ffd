#include "metadvfs/taskforest.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <functional>

#include "fixtures.hpp"

namespace metadvfs {
namespace {

using testing_support::combo;
using testing_support::tiny_protocol;

CombinationData bare(const std::string& name, AttributeMap attrs, const Dataset& data) {
  CombinationData c;
  c.key.device_id = name;
  c.key.app_id = "x";
  c.key.merged_attributes = std::move(attrs);
  c.data = data;
  return c;
}

const Dataset& small_data() {
  static const Dataset d = combo("pixel4", "tiktok", 1, 1, 60).data;
  return d;
}

/// Forest with hand-set Q values; no training involved.
TaskForest manual_forest(const std::vector<double>& qs) {
  TaskForest f;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    TaskNode n;
    n.id = static_cast<int>(i);
    n.members = {static_cast<int>(i)};
    n.q = qs[i];
    n.k = {{"device.chipset_vendor", "google"}, {"app.category", i % 2 ? "video" : "graphics"}};
    f.nodes.push_back(n);
    f.roots.push_back(static_cast<int>(i));
  }
  return f;
}

// ---------------------------------------------------------------------------

TEST(InitForest, OneRootPerDatasetSortedByQ) {
  std::vector<CombinationData> in{combo("pixel4", "tiktok", 1, 1, 60), combo("pixel4", "3dmark", 1, 2, 60),
                                  combo("pixel6", "taobao", 1, 3, 60)};
  QEvaluator eval(in, tiny_protocol(1));
  const TaskForest f = init_forest(eval, {});
  ASSERT_EQ(f.roots.size(), 3u);
  for (std::size_t i = 1; i < f.roots.size(); ++i) EXPECT_LE(f.node(f.roots[i - 1]).q, f.node(f.roots[i]).q);
  for (int r : f.roots) {
    EXPECT_EQ(f.node(r).k, in[static_cast<std::size_t>(r)].key.merged_attributes);
    EXPECT_EQ(f.node(r).q, eval.evaluate({r}).q);
    EXPECT_FALSE(f.node(r).processed);
  }
  EXPECT_EQ(eval.evaluations(), 3u);
}

TEST(BuildForest, SingleDatasetTerminatesImmediately) {
  QEvaluator eval({bare("a", {{"device.chipset_vendor", "google"}}, small_data())}, tiny_protocol(2));
  std::vector<MergeTraceEntry> trace;
  const TaskForest f = build_forest(eval, {}, &trace);
  EXPECT_EQ(f.roots.size(), 1u);
  ASSERT_EQ(trace.size(), 1u);
  EXPECT_EQ(trace[0].candidate, -1);
  EXPECT_FALSE(trace[0].accepted);
}

TEST(BuildForest, DisjointAttributesNeverMerge) {
  QEvaluator eval({bare("a", {{"device.chipset_vendor", "google"}}, small_data()),
                   bare("b", {{"device.chipset_vendor", "qualcomm"}}, small_data())},
                  tiny_protocol(3));
  ForestConfig cfg;
  cfg.tau_cap = 10;
  std::vector<MergeTraceEntry> trace;
  const TaskForest f = build_forest(eval, cfg, &trace);
  EXPECT_EQ(f.roots.size(), 2u);
  for (const auto& e : trace) EXPECT_EQ(e.candidate, -1);
  EXPECT_EQ(eval.evaluations(), 2u);
}

TEST(FindCandidates, VendorOverlapFromPixelCatalog) {
  // pixel6+3dmark shares only chipset_vendor=google with pixel8+kwai and
  // nothing with pixel4+tiktok.
  std::vector<CombinationData> in;
  for (auto [dev, app] : std::vector<std::pair<std::string, std::string>>{
           {"pixel6", "3dmark"}, {"pixel8", "kwai"}, {"pixel4", "tiktok"}}) {
    const auto key = make_combination(testing_support::pixel_record(dev), testing_support::pixel_record(app));
    in.push_back({key, small_data()});
  }
  const auto overlap = shared_attributes(in[0].key.merged_attributes, in[1].key.merged_attributes,
                                         default_match_keys());
  ASSERT_EQ(overlap, (AttributeMap{{"device.chipset_vendor", "google"}}));
  ASSERT_TRUE(shared_attributes(in[0].key.merged_attributes, in[2].key.merged_attributes,
                                default_match_keys()).empty());
  QEvaluator eval(in, tiny_protocol(4));
  TaskForest f;
  for (int i = 0; i < 3; ++i) {
    TaskNode n;
    n.id = i;
    n.members = {i};
    n.k = in[static_cast<std::size_t>(i)].key.merged_attributes;
    f.nodes.push_back(n);
    f.roots.push_back(i);
  }
  f.config.tau_cap = 5;
  EXPECT_EQ(find_candidates(f, eval, 0), std::vector<int>{1});
  f.config.tau_cap = 1;
  EXPECT_TRUE(find_candidates(f, eval, 0).empty());
}

TEST(FindCandidates, AllRootsWhenEverythingShared) {
  std::vector<CombinationData> in;
  for (int i = 0; i < 4; ++i)
    in.push_back(bare("d" + std::to_string(i), {{"device.chipset_vendor", "google"}}, small_data()));
  QEvaluator eval(in, tiny_protocol(5));
  TaskForest f = manual_forest({0.1, 0.2, 0.3, 0.4});
  f.config.tau_cap = 100;
  EXPECT_EQ(find_candidates(f, eval, 2), (std::vector<int>{0, 1, 3}));
}

TEST(FindCandidates, ShapeMismatchExcluded) {
  // pixel3 has two clusters, pixel4 three
  std::vector<CombinationData> in{combo("pixel3", "tiktok", 1, 1, 40), combo("pixel4", "tiktok", 1, 1, 40)};
  QEvaluator eval(in, tiny_protocol(6));
  TaskForest f;
  for (int i = 0; i < 2; ++i) {
    TaskNode n;
    n.id = i;
    n.members = {i};
    n.k = in[static_cast<std::size_t>(i)].key.merged_attributes;
    f.nodes.push_back(n);
    f.roots.push_back(i);
  }
  EXPECT_TRUE(find_candidates(f, eval, 0).empty());
}

// ---------------------------------------------------------------------------

TEST(UpdateForest, AcceptedMergeCreatesParent) {
  TaskForest f = manual_forest({1.0, 2.0, 3.0});
  MergeProposal p{1, {0, 1}, 2.5};
  const auto e = update_forest(f, 0, p);
  EXPECT_TRUE(e.accepted);
  EXPECT_DOUBLE_EQ(e.q_before, 1.5);
  ASSERT_EQ(f.roots.size(), 2u);
  const TaskNode& parent = f.node(3);
  EXPECT_EQ(parent.children, (std::vector<int>{0, 1}));
  EXPECT_EQ(parent.members, (std::vector<int>{0, 1}));
  EXPECT_EQ(parent.k, (AttributeMap{{"device.chipset_vendor", "google"}}));
  EXPECT_EQ(f.roots, (std::vector<int>{3, 2}));  // ascending by Q
}

TEST(UpdateForest, RejectedMergeMarksProcessed) {
  TaskForest f = manual_forest({1.0, 2.0, 3.0});
  const auto before = f.roots;
  const auto e = update_forest(f, 0, MergeProposal{1, {0, 1}, 1.505});  // below 1.5 * 1.01
  EXPECT_FALSE(e.accepted);
  EXPECT_GT(e.q_combined, e.q_before);
  EXPECT_EQ(f.roots, before);
  EXPECT_TRUE(f.node(0).processed);
  EXPECT_EQ(f.node(0).q, 1.0);
}

TEST(UpdateForest, NoiseGuardHandlesNegativeQ) {
  TaskForest f = manual_forest({-2.0, -1.0});
  // q_before = -1.5, threshold = -1.5 + 0.015
  EXPECT_FALSE(update_forest(f, 0, MergeProposal{1, {0, 1}, -1.49}).accepted);
  TaskForest g = manual_forest({-2.0, -1.0});
  EXPECT_TRUE(update_forest(g, 0, MergeProposal{1, {0, 1}, -1.48}).accepted);
}

TEST(UpdateForest, LiteralModesFollowPseudocode) {
  TaskForest f = manual_forest({1.0, 2.0});
  f.config.delta = 0;
  f.config.baseline = MergeBaseline::target;
  EXPECT_TRUE(update_forest(f, 0, MergeProposal{1, {0, 1}, 1.2}).accepted);

  TaskForest g = manual_forest({1.0, 2.0});
  g.config.else_branch = ElseBranch::literal;
  const auto e = update_forest(g, 0, MergeProposal{1, {0, 1}, 0.5});
  EXPECT_FALSE(e.accepted);
  EXPECT_EQ(g.node(0).q, 0.5);
  EXPECT_EQ(g.node(0).absorbed, std::vector<int>{1});
  EXPECT_EQ(g.roots.size(), 2u);
}

// ---------------------------------------------------------------------------

TEST(EvaluateMerge, DuplicateDatasetGivesEqualMemberEstimates) {
  const auto a = combo("pixel4", "tiktok", 1, 1, 200);
  CombinationData copy = a;
  copy.key.app_id = "tiktok_copy";
  QProtocol p = tiny_protocol(7);
  QEvaluator eval({a, copy}, p);
  ForestConfig cfg;
  cfg.match_keys = {"chipset_vendor"};
  const TaskForest f = init_forest(eval, cfg);
  const MergeProposal m = evaluate_merge(f, eval, 0, 1);
  EXPECT_EQ(f.roots.size(), 2u);  // not mutated
  const NodeEvaluation& both = eval.evaluate({0, 1});
  ASSERT_EQ(both.member_q.size(), 2u);
  EXPECT_NEAR(both.member_q[0], both.member_q[1], 1e-9 * (1 + std::abs(both.member_q[0])));
  EXPECT_DOUBLE_EQ(m.q_combined, both.q);
  // FQE of a fixed policy does not move when the data is duplicated
  const Dataset doubled = concat({&a.data, &a.data});
  const double single = fqe_q_value(both.network, a.data, p.train, 3, p.fqe).value;
  const double twice = fqe_q_value(both.network, doubled, p.train, 3, p.fqe).value;
  EXPECT_NEAR(single, twice, 1e-6 * (1 + std::abs(single)));
}

std::vector<std::vector<std::vector<int>>> all_partitions(int n) {
  std::vector<std::vector<std::vector<int>>> out;
  std::vector<int> label(static_cast<std::size_t>(n), 0);
  std::function<void(int, int)> rec = [&](int i, int used) {
    if (i == n) {
      std::vector<std::vector<int>> blocks(static_cast<std::size_t>(used));
      for (int k = 0; k < n; ++k) blocks[static_cast<std::size_t>(label[static_cast<std::size_t>(k)])].push_back(k);
      out.push_back(blocks);
      return;
    }
    for (int b = 0; b <= used; ++b) {
      label[static_cast<std::size_t>(i)] = b;
      rec(i + 1, std::max(used, b + 1));
    }
  };
  rec(0, 0);
  return out;
}

std::vector<std::vector<int>> canonical(std::vector<std::vector<int>> p) {
  for (auto& b : p) std::sort(b.begin(), b.end());
  std::sort(p.begin(), p.end());
  return p;
}

TEST(BuildForest, MatchesExhaustivePartitionOracle) {
  ASSERT_EQ(all_partitions(3).size(), 5u);
  ASSERT_EQ(all_partitions(4).size(), 15u);
  int agree = 0;
  const int seeds = 2;
  for (int s = 0; s < seeds; ++s) {
    const auto su = static_cast<std::uint64_t>(s);
    std::vector<CombinationData> in{combo("pixel4", "tiktok", 10 + su, 100 + su),
                                    combo("pixel4", "kwai", 20 + su, 200 + su),
                                    combo("pixel4", "3dmark", 30 + su, 300 + su)};
    QEvaluator eval(in, tiny_protocol(su));
    std::vector<MergeTraceEntry> trace;
    const TaskForest f = build_forest(eval, {}, &trace);
    double best = -1e300;
    std::vector<std::vector<int>> best_p;
    for (const auto& p : all_partitions(3)) {
      double score = 0;
      for (const auto& b : p) score += static_cast<double>(b.size()) * eval.evaluate(b).q;
      if (score > best) {
        best = score;
        best_p = p;
      }
    }
    agree += canonical(f.partition()) == canonical(best_p);
    for (const auto& e : trace)
      if (e.accepted) EXPECT_GT(e.q_combined, e.q_before);
  }
  EXPECT_GE(agree, seeds - 1);
}

TEST(BuildForest, TauOneGivesSingletons) {
  std::vector<CombinationData> in;
  for (int i = 0; i < 3; ++i)
    in.push_back(bare("d" + std::to_string(i), {{"device.chipset_vendor", "google"}}, small_data()));
  QEvaluator eval(in, tiny_protocol(8));
  ForestConfig cfg;
  cfg.tau_cap = 1;
  std::vector<MergeTraceEntry> trace;
  const TaskForest f = build_forest(eval, cfg, &trace);
  EXPECT_EQ(f.roots.size(), 3u);
  ASSERT_EQ(trace.size(), 3u);
  for (const auto& e : trace) {
    EXPECT_EQ(e.candidate, -1);
    EXPECT_FALSE(e.accepted);
  }
}

TEST(BuildForest, InvariantsAndDeterminism) {
  std::vector<CombinationData> in{combo("pixel4", "tiktok", 1, 1, 100), combo("pixel4", "kwai", 2, 2, 100),
                                  combo("pixel9", "tiktok", 3, 3, 100), combo("pixel9", "3dmark", 4, 4, 100)};
  ForestConfig cfg;
  cfg.tau_cap = 3;
  cfg.delta = 0;
  std::vector<MergeTraceEntry> t1, t2;
  QEvaluator e1(in, tiny_protocol(9));
  QEvaluator e2(in, tiny_protocol(9));
  const TaskForest f1 = build_forest(e1, cfg, &t1);
  const TaskForest f2 = build_forest(e2, cfg, &t2);
  EXPECT_EQ(dump_forest(f1, e1), dump_forest(f2, e2));
  EXPECT_EQ(dump_trace(t1), dump_trace(t2));

  // partition
  std::vector<int> seen;
  for (const auto& block : f1.partition()) seen.insert(seen.end(), block.begin(), block.end());
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3}));
  // node count bound, tau cap, attribute narrowing, parent members
  EXPECT_LE(f1.nodes.size(), 2 * in.size() - 1);
  for (const auto& n : f1.nodes) {
    EXPECT_LE(static_cast<int>(n.members.size()), cfg.tau_cap);
    if (n.children.empty()) continue;
    std::vector<int> u;
    for (int c : n.children) {
      const auto& child = f1.node(c);
      for (const auto& [k, v] : n.k) EXPECT_EQ(child.k.at(k), v);
      u.insert(u.end(), child.members.begin(), child.members.end());
    }
    std::sort(u.begin(), u.end());
    EXPECT_EQ(u, n.members);
  }
  for (const auto& e : t1)
    if (e.accepted) EXPECT_GT(e.q_combined, e.q_before);
  for (std::size_t i = 1; i < f1.roots.size(); ++i) EXPECT_LE(f1.node(f1.roots[i - 1]).q, f1.node(f1.roots[i]).q);
}

TEST(BuildForest, ParallelWorkersGiveSameForest) {
  std::vector<CombinationData> in{combo("pixel4", "tiktok", 1, 1, 80), combo("pixel4", "kwai", 2, 2, 80),
                                  combo("pixel4", "3dmark", 3, 3, 80)};
  QProtocol p = tiny_protocol(10);
  QEvaluator serial(in, p);
  p.workers = 3;
  QEvaluator parallel(in, p);
  EXPECT_EQ(dump_forest(build_forest(serial, {}), serial), dump_forest(build_forest(parallel, {}), parallel));
}

TEST(ForestIo, RoundTrip) {
  std::vector<CombinationData> in{combo("pixel4", "tiktok", 1, 1, 60), combo("pixel4", "kwai", 2, 2, 60)};
  QEvaluator eval(in, tiny_protocol(11));
  TaskForest f = init_forest(eval, {});
  const int target = f.roots[0];
  std::vector<MergeTraceEntry> trace{update_forest(f, target, MergeProposal{f.roots[1], {0, 1}, 1e9})};
  ASSERT_EQ(f.nodes.size(), 3u);
  const std::string text = dump_forest(f, eval);
  const TaskForest back = parse_forest(text, in);
  EXPECT_EQ(dump_forest(back, eval), text);
  EXPECT_EQ(back.roots, f.roots);
  const std::string lines = dump_trace(trace);
  EXPECT_EQ(static_cast<std::size_t>(std::count(lines.begin(), lines.end(), '\n')), trace.size());
  EXPECT_THROW(parse_forest("{}", in), ParseError);
}

TEST(QEvaluatorCache, ExportImportRoundTrip) {
  const auto a = combo("pixel4", "tiktok", 1, 1, 60);
  const auto b = combo("pixel4", "kwai", 2, 2, 60);
  QEvaluator eval({a, b}, tiny_protocol(3));
  eval.evaluate({1, 0});
  eval.evaluate({1});
  QEvaluator fresh({a, b}, tiny_protocol(3));
  for (const auto& [members, result] : eval.cached()) {
    const auto [back, parsed] = parse_node_evaluation(dump_node_evaluation(members, *result, eval.inputs()), fresh.inputs());
    EXPECT_EQ(back, members);
    fresh.insert(back, parsed);
  }
  EXPECT_EQ(fresh.evaluations(), 2u);
  EXPECT_EQ(fresh.evaluate({0, 1}).q, eval.evaluate({0, 1}).q);
  EXPECT_EQ(dump_qnetwork(fresh.evaluate({1}).network), dump_qnetwork(eval.evaluate({1}).network));
  EXPECT_EQ(fresh.evaluations(), 2u);  // nothing retrained
}

}  // namespace
}  // namespace metadvfs
