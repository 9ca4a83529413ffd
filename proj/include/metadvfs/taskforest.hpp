#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "metadvfs/dataset.hpp"
#include "metadvfs/metadata.hpp"
#include "metadvfs/qlearner.hpp"

namespace metadvfs {

/// Fixed Q evaluation protocol shared by every node: same training budget,
/// same network shape, and seeds derived from the member set.
struct QProtocol {
  TrainConfig train;
  QNetConfig net;
  FqeConfig fqe;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct NodeEvaluation {
  double q = 0;                   // mean of member_q
  std::vector<double> member_q;   // FQE of the node policy on each member's data
  std::vector<QEstimate> member_estimates;
  QNetwork network;
};

/// One combination's recorded data.
struct CombinationData {
  CombinationKey key;
  Dataset data;
};

/// Trains and evaluates member sets under a QProtocol, caching by member set.
/// Results depend only on the member set, never on call order.
class QEvaluator {
 public:
  QEvaluator(std::vector<CombinationData> inputs, QProtocol protocol);

  /// `members` are indices into inputs().
  const NodeEvaluation& evaluate(const std::vector<int>& members);
  /// Evaluates several member sets, in parallel when protocol().workers > 1.
  void evaluate_all(const std::vector<std::vector<int>>& sets);

  const std::vector<CombinationData>& inputs() const { return inputs_; }
  const QProtocol& protocol() const { return protocol_; }
  /// Distinct member sets trained so far.
  std::size_t evaluations() const;
  /// Concatenated samples of a member set, in ascending member order.
  Dataset merged_data(const std::vector<int>& members) const;
  static std::string member_key(const std::vector<int>& members, const std::vector<CombinationData>& inputs);

  /// Cached results keyed by member set, in key order.
  std::vector<std::pair<std::vector<int>, std::shared_ptr<const NodeEvaluation>>> cached() const;
  /// Seeds the cache, e.g. from results saved by an earlier run.
  void insert(const std::vector<int>& members, NodeEvaluation result);

 private:
  NodeEvaluation compute(const std::vector<int>& members) const;

  std::vector<CombinationData> inputs_;
  QProtocol protocol_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const NodeEvaluation>> cache_;
};

struct TaskNode {
  int id = 0;
  AttributeMap k;
  std::vector<int> members;  // ascending input indices
  double q = 0;
  std::vector<int> children;
  bool processed = false;
  std::vector<int> absorbed;  // literal-mode only: members whose samples were absorbed
};

enum class ElseBranch {
  exact_tie,  // absorb only when Q_combined == target Q, which changes nothing
  literal,    // target takes the combined Q and samples on every rejection
};

enum class MergeBaseline {
  weighted,  // member-weighted mean of target and candidate Q
  target,    // target Q alone
};

struct ForestConfig {
  int tau_cap = 5;
  double delta = 0.01;
  MergeBaseline baseline = MergeBaseline::weighted;
  ElseBranch else_branch = ElseBranch::exact_tie;
  /// When > 0, evaluate only the first `greedy_first_k` candidates.
  int greedy_first_k = 0;
  /// Un-namespaced keys a shared pair must use to make two roots candidates.
  std::set<std::string> match_keys = default_match_keys();
};

struct MergeTraceEntry {
  int target = 0;
  int candidate = -1;  // -1: no candidate
  double q_before = 0;
  double q_combined = 0;
  double threshold = 0;
  bool accepted = false;
  int candidates_evaluated = 0;
};

struct TaskForest {
  std::vector<TaskNode> nodes;  // arena; node ids index it
  std::vector<int> roots;       // ascending by Q
  ForestConfig config;

  const TaskNode& node(int id) const { return nodes[static_cast<std::size_t>(id)]; }
  TaskNode& node(int id) { return nodes[static_cast<std::size_t>(id)]; }
  /// Member sets of the roots, in root order.
  std::vector<std::vector<int>> partition() const;
};

/// One root per input, Q from the evaluator.
TaskForest init_forest(QEvaluator& eval, const ForestConfig& config);

/// Other roots sharing at least one match-key pair with the target, with the
/// same dataset shape, whose union with the target respects the tau cap.
std::vector<int> find_candidates(const TaskForest& forest, const QEvaluator& eval, int target);

struct MergeProposal {
  int candidate = -1;
  std::vector<int> members;
  double q_combined = 0;
};

/// Trains on the union of the two nodes' samples; does not touch the forest.
MergeProposal evaluate_merge(const TaskForest& forest, QEvaluator& eval, int target, int candidate);

/// Applies the acceptance rule and returns the trace entry.
MergeTraceEntry update_forest(TaskForest& forest, int target, const MergeProposal& best);

/// Repeats target selection, candidate search and update until every root is
/// processed.
TaskForest build_forest(QEvaluator& eval, const ForestConfig& config,
                        std::vector<MergeTraceEntry>* trace = nullptr);

/// Structured text document (JSON) of the forest.
std::string dump_forest(const TaskForest& forest, const QEvaluator& eval);
TaskForest parse_forest(const std::string& text, const std::vector<CombinationData>& inputs);

/// Line-delimited trace records.
std::string dump_trace(const std::vector<MergeTraceEntry>& trace);

/// Text checkpoint of one node evaluation; members are stored by name.
std::string dump_node_evaluation(const std::vector<int>& members, const NodeEvaluation& e,
                                 const std::vector<CombinationData>& inputs);
std::pair<std::vector<int>, NodeEvaluation> parse_node_evaluation(const std::string& text,
                                                                  const std::vector<CombinationData>& inputs);

/// Name of a node for reports and checkpoints.
std::string task_id(const TaskNode& node);

}  // namespace metadvfs
