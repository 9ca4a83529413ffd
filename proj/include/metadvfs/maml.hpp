#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metadvfs/optim.hpp"
#include "metadvfs/qlearner.hpp"
#include "metadvfs/taskforest.hpp"

namespace metadvfs {

enum class MetaOrder {
  first,   // query gradient at the adapted point only
  second,  // back through the inner steps with support Hessian-vector products
};

enum class MetaOptimizer { adam, sgd };

struct MetaConfig {
  double inner_lr = 1e-2;
  int inner_steps = 5;
  double meta_lr = 1e-3;
  int outer_steps = 300;
  double support_fraction = 0.7;
  MetaOrder order = MetaOrder::first;
  MetaOptimizer optimizer = MetaOptimizer::adam;
  double grad_clip = 10.0;
  double hvp_epsilon = 1e-5;  // central difference step for network HVPs
  int batch_size = 32;
  int sequence_len = 8;
  double discount_factor = 0.95;
  /// Outer steps between refreshes of the frozen TD target; 0 keeps the
  /// warm-start target for the whole run.
  int target_update_interval = 50;

  void validate() const;
};

/// Losses of a family of members, each with a support and a query split.
/// prepare() is called once per outer step, before any loss; minibatches it
/// draws stay fixed until the next call.
class MetaObjective {
 public:
  virtual ~MetaObjective() = default;
  virtual int members() const = 0;
  virtual void prepare(Rng& rng) { (void)rng; }
  virtual double support_loss(int member, int inner_step, const Vector& theta, Vector* grad) = 0;
  virtual double query_loss(int member, const Vector& theta, Vector* grad) = 0;
  /// Support Hessian at theta times v. Defaults to a central difference of
  /// support gradients.
  virtual Vector support_hvp(int member, int inner_step, const Vector& theta, const Vector& v,
                             double epsilon);
};

struct MetaStep {
  Vector gradient;                 // mean over members
  double query_loss = 0;           // mean over members, at the adapted points
  std::vector<Vector> adapted;     // per member
};

/// Inner adaptation from theta on one member's support losses.
Vector inner_adapt(MetaObjective& obj, int member, const Vector& theta, double alpha, int steps,
                   std::vector<Vector>* path = nullptr);

/// Meta-gradient at theta for every member (after obj.prepare()).
MetaStep meta_gradient(MetaObjective& obj, const Vector& theta, const MetaConfig& config);

using OuterHook = std::function<void(int step, const Vector& theta)>;

/// Runs config.outer_steps outer updates from theta; returns the final theta.
/// `losses`, when given, receives the mean query loss of each outer step.
/// `before_step` runs ahead of each outer step's minibatch draw.
Vector meta_optimize(MetaObjective& obj, Vector theta, const MetaConfig& config, std::uint64_t seed,
                     std::vector<double>* losses = nullptr, const OuterHook& before_step = {});

struct SupportQuerySplit {
  Dataset support;
  Dataset query;
};

/// Time split of every episode at config.support_fraction. Throws
/// InvalidConfig when either side would be empty.
SupportQuerySplit split_support_query(const Dataset& data, double support_fraction);

/// TD losses of a QNetwork on per-member splits, against a frozen target.
class TdMetaObjective final : public MetaObjective {
 public:
  TdMetaObjective(QNetwork shape, std::vector<SupportQuerySplit> splits, const MetaConfig& config);

  int members() const override { return static_cast<int>(splits_.size()); }
  void prepare(Rng& rng) override;
  double support_loss(int member, int inner_step, const Vector& theta, Vector* grad) override;
  double query_loss(int member, const Vector& theta, Vector* grad) override;

  void set_target(const Vector& theta);
  const QNetwork& shape() const { return shape_; }

 private:
  double loss(const SequenceBatch& batch, const Vector& theta, Vector* grad);

  QNetwork shape_;
  QNetwork target_;
  std::vector<SupportQuerySplit> splits_;
  std::vector<ReplayMemory> support_mem_, query_mem_;
  MetaConfig config_;
  std::vector<std::vector<SequenceBatch>> support_batches_;  // [member][inner step]
  std::vector<SequenceBatch> query_batches_;
};

struct MetaModel {
  std::string task_id;
  QNetwork network;  // theta_meta and its normalizer
  MetaConfig config;
  std::vector<CombinationKey> trained_on;
  std::vector<double> query_losses;  // one per outer step
};

/// Meta-trains from `init` on the members' datasets. Deterministic per seed.
MetaModel meta_train(const std::string& task_id, const QNetwork& init,
                     const std::vector<const CombinationData*>& members, const MetaConfig& config,
                     std::uint64_t seed);

/// Meta-trains a forest root, warm-started from its node checkpoint.
MetaModel meta_train(const TaskNode& task, QEvaluator& eval, const MetaConfig& config,
                     std::uint64_t seed);

struct TaskSelection {
  int root = -1;
  std::string task_id;
  std::size_t overlap = 0;
  bool fallback = false;  // no root shares any attribute
};

/// Root with the largest attribute intersection with `key`; ties go to higher
/// Q, then to the smaller task id.
TaskSelection select_task(const CombinationKey& key, const TaskForest& forest);

struct AdaptConfig {
  int steps = -1;          // < 0: the meta-model's inner_steps
  double lr = -1;          // < 0: the meta-model's inner_lr
  bool refit_normalizer = true;
  std::uint64_t seed = 0;
};

struct AdaptedModel {
  QNetwork network;
  std::string source_task_id;
  std::string source_hash;  // content hash of the meta-model checkpoint
  int steps_used = 0;
  std::size_t support_size = 0;
};

/// Plain gradient steps on support TD losses from the meta-model, with the
/// meta-model as frozen target. Throws ArityMismatch on shape mismatch.
AdaptedModel fast_adapt(const MetaModel& meta, const Dataset& support, const AdaptConfig& config);

std::string dump_meta_model(const MetaModel& m);
MetaModel parse_meta_model(const std::string& text);
std::string meta_model_hash(const MetaModel& m);

std::string dump_adapted_model(const AdaptedModel& m);
AdaptedModel parse_adapted_model(const std::string& text);

}  // namespace metadvfs
