#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace metadvfs {

struct Transition {
  std::vector<double> state;
  std::vector<int> action;  // one level index per branch
  double reward = 0;
  std::vector<double> next_state;
  int episode = 0;
};

/// Recorded samples of one or more episodes. Transitions of an episode are
/// stored contiguously and in time order.
struct Dataset {
  int state_dim = 0;
  std::vector<int> branch_sizes;
  std::vector<Transition> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  int episode_count() const;

  /// Returns "dim:s|b0,b1,...", equal for datasets a network can share.
  std::string shape_signature() const;
};

/// Concatenates datasets, renumbering episodes so none collide. Throws
/// ArityMismatch on differing shapes.
Dataset concat(const std::vector<const Dataset*>& parts);

/// Splits each episode at `fraction` of its length: the head goes to the first
/// result, the tail to the second (as its own episode).
std::pair<Dataset, Dataset> split_episodes(const Dataset& d, double fraction);

/// Line-delimited dataset format. First line is a header object
/// {"format":"metadvfs-dataset","version":1,"state_dim":..,"branch_sizes":[..],
///  "columns":["state","action","reward","next_state","episode"]};
/// every further line is [state[], action[], reward, next_state[], episode].
std::string dump_dataset(const Dataset& d);
Dataset parse_dataset(const std::string& text);
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace metadvfs
