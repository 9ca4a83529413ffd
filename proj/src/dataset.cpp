#include "metadvfs/dataset.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metadvfs/common.hpp"

namespace metadvfs {

int Dataset::episode_count() const {
  int count = 0;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (i == 0 || items[i].episode != items[i - 1].episode) ++count;
  return count;
}

std::string Dataset::shape_signature() const {
  std::string s = "dim:" + std::to_string(state_dim) + "|";
  for (std::size_t i = 0; i < branch_sizes.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(branch_sizes[i]);
  }
  return s;
}

Dataset concat(const std::vector<const Dataset*>& parts) {
  Dataset out;
  if (parts.empty()) return out;
  out.state_dim = parts.front()->state_dim;
  out.branch_sizes = parts.front()->branch_sizes;
  int next_episode = 0;
  for (const Dataset* part : parts) {
    if (part->shape_signature() != out.shape_signature())
      throw ArityMismatch(part->shape_signature() + " vs " + out.shape_signature());
    int last = -1;
    int mapped = next_episode - 1;
    for (const auto& t : part->items) {
      if (t.episode != last) {
        last = t.episode;
        mapped = next_episode++;
      }
      out.items.push_back(t);
      out.items.back().episode = mapped;
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_episodes(const Dataset& d, double fraction) {
  Dataset head{d.state_dim, d.branch_sizes, {}};
  Dataset tail{d.state_dim, d.branch_sizes, {}};
  std::size_t begin = 0;
  while (begin < d.items.size()) {
    std::size_t end = begin;
    while (end < d.items.size() && d.items[end].episode == d.items[begin].episode) ++end;
    const std::size_t len = end - begin;
    std::size_t cut = static_cast<std::size_t>(fraction * static_cast<double>(len) + 0.5);
    if (len >= 2) cut = std::clamp<std::size_t>(cut, 1, len - 1);
    for (std::size_t i = begin; i < end; ++i) (i - begin < cut ? head : tail).items.push_back(d.items[i]);
    begin = end;
  }
  return {head, tail};
}

std::string dump_dataset(const Dataset& d) {
  std::ostringstream out;
  nlohmann::json header = {
      {"format", "metadvfs-dataset"},
      {"version", 1},
      {"state_dim", d.state_dim},
      {"branch_sizes", d.branch_sizes},
      {"columns", {"state", "action", "reward", "next_state", "episode"}}};
  out << header.dump() << '\n';
  for (const auto& t : d.items) {
    nlohmann::json row = nlohmann::json::array({t.state, t.action, t.reward, t.next_state, t.episode});
    out << row.dump() << '\n';
  }
  return out.str();
}

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty dataset");
  Dataset d;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "metadvfs-dataset")
      throw ParseError("not a metadvfs dataset");
    d.state_dim = header.at("state_dim").get<int>();
    d.branch_sizes = header.at("branch_sizes").get<std::vector<int>>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto row = nlohmann::json::parse(line);
      Transition t;
      t.state = row.at(0).get<std::vector<double>>();
      t.action = row.at(1).get<std::vector<int>>();
      t.reward = row.at(2).get<double>();
      t.next_state = row.at(3).get<std::vector<double>>();
      t.episode = row.at(4).get<int>();
      if (static_cast<int>(t.state.size()) != d.state_dim ||
          static_cast<int>(t.next_state.size()) != d.state_dim ||
          t.action.size() != d.branch_sizes.size())
        throw ParseError("transition shape does not match header");
      d.items.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  write_text_file(path, dump_dataset(d));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return parse_dataset(read_text_file(path));
}

}  // namespace metadvfs
