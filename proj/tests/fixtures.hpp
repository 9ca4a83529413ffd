#pragma once

#include <filesystem>
#include <stdexcept>

#include "metadvfs/metadata.hpp"
#include "metadvfs/simenv.hpp"
#include "metadvfs/taskforest.hpp"

namespace metadvfs::testing_support {

inline const std::vector<MetadataRecord>& pixel_catalog() {
  static const auto catalog =
      load_catalog(std::filesystem::path(METADVFS_DATA_DIR) / "pixel_catalog.json");
  return catalog;
}

inline const MetadataRecord& pixel_record(const std::string& id) {
  for (const auto& r : pixel_catalog())
    if (r.id == id) return r;
  throw std::runtime_error("no record " + id);
}

/// Data for (device, app) under the given seeds. `alias` renames the app so a
/// duplicated environment gets its own combination name.
inline CombinationData combo(const std::string& device, const std::string& app, std::uint64_t env_seed,
                             std::uint64_t data_seed, int horizon = 200, const std::string& alias = "") {
  MetadataRecord app_rec = pixel_record(app);
  if (!alias.empty()) app_rec.id = alias;
  const auto& dev = pixel_record(device);
  CollectConfig cc;
  cc.horizon = horizon;
  cc.episodes = 2;
  return {make_combination(dev, app_rec), collect_dataset(generate_env(dev, pixel_record(app), env_seed), cc, data_seed)};
}

inline QProtocol tiny_protocol(std::uint64_t seed) {
  QProtocol p;
  p.train.train_steps = 300;
  p.train.batch_size = 16;
  p.train.sequence_len = 4;
  p.train.target_update_interval = 50;
  p.train.learn_rate = 3e-3;
  p.net.hidden = {8};
  p.seed = seed;
  return p;
}

}  // namespace metadvfs::testing_support
