#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metadvfs/common.hpp"

namespace metadvfs {

enum class RecordKind { device, application };

std::string to_string(RecordKind kind);

/// Canonical attribute set: key -> token. Ordered so iteration and
/// serialization are deterministic.
using AttributeMap = std::map<std::string, std::string>;

struct MetadataRecord {
  RecordKind kind = RecordKind::device;
  std::string id;
  AttributeMap attributes;

  const std::string& at(const std::string& key) const;
};

/// One device-application pairing. merged_attributes namespaces keys as
/// "device.<key>" and "app.<key>".
struct CombinationKey {
  std::string device_id;
  std::string app_id;
  AttributeMap merged_attributes;

  std::string name() const { return device_id + "__" + app_id; }
  friend bool operator<(const CombinationKey& a, const CombinationKey& b) {
    return a.name() < b.name();
  }
  friend bool operator==(const CombinationKey& a, const CombinationKey& b) {
    return a.device_id == b.device_id && a.app_id == b.app_id;
  }
};

struct SchemaEntry {
  std::string key;
  std::string display_name;
  RecordKind kind;
  bool required = true;
};

/// Registered schema for both record kinds.
const std::vector<SchemaEntry>& schema();

/// Keys allowed into the merge-candidate intersection by default. Frequency
/// ranges and core counts are left out.
const std::set<std::string>& default_match_keys();

/// Maps a raw (key, value) pair to canonical tokens. Accepts display names
/// ("Process Node") as well as canonical keys. Idempotent.
std::pair<std::string, std::string> canonicalize(const std::string& raw_key,
                                                 const std::string& raw_value);

/// Pairs present with identical key and value in both maps.
AttributeMap shared_attributes(const AttributeMap& a, const AttributeMap& b);

/// shared_attributes restricted to keys whose un-namespaced name is in
/// `allowed` (e.g. "device.process_node" passes when "process_node" is allowed).
AttributeMap shared_attributes(const AttributeMap& a, const AttributeMap& b,
                               const std::set<std::string>& allowed);

CombinationKey make_combination(const MetadataRecord& device,
                                const MetadataRecord& app);

/// Canonicalizes and validates a record, throwing SchemaViolation on missing
/// required keys.
MetadataRecord validate_record(RecordKind kind, const std::string& id,
                               const std::map<std::string, std::string>& raw);

/// Parses a catalog document. Records come back sorted by id.
std::vector<MetadataRecord> parse_catalog(const std::string& text);
std::vector<MetadataRecord> load_catalog(const std::filesystem::path& path);
std::string dump_catalog(const std::vector<MetadataRecord>& records);

std::vector<MetadataRecord> devices_of(const std::vector<MetadataRecord>& all);
std::vector<MetadataRecord> apps_of(const std::vector<MetadataRecord>& all);

/// Numeric views used by the environment generator.
struct FreqRange {
  double lo_mhz = 0;
  double hi_mhz = 0;
};
FreqRange parse_freq_range(const std::string& token);
std::vector<int> parse_topology(const std::string& token);
double parse_process_nm(const std::string& token);

}  // namespace metadvfs
