#include "metadvfs/metadata.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

namespace metadvfs {

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// lowercase, trimmed, inner whitespace/hyphens collapsed to '_'
std::string snake(const std::string& raw) {
  std::string out;
  bool pending = false;
  for (unsigned char c : trim(lower(raw))) {
    if (std::isspace(c) || c == '-' || c == '_') {
      pending = true;
      continue;
    }
    if (pending && !out.empty()) out.push_back('_');
    pending = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

std::string strip_number(const std::string& s) {
  // "060" stays as written apart from surrounding whitespace; numbers are
  // compared as tokens.
  return trim(s);
}

const std::regex kNumber(R"(^[0-9]+(\.[0-9]+)?$)");

std::string canon_value(const std::string& key, const std::string& raw) {
  const std::string v = trim(lower(raw));
  auto bad = [&]() -> MalformedValue {
    return MalformedValue("'" + raw + "' for " + key);
  };
  if (v.empty()) throw bad();

  if (key == "core_count") {
    if (!std::regex_match(v, std::regex(R"(^[0-9]+$)")) || std::stoi(v) < 1) throw bad();
    return std::to_string(std::stoi(v));
  }
  if (key == "process_node") {
    std::smatch m;
    if (!std::regex_search(v, m, std::regex(R"(([0-9]+(\.[0-9]+)?)\s*nm)"))) throw bad();
    return strip_number(m[1].str()) + "nm";
  }
  if (key == "cpu_topology") {
    std::string t;
    for (char c : v)
      if (!std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    if (!std::regex_match(t, std::regex(R"(^[1-9][0-9]*(\+[1-9][0-9]*)*$)"))) throw bad();
    return t;
  }
  if (key == "cpu_freq_range" || key == "gpu_freq_range") {
    std::smatch m;
    static const std::regex range(
        R"(^([0-9]+(\.[0-9]+)?)\s*(mhz)?\s*(-+|\xE2\x80\x93|\xE2\x80\x94|to)\s*([0-9]+(\.[0-9]+)?)\s*(mhz)?$)");
    if (!std::regex_match(v, m, range)) throw bad();
    const std::string lo = m[1].str(), hi = m[5].str();
    if (std::stod(lo) <= 0 || std::stod(lo) >= std::stod(hi)) throw bad();
    return lo + "-" + hi;
  }
  if (key == "category") {
    if (v != "video" && v != "interactive" && v != "graphics") throw bad();
    return v;
  }
  if (key == "target_fps") {
    if (v == "variable") return v;
    std::smatch m;
    if (!std::regex_match(v, m, std::regex(R"(^([0-9]+(\.[0-9]+)?)\s*(fps)?$)"))) throw bad();
    if (std::stod(m[1].str()) <= 0) throw bad();
    return m[1].str();
  }
  if (key == "cpu_sensitivity" || key == "gpu_sensitivity" || key == "io_sensitivity") {
    const std::string s = snake(v);
    if (s != "low" && s != "medium" && s != "high" && s != "very_high") throw bad();
    return s;
  }
  // free categorical token (vendor, resolution)
  return snake(v);
}

const SchemaEntry* find_schema(const std::string& key) {
  for (const auto& e : schema())
    if (e.key == key) return &e;
  return nullptr;
}

}  // namespace

std::string to_string(RecordKind kind) {
  return kind == RecordKind::device ? "device" : "application";
}

const std::string& MetadataRecord::at(const std::string& key) const {
  auto it = attributes.find(key);
  if (it == attributes.end())
    throw SchemaViolation("record '" + id + "' has no attribute " + key);
  return it->second;
}

const std::vector<SchemaEntry>& schema() {
  static const std::vector<SchemaEntry> entries = {
      {"core_count", "Core Count", RecordKind::device},
      {"chipset_vendor", "Chipset Vendor", RecordKind::device},
      {"process_node", "Process Node", RecordKind::device},
      {"cpu_topology", "CPU Topology", RecordKind::device},
      {"cpu_freq_range", "CPU Freq Range", RecordKind::device},
      {"gpu_freq_range", "GPU Freq Range", RecordKind::device},
      {"category", "Category", RecordKind::application},
      {"target_fps", "Target FPS", RecordKind::application},
      {"resolution", "Resolution", RecordKind::application},
      {"cpu_sensitivity", "CPU Sensitivity", RecordKind::application},
      {"gpu_sensitivity", "GPU Sensitivity", RecordKind::application},
      {"io_sensitivity", "IO Sensitivity", RecordKind::application},
  };
  return entries;
}

const std::set<std::string>& default_match_keys() {
  static const std::set<std::string> keys = {
      "chipset_vendor", "process_node",    "cpu_topology",    "category",
      "target_fps",     "resolution",      "cpu_sensitivity", "gpu_sensitivity",
      "io_sensitivity"};
  return keys;
}

std::pair<std::string, std::string> canonicalize(const std::string& raw_key,
                                                 const std::string& raw_value) {
  const std::string key = snake(raw_key);
  if (!find_schema(key)) throw UnknownAttribute("'" + raw_key + "'");
  return {key, canon_value(key, raw_value)};
}

AttributeMap shared_attributes(const AttributeMap& a, const AttributeMap& b) {
  AttributeMap out;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it != b.end() && it->second == v) out.emplace(k, v);
  }
  return out;
}

AttributeMap shared_attributes(const AttributeMap& a, const AttributeMap& b,
                               const std::set<std::string>& allowed) {
  AttributeMap out;
  for (const auto& [k, v] : shared_attributes(a, b)) {
    const auto dot = k.find('.');
    const std::string bare = dot == std::string::npos ? k : k.substr(dot + 1);
    if (allowed.count(bare)) out.emplace(k, v);
  }
  return out;
}

CombinationKey make_combination(const MetadataRecord& device,
                                const MetadataRecord& app) {
  if (device.kind != RecordKind::device || app.kind != RecordKind::application)
    throw InvalidMetadata("combination needs a device and an application record");
  CombinationKey key{device.id, app.id, {}};
  for (const auto& [k, v] : device.attributes) key.merged_attributes["device." + k] = v;
  for (const auto& [k, v] : app.attributes) key.merged_attributes["app." + k] = v;
  return key;
}

MetadataRecord validate_record(RecordKind kind, const std::string& id,
                               const std::map<std::string, std::string>& raw) {
  if (id.empty()) throw SchemaViolation("record with empty id");
  MetadataRecord rec{kind, id, {}};
  for (const auto& [k, v] : raw) {
    auto [ck, cv] = canonicalize(k, v);
    if (find_schema(ck)->kind != kind)
      throw SchemaViolation("record '" + id + "': key " + ck + " does not belong to a " +
                            to_string(kind));
    rec.attributes[ck] = cv;
  }
  for (const auto& e : schema())
    if (e.kind == kind && e.required && !rec.attributes.count(e.key))
      throw SchemaViolation("record '" + id + "' is missing " + e.key);
  return rec;
}

std::vector<MetadataRecord> parse_catalog(const std::string& text) {
  if (trim(text).empty()) return {};
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
  const nlohmann::json* list = &doc;
  if (doc.is_object()) {
    if (!doc.contains("records")) throw ParseError("catalog object lacks 'records'");
    list = &doc["records"];
  }
  if (!list->is_array()) throw ParseError("catalog records must be an array");

  std::vector<MetadataRecord> out;
  std::set<std::string> seen;
  for (const auto& entry : *list) {
    if (!entry.is_object() || !entry.contains("kind") || !entry.contains("id") ||
        !entry.contains("attributes"))
      throw ParseError("record needs kind, id and attributes");
    const std::string kind_s = lower(entry["kind"].get<std::string>());
    RecordKind kind;
    if (kind_s == "device")
      kind = RecordKind::device;
    else if (kind_s == "application" || kind_s == "app")
      kind = RecordKind::application;
    else
      throw ParseError("unknown record kind '" + kind_s + "'");
    const std::string id = entry["id"].get<std::string>();
    if (!seen.insert(id).second) throw SchemaViolation("duplicate id '" + id + "'");
    std::map<std::string, std::string> raw;
    for (const auto& [k, v] : entry["attributes"].items())
      raw[k] = v.is_string() ? v.get<std::string>() : v.dump();
    out.push_back(validate_record(kind, id, raw));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

std::vector<MetadataRecord> load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open catalog " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_catalog(ss.str());
}

std::string dump_catalog(const std::vector<MetadataRecord>& records) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : records) {
    list.push_back({{"kind", to_string(r.kind)}, {"id", r.id}, {"attributes", r.attributes}});
  }
  return nlohmann::json{{"records", list}}.dump(2) + "\n";
}

std::vector<MetadataRecord> devices_of(const std::vector<MetadataRecord>& all) {
  std::vector<MetadataRecord> out;
  for (const auto& r : all)
    if (r.kind == RecordKind::device) out.push_back(r);
  return out;
}

std::vector<MetadataRecord> apps_of(const std::vector<MetadataRecord>& all) {
  std::vector<MetadataRecord> out;
  for (const auto& r : all)
    if (r.kind == RecordKind::application) out.push_back(r);
  return out;
}

FreqRange parse_freq_range(const std::string& token) {
  const auto dash = token.find('-');
  if (dash == std::string::npos) throw InvalidMetadata("frequency range '" + token + "'");
  try {
    FreqRange r{std::stod(token.substr(0, dash)), std::stod(token.substr(dash + 1))};
    if (!(r.lo_mhz > 0 && r.lo_mhz < r.hi_mhz)) throw InvalidMetadata(token);
    return r;
  } catch (const std::invalid_argument&) {
    throw InvalidMetadata("frequency range '" + token + "'");
  }
}

std::vector<int> parse_topology(const std::string& token) {
  std::vector<int> groups;
  std::stringstream ss(token);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part.empty() || !std::all_of(part.begin(), part.end(), ::isdigit))
      throw InvalidMetadata("cpu topology '" + token + "'");
    groups.push_back(std::stoi(part));
  }
  if (groups.empty()) throw InvalidMetadata("cpu topology '" + token + "'");
  return groups;
}

double parse_process_nm(const std::string& token) {
  try {
    const double nm = std::stod(token);
    if (nm <= 0) throw InvalidMetadata("process node '" + token + "'");
    return nm;
  } catch (const std::invalid_argument&) {
    throw InvalidMetadata("process node '" + token + "'");
  }
}
}  // namespace metadvfs
