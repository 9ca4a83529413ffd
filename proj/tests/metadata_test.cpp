#include "metadvfs/metadata.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace metadvfs {
namespace {

const std::filesystem::path kPixelCatalog = std::filesystem::path(METADVFS_DATA_DIR) / "pixel_catalog.json";

const MetadataRecord& by_id(const std::vector<MetadataRecord>& all, const std::string& id) {
  for (const auto& r : all)
    if (r.id == id) return r;
  throw std::runtime_error("no record " + id);
}

TEST(Canonicalize, DisplayNamesMapToSchemaKeys) {
  EXPECT_EQ(canonicalize("Process Node", "4nm"), std::make_pair(std::string("process_node"), std::string("4nm")));
  EXPECT_EQ(canonicalize("process_node", "4nm"), std::make_pair(std::string("process_node"), std::string("4nm")));
  EXPECT_EQ(canonicalize("Target FPS", "60 FPS"), std::make_pair(std::string("target_fps"), std::string("60")));
  EXPECT_EQ(canonicalize("Process Node", "10nm FinFET").second, "10nm");
  EXPECT_EQ(canonicalize("CPU Freq Range", "300–2803MHz").second, "300-2803");
  EXPECT_EQ(canonicalize("GPU Sensitivity", "Very High").second, "very_high");
  EXPECT_EQ(canonicalize("Chipset Vendor", "Qualcomm").second, "qualcomm");
  EXPECT_EQ(canonicalize("CPU Topology", "1 + 3 + 4").second, "1+3+4");
}

TEST(Canonicalize, IsIdempotentForEverySchemaKey) {
  const std::vector<std::pair<std::string, std::string>> raw = {
      {"Core Count", "9"},         {"Chipset Vendor", "Google Tensor"},
      {"Process Node", "7nm FinFET"}, {"CPU Topology", "2+2+4"},
      {"CPU Freq Range", "357--3105MHz"}, {"GPU Freq Range", "151 - 1000 MHz"},
      {"Category", "Interactive"}, {"Target FPS", "Variable"},
      {"Resolution", "1080p"},     {"CPU Sensitivity", "High"},
      {"GPU Sensitivity", "very high"}, {"IO Sensitivity", "Low"}};
  for (const auto& [k, v] : raw) {
    const auto once = canonicalize(k, v);
    EXPECT_EQ(canonicalize(once.first, once.second), once) << k;
  }
}

TEST(Canonicalize, Errors) {
  EXPECT_THROW(canonicalize("Battery Size", "4000mAh"), UnknownAttribute);
  EXPECT_THROW(canonicalize("Process Node", "small"), MalformedValue);
  EXPECT_THROW(canonicalize("Target FPS", "fast"), MalformedValue);
  EXPECT_THROW(canonicalize("CPU Freq Range", "2800-300MHz"), MalformedValue);
  EXPECT_THROW(canonicalize("CPU Topology", "4+x"), MalformedValue);
  EXPECT_THROW(canonicalize("CPU Sensitivity", "extreme"), MalformedValue);
}

TEST(Catalog, PixelCatalogLoadsElevenRecordsSortedById) {
  const auto all = load_catalog(kPixelCatalog);
  ASSERT_EQ(all.size(), 11u);
  EXPECT_TRUE(std::is_sorted(all.begin(), all.end(),
                             [](const auto& a, const auto& b) { return a.id < b.id; }));
  EXPECT_EQ(devices_of(all).size(), 5u);
  EXPECT_EQ(apps_of(all).size(), 6u);
  EXPECT_EQ(by_id(all, "pixel8").at("process_node"), "4nm");
  EXPECT_EQ(by_id(all, "tiktok").at("target_fps"), "60");
}

TEST(Catalog, EmptyFileIsEmptyList) {
  EXPECT_TRUE(parse_catalog("").empty());
  EXPECT_TRUE(parse_catalog("  \n").empty());
  EXPECT_TRUE(parse_catalog(R"({"records": []})").empty());
}

TEST(Catalog, MissingTargetFpsNamesTheApp) {
  const std::string text = R"({"records": [{"kind": "application", "id": "quietapp",
      "attributes": {"Category": "Video", "Resolution": "1080p", "CPU Sensitivity": "Low",
                     "GPU Sensitivity": "Low", "IO Sensitivity": "Low"}}]})";
  try {
    parse_catalog(text);
    FAIL() << "expected SchemaViolation";
  } catch (const SchemaViolation& e) {
    EXPECT_NE(std::string(e.what()).find("quietapp"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("target_fps"), std::string::npos);
  }
}

TEST(Catalog, ParseErrors) {
  EXPECT_THROW(parse_catalog("{not json"), ParseError);
  EXPECT_THROW(parse_catalog(R"({"records": [{"kind": "phone", "id": "x", "attributes": {}}]})"),
               ParseError);
}

TEST(Catalog, DumpRoundTrips) {
  const auto all = load_catalog(kPixelCatalog);
  const auto again = parse_catalog(dump_catalog(all));
  ASSERT_EQ(again.size(), all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(again[i].id, all[i].id);
    EXPECT_EQ(again[i].attributes, all[i].attributes);
  }
}

TEST(SharedAttributes, PixelCatalogPairs) {
  const auto all = load_catalog(kPixelCatalog);
  const auto p8 = by_id(all, "pixel8").attributes;
  const auto p9 = by_id(all, "pixel9").attributes;
  const AttributeMap expected = {{"chipset_vendor", "google"}, {"process_node", "4nm"}};
  EXPECT_EQ(shared_attributes(p8, p9), expected);

  const auto tiktok = by_id(all, "tiktok").attributes;
  const auto kwai = by_id(all, "kwai").attributes;
  const auto dmark = by_id(all, "3dmark").attributes;
  EXPECT_TRUE(shared_attributes(tiktok, dmark).empty());
  const auto tk = shared_attributes(tiktok, kwai);
  for (const char* k : {"category", "target_fps", "resolution", "cpu_sensitivity",
                        "gpu_sensitivity", "io_sensitivity"})
    EXPECT_TRUE(tk.count(k)) << k;
  EXPECT_EQ(shared_attributes(tiktok, tiktok), tiktok);
}

// Oracle: pairwise token comparison over every pair in the pixel catalog.
TEST(SharedAttributes, SubsetAndSymmetryOverAllPairs) {
  const auto all = load_catalog(kPixelCatalog);
  for (const auto& a : all)
    for (const auto& b : all) {
      const auto ab = shared_attributes(a.attributes, b.attributes);
      EXPECT_EQ(ab, shared_attributes(b.attributes, a.attributes));
      EXPECT_LE(ab.size(), std::min(a.attributes.size(), b.attributes.size()));
      std::size_t expected = 0;
      for (const auto& [k, v] : a.attributes) {
        auto it = b.attributes.find(k);
        if (it != b.attributes.end() && it->second == v) {
          ++expected;
          EXPECT_EQ(ab.at(k), v);
        }
      }
      EXPECT_EQ(ab.size(), expected);
    }
}

TEST(SharedAttributes, IncludeListDropsNumericRanges) {
  const AttributeMap a = {{"device.cpu_freq_range", "300-2803"}, {"device.chipset_vendor", "google"}};
  const AttributeMap b = a;
  const auto filtered = shared_attributes(a, b, default_match_keys());
  EXPECT_EQ(filtered.size(), 1u);
  EXPECT_TRUE(filtered.count("device.chipset_vendor"));
}

TEST(Combination, MergedAttributesAreNamespacedUnion) {
  const auto all = load_catalog(kPixelCatalog);
  const auto key = make_combination(by_id(all, "pixel4"), by_id(all, "tiktok"));
  EXPECT_EQ(key.merged_attributes.size(), 12u);
  EXPECT_EQ(key.merged_attributes.at("device.chipset_vendor"), "qualcomm");
  EXPECT_EQ(key.merged_attributes.at("app.category"), "video");
  EXPECT_EQ(key.name(), "pixel4__tiktok");
  EXPECT_THROW(make_combination(by_id(all, "tiktok"), by_id(all, "pixel4")), InvalidMetadata);
}

}  // namespace
}  // namespace metadvfs
