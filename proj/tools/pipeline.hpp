#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "regime/core.hpp"

namespace regime::cli {

using nlohmann::json;

inline const std::vector<std::string> kMethods{"hclust", "cart",       "lds-demo", "gp",   "hmm-em",
                                               "hmm-sticky", "hdp-hmm", "imgpe",    "slds", "basic"};

struct SubjectInput {
  std::string name;
  std::filesystem::path counts;
};

struct IngestSpec {
  std::vector<SubjectInput> subjects;
  std::optional<std::filesystem::path> taxonomy;
  double prevalence = 0.2;  // keep species positive in at least this share of all samples
};

struct IngestResult {
  core::SeriesPanel panel;
  std::vector<std::string> warnings;
};

/// Reads one counts TSV per subject (header: label then sample times; rows:
/// species id then counts) and an optional (species, family) sidecar. The
/// species axis is the union in order of first appearance; the prevalence
/// filter runs on the raw counts. Malformed input throws ConfigError naming
/// the file and line.
IngestResult ingest(const IngestSpec& spec);

/// Counts TSV in the ingest format, numbers in shortest round-trip form.
std::string counts_tsv(const core::SeriesPanel& panel, std::size_t subject);

struct HeatmapRow {
  std::string subject, species;
  double time = 0.0;
  double value = 0.0;
};

/// Long format: subject, species, time, value, kind. Rows are sorted by
/// (subject order, species order, time) using the order of first appearance.
std::string heatmap_tsv(const std::vector<HeatmapRow>& rows, const std::string& kind,
                        const std::vector<std::string>& subject_order = {},
                        const std::vector<std::string>& species_order = {});

/// Parsed and validated configuration, with every default filled in.
struct PipelineConfig {
  std::string method;
  std::optional<IngestSpec> input;
  std::optional<core::TransformKind> transform;
  std::uint64_t seed = 0;
  int threads = 1;
  std::filesystem::path out;
  json params;    // method block with defaults materialized
  json resolved;  // the whole config as it will be recorded in the manifest
  std::filesystem::path base_dir;
};

/// Validates `doc` against the schema of `method`; unknown keys anywhere are
/// rejected with ConfigError. Relative paths resolve against `base_dir`.
PipelineConfig parse_config(const json& doc, const std::string& method, const std::filesystem::path& base_dir);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::filesystem::path> out;
};

PipelineConfig load_config(const std::filesystem::path& path, const std::string& method, const Overrides& ov);

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> checksums;  // output file -> sha256
  std::map<std::string, double> timings;         // stage -> seconds
};

/// Runs the method, writes every output into a staging directory and moves
/// them into cfg.out with manifest.json last. On failure nothing is left
/// behind in cfg.out from this run.
RunManifest run(const PipelineConfig& cfg);

std::string sha256_hex(const std::string& bytes);

/// Process exit code for an exception escaping run(): 2 for configuration
/// and input problems, 3 for numerical failures, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace regime::cli
