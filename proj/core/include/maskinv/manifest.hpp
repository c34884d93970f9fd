// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "maskinv/harness.hpp"

namespace maskinv {

// One query of a dataset manifest. Exactly one of `path` (mask PNG) and
// `box` is set; `label` marks a class-retrieval query and `expression_id` a
// referring-expression query keyed into the text bank.
struct ManifestMask {
  std::string id;
  std::string path;
  bool has_box = false;
  std::array<int, 4> box{0, 0, 0, 0};
  std::string label;
  std::string expression_id;
};

struct ManifestImage {
  std::string path;
  std::vector<ManifestMask> masks;
};

struct Manifest {
  std::vector<ManifestImage> images;
};

// Parse failures carry "line L, column C" positions; structural problems
// (missing or conflicting fields) name the offending image and mask.
Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& manifest);

// Text bank file: one JSON object mapping label to embedding array. Entry
// order follows the file and is preserved on save.
TextBank load_text_bank(const std::string& path);
void save_text_bank(const std::string& path, const TextBank& bank);

std::string report_to_json(const RetrievalReport& report);
std::string render_report_table(const RetrievalReport& report);

std::string bench_to_json(const std::vector<BenchRow>& rows);
std::string render_bench_table(const std::vector<BenchRow>& rows);

}  // namespace maskinv
