// SPDX-License-Identifier: Apache-2.0
#include "maskinv/manifest.hpp"

#include <cstddef>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "maskinv/errors.hpp"

namespace maskinv {

namespace {

using json = nlohmann::ordered_json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << text;
  if (!out) throw LoadError("write to '" + path + "' failed");
}

// nlohmann reports parse errors by byte offset; recover line and column for
// the message.
std::pair<std::size_t, std::size_t> line_col_at(const std::string& text,
                                                std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

json parse_with_position(const std::string& text, const std::string& path) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // e.byte points one past the offending character.
    const std::size_t byte = e.byte > 0 ? e.byte - 1 : 0;
    const auto [line, col] = line_col_at(text, byte);
    throw LoadError("'" + path + "' line " + std::to_string(line) +
                    ", column " + std::to_string(col) +
                    ": " + e.what());
  }
}

const json& require_field(const json& obj, const char* key,
                          const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw DataError(where + ": missing field '" + key + "'");
  }
  return *it;
}

std::string require_string(const json& obj, const char* key,
                           const std::string& where) {
  const json& v = require_field(obj, key, where);
  if (!v.is_string()) {
    throw DataError(where + ": field '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

}  // namespace

Manifest load_manifest(const std::string& path) {
  const json root = parse_with_position(read_file(path), path);
  if (!root.is_object()) throw DataError("manifest root must be an object");
  const json& images = require_field(root, "images", "manifest");
  if (!images.is_array()) {
    throw DataError("manifest: field 'images' must be an array");
  }

  Manifest manifest;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where = "manifest image " + std::to_string(i);
    const json& jimg = images[i];
    if (!jimg.is_object()) throw DataError(where + ": must be an object");
    ManifestImage image;
    image.path = require_string(jimg, "path", where);
    const json& masks = require_field(jimg, "masks", where);
    if (!masks.is_array()) {
      throw DataError(where + ": field 'masks' must be an array");
    }
    for (std::size_t m = 0; m < masks.size(); ++m) {
      const std::string mwhere = where + ", mask " + std::to_string(m);
      const json& jmask = masks[m];
      if (!jmask.is_object()) throw DataError(mwhere + ": must be an object");
      ManifestMask mask;
      mask.id = require_string(jmask, "id", mwhere);
      const bool has_path = jmask.contains("path");
      const bool has_box = jmask.contains("box");
      if (has_path == has_box) {
        throw DataError(mwhere + ": need exactly one of 'path' and 'box'");
      }
      if (has_path) {
        mask.path = require_string(jmask, "path", mwhere);
      } else {
        const json& jbox = jmask["box"];
        if (!jbox.is_array() || jbox.size() != 4) {
          throw DataError(mwhere + ": 'box' must be [x0, y0, x1, y1]");
        }
        mask.has_box = true;
        for (std::size_t k = 0; k < 4; ++k) {
          if (!jbox[k].is_number_integer()) {
            throw DataError(mwhere + ": 'box' entries must be integers");
          }
          mask.box[k] = jbox[k].get<int>();
        }
      }
      if (jmask.contains("label")) {
        mask.label = require_string(jmask, "label", mwhere);
      }
      if (jmask.contains("expression_id")) {
        mask.expression_id = require_string(jmask, "expression_id", mwhere);
      }
      if (mask.label.empty() && mask.expression_id.empty()) {
        throw DataError(mwhere + ": need 'label' or 'expression_id'");
      }
      image.masks.push_back(std::move(mask));
    }
    manifest.images.push_back(std::move(image));
  }
  return manifest;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
  json root;
  root["images"] = json::array();
  for (const auto& image : manifest.images) {
    json jimg;
    jimg["path"] = image.path;
    jimg["masks"] = json::array();
    for (const auto& mask : image.masks) {
      json jmask;
      jmask["id"] = mask.id;
      if (mask.has_box) {
        jmask["box"] = {mask.box[0], mask.box[1], mask.box[2], mask.box[3]};
      } else {
        jmask["path"] = mask.path;
      }
      if (!mask.label.empty()) jmask["label"] = mask.label;
      if (!mask.expression_id.empty()) {
        jmask["expression_id"] = mask.expression_id;
      }
      jimg["masks"].push_back(std::move(jmask));
    }
    root["images"].push_back(std::move(jimg));
  }
  write_file(path, root.dump(2) + "\n");
}

TextBank load_text_bank(const std::string& path) {
  const json root = parse_with_position(read_file(path), path);
  if (!root.is_object()) throw DataError("text bank root must be an object");
  TextBank bank;
  for (const auto& [label, jvec] : root.items()) {
    if (!jvec.is_array() || jvec.empty()) {
      throw DataError("text bank entry '" + label +
                      "' must be a nonempty array");
    }
    Eigen::VectorXd vec(static_cast<Eigen::Index>(jvec.size()));
    for (std::size_t i = 0; i < jvec.size(); ++i) {
      if (!jvec[i].is_number()) {
        throw DataError("text bank entry '" + label + "' must be numeric");
      }
      vec(static_cast<Eigen::Index>(i)) = jvec[i].get<double>();
    }
    if (vec.norm() == 0.0) {
      throw DataError("text bank entry '" + label + "' is a zero vector");
    }
    if (bank.find(label) != nullptr) {
      throw DataError("text bank label '" + label + "' appears twice");
    }
    bank.entries.emplace_back(label, std::move(vec));
  }
  return bank;
}

void save_text_bank(const std::string& path, const TextBank& bank) {
  json root = json::object();
  for (const auto& [label, vec] : bank.entries) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < vec.size(); ++i) arr.push_back(vec(i));
    root[label] = std::move(arr);
  }
  write_file(path, root.dump(2) + "\n");
}

std::string report_to_json(const RetrievalReport& report) {
  json root;
  root["task"] = report.task;
  json acc = json::object();
  for (const auto& [k, v] : report.acc_at) {
    acc[std::to_string(k)] = v;
  }
  root["acc_at"] = std::move(acc);
  root["miou"] = report.miou;
  root["oiou"] = report.oiou;
  root["per_item"] = json::array();
  for (const auto& item : report.per_item) {
    json jitem;
    jitem["query"] = item.query;
    jitem["rank"] = item.rank;
    jitem["iou"] = item.iou;
    root["per_item"].push_back(std::move(jitem));
  }
  return root.dump(2) + "\n";
}

std::string render_report_table(const RetrievalReport& report) {
  std::ostringstream out;
  out << "task: " << report.task << "  (" << report.per_item.size()
      << " queries)\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& [k, v] : report.acc_at) {
    out << "  Acc@" << k << "  " << v << "\n";
  }
  if (report.task == "referring") {
    out << "  mIoU   " << report.miou << "\n";
    out << "  oIoU   " << report.oiou << "\n";
  }
  return out.str();
}

std::string bench_to_json(const std::vector<BenchRow>& rows) {
  json root = json::array();
  for (const auto& row : rows) {
    json jrow;
    jrow["masks"] = row.masks;
    jrow["vanilla_seconds"] = row.vanilla_seconds;
    jrow["decomposed_seconds"] = row.decomposed_seconds;
    jrow["speedup"] = row.decomposed_seconds > 0.0
                          ? row.vanilla_seconds / row.decomposed_seconds
                          : 0.0;
    jrow["max_rel_diff"] = row.max_rel_diff;
    root.push_back(std::move(jrow));
  }
  return root.dump(2) + "\n";
}

std::string render_bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << std::setw(7) << "masks" << std::setw(14) << "vanilla_s"
      << std::setw(14) << "decomposed_s" << std::setw(10) << "speedup"
      << std::setw(14) << "max_rel_diff" << "\n";
  for (const auto& row : rows) {
    const double speedup = row.decomposed_seconds > 0.0
                               ? row.vanilla_seconds / row.decomposed_seconds
                               : 0.0;
    out << std::setw(7) << row.masks << std::fixed << std::setprecision(4)
        << std::setw(14) << row.vanilla_seconds << std::setw(14)
        << row.decomposed_seconds << std::setprecision(2) << std::setw(10)
        << speedup << std::scientific << std::setprecision(2) << std::setw(14)
        << row.max_rel_diff << "\n";
    out.unsetf(std::ios::floatfield);
  }
  return out.str();
}

}  // namespace maskinv
