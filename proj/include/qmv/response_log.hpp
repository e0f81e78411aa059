#pragma once

#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qmv/io.hpp"
#include "qmv/qmatrix.hpp"

namespace qmv {

struct ResponseRecord {
  std::string student_id;
  std::string item_id;
  int score = 0;  // 0 or 1
};

/// (student, item, score) triples; the training/evaluation data for the CDM.
struct ResponseLog {
  std::vector<ResponseRecord> records;

  /// Sorted unique student ids (the canonical student axis).
  std::vector<std::string> student_ids() const {
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.student_id);
    return {ids.begin(), ids.end()};
  }

  std::vector<std::string> item_ids() const {
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.item_id);
    return {ids.begin(), ids.end()};
  }

  static ResponseLog from_csv(std::string_view text) {
    const auto lines = detail::split_lines(text);
    if (lines.empty()) throw std::runtime_error("response log CSV is empty");
    if (lines[0] != "student_id,item_id,score") {
      throw std::runtime_error(
          "response log CSV header must be 'student_id,item_id,score'");
    }
    ResponseLog log;
    log.records.reserve(lines.size() - 1);
    for (std::size_t r = 1; r < lines.size(); ++r) {
      const auto fields = detail::split_csv_line(lines[r]);
      if (fields.size() != 3) {
        throw std::runtime_error("response log row " + std::to_string(r) +
                                 ": expected 3 fields, got " +
                                 std::to_string(fields.size()));
      }
      if (fields[0].empty() || fields[1].empty()) {
        throw std::runtime_error("response log row " + std::to_string(r) +
                                 ": empty id");
      }
      int score = 0;
      if (fields[2] == "0") score = 0;
      else if (fields[2] == "1") score = 1;
      else {
        throw std::runtime_error("response log row " + std::to_string(r) +
                                 ": score must be '0' or '1', got '" + fields[2] +
                                 "'");
      }
      log.records.push_back({fields[0], fields[1], score});
    }
    return log;
  }

  std::string to_csv() const {
    std::string out = "student_id,item_id,score\n";
    for (const auto& r : records) {
      out += r.student_id;
      out += ',';
      out += r.item_id;
      out += ',';
      out += r.score ? '1' : '0';
      out += '\n';
    }
    return out;
  }

  static ResponseLog load(const std::filesystem::path& path) {
    try {
      return from_csv(std::string_view(read_text_file(path)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": " + e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    write_text_file(path, to_csv());
  }
};

}  // namespace qmv
