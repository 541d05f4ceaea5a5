// report.hpp -- merging metric rows from eval runs (or external sources)
// into comparison tables and chart-ready CSV data.
#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/metrics.hpp"

namespace fusenet {

inline constexpr std::array<const char*, 8> kMetricColumns{
    "accuracy", "balanced_accuracy", "precision", "recall",
    "specificity", "f_measure", "g_mean", "auc"};

// One row of a metrics CSV. Values stay verbatim strings so externally
// produced rows pass through untouched.
struct MetricRow {
    std::string model;
    std::array<std::string, 8> values;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace detail

inline std::vector<MetricRow> read_metric_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("report: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || detail::split_csv_line(line) !=
                                       detail::split_csv_line(MetricsReport::csv_header()))
        throw UsageError("report: " + path + " does not start with the metrics header \"" +
                         MetricsReport::csv_header() + "\"");
    std::vector<MetricRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 9)
            throw UsageError("report: " + path + " line " + std::to_string(lineno) + " has " +
                             std::to_string(fields.size()) + " fields, expected 9");
        MetricRow row;
        row.model = fields[0];
        for (std::size_t i = 0; i < 8; ++i) row.values[i] = fields[i + 1];
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<MetricRow> merge_metric_files(const std::vector<std::string>& paths) {
    std::vector<MetricRow> all;
    for (const auto& p : paths) {
        auto rows = read_metric_rows(p);
        all.insert(all.end(), rows.begin(), rows.end());
    }
    return all;
}

inline std::string comparison_csv(const std::vector<MetricRow>& rows) {
    std::string out = MetricsReport::csv_header() + "\n";
    for (const auto& r : rows) {
        out += r.model;
        for (const auto& v : r.values) out += "," + v;
        out += "\n";
    }
    return out;
}

// Transposed layout: one line per metric axis, one column per model series.
inline std::string radar_csv(const std::vector<MetricRow>& rows) {
    std::string out = "metric";
    for (const auto& r : rows) out += "," + r.model;
    out += "\n";
    for (std::size_t m = 0; m < kMetricColumns.size(); ++m) {
        out += kMetricColumns[m];
        for (const auto& r : rows) out += "," + r.values[m];
        out += "\n";
    }
    return out;
}

inline std::string bar_csv(const std::vector<MetricRow>& rows, std::size_t metric_index) {
    std::string out = std::string("model,") + kMetricColumns.at(metric_index) + "\n";
    for (const auto& r : rows) out += r.model + "," + r.values[metric_index] + "\n";
    return out;
}

// comparison.csv + radar.csv + one bar_<metric>.csv per metric.
inline void write_report_files(const std::vector<MetricRow>& rows, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    auto write = [&out_dir](const std::string& name, const std::string& text) {
        const fs::path p = fs::path(out_dir) / name;
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("report: cannot write " + p.string());
        out << text;
    };
    write("comparison.csv", comparison_csv(rows));
    write("radar.csv", radar_csv(rows));
    for (std::size_t m = 0; m < kMetricColumns.size(); ++m)
        write(std::string("bar_") + kMetricColumns[m] + ".csv", bar_csv(rows, m));
}

} // namespace fusenet
