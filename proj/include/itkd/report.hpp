#pragma once

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "itkd/runner.hpp"

namespace itkd {

/// One line of a result table: a configuration evaluated under one seed, or
/// the arithmetic mean over seeds ("mean" row).
struct ReportRow {
    std::string table;
    std::string label;
    std::string cell_id;
    std::string seed;  // seed number, or "mean"
    bool ok = true;
    std::string error;
    std::vector<std::optional<double>> ap;   // per class
    std::vector<std::optional<double>> aph;  // per class
    double macro_ap = 0.0;
    double macro_aph = 0.0;
    std::map<std::string, double> losses;
    double wall_seconds = 0.0;
};

inline ReportRow row_from_result(const std::string& table, const std::string& label,
                                 const CellResult& r, int k_classes) {
    ReportRow row;
    row.table = table;
    row.label = label;
    row.cell_id = r.cell_id;
    row.seed = std::to_string(r.seed);
    row.ok = r.ok;
    row.error = r.error;
    row.ap.resize(std::size_t(k_classes));
    row.aph.resize(std::size_t(k_classes));
    if (r.ok) {
        for (const auto& ce : r.eval.per_class) {
            row.ap[std::size_t(ce.class_id)] = ce.ap;
            row.aph[std::size_t(ce.class_id)] = ce.aph;
        }
        row.macro_ap = r.eval.macro_ap;
        row.macro_aph = r.eval.macro_aph;
        row.losses = r.losses;
        row.wall_seconds = r.wall_seconds;
    }
    return row;
}

/// Mean over the seed rows of one configuration. The macro mean is recomputed
/// from the averaged per-class values so it stays the arithmetic mean of the
/// row's own entries.
inline ReportRow mean_row(const std::vector<ReportRow>& seed_rows) {
    ReportRow m = seed_rows.front();
    m.seed = "mean";
    int k = int(m.ap.size());
    int n = 0;
    std::vector<double> ap_sum(std::size_t(k), 0.0), aph_sum(std::size_t(k), 0.0);
    std::vector<int> ap_cnt(std::size_t(k), 0);
    std::map<std::string, double> loss_sum;
    double wall = 0.0;
    for (const auto& r : seed_rows) {
        if (!r.ok) continue;
        ++n;
        for (int c = 0; c < k; ++c)
            if (r.ap[std::size_t(c)]) {
                ap_sum[std::size_t(c)] += *r.ap[std::size_t(c)];
                aph_sum[std::size_t(c)] += *r.aph[std::size_t(c)];
                ++ap_cnt[std::size_t(c)];
            }
        for (const auto& [key, v] : r.losses) loss_sum[key] += v;
        wall += r.wall_seconds;
    }
    m.ok = n > 0;
    if (n == 0) return m;
    double macro_ap = 0.0, macro_aph = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        if (ap_cnt[std::size_t(c)] > 0) {
            m.ap[std::size_t(c)] = ap_sum[std::size_t(c)] / ap_cnt[std::size_t(c)];
            m.aph[std::size_t(c)] = aph_sum[std::size_t(c)] / ap_cnt[std::size_t(c)];
            macro_ap += *m.ap[std::size_t(c)];
            macro_aph += *m.aph[std::size_t(c)];
            ++present;
        } else {
            m.ap[std::size_t(c)] = std::nullopt;
            m.aph[std::size_t(c)] = std::nullopt;
        }
    }
    m.macro_ap = present ? macro_ap / present : 0.0;
    m.macro_aph = present ? macro_aph / present : 0.0;
    m.losses.clear();
    for (const auto& [key, v] : loss_sum) m.losses[key] = v / n;
    m.wall_seconds = wall / n;
    return m;
}

/// Expands raw cell results into per-table rows with seed means.
inline std::vector<ReportRow> build_report_rows(std::span<const CellResult> results,
                                                int k_classes) {
    std::vector<ReportRow> rows;
    for (const auto& table : ablation_tables()) {
        for (const auto& tr : table.rows) {
            std::vector<ReportRow> seed_rows;
            for (const auto& r : results)
                if (r.cell_id == tr.cell_id)
                    seed_rows.push_back(row_from_result(table.name, tr.label, r, k_classes));
            if (seed_rows.empty()) continue;
            for (const auto& r : seed_rows) rows.push_back(r);
            rows.push_back(mean_row(seed_rows));
        }
    }
    return rows;
}

inline json report_row_to_json(const ReportRow& r) {
    json j;
    j["table"] = r.table;
    j["label"] = r.label;
    j["cell"] = r.cell_id;
    j["seed"] = r.seed;
    j["ok"] = r.ok;
    if (!r.ok) j["error"] = r.error;
    json ap = json::array(), aph = json::array();
    for (std::size_t c = 0; c < r.ap.size(); ++c) {
        ap.push_back(r.ap[c] ? json(*r.ap[c]) : json(nullptr));
        aph.push_back(r.aph[c] ? json(*r.aph[c]) : json(nullptr));
    }
    j["ap"] = ap;
    j["aph"] = aph;
    j["macro_ap"] = r.macro_ap;
    j["macro_aph"] = r.macro_aph;
    j["losses"] = r.losses;
    j["wall_seconds"] = r.wall_seconds;
    return j;
}

inline void write_report_jsonl(const std::string& path, std::span<const ReportRow> rows) {
    std::ofstream os(path);
    if (!os) throw IoError(msg("cannot open report '", path, "'"));
    for (const auto& r : rows) os << report_row_to_json(r).dump() << "\n";
}

/// Aligned text tables, AP/APH as percentage points.
inline std::string render_report_text(std::span<const ReportRow> rows, int k_classes) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    std::string current;
    auto pct = [](std::optional<double> v) {
        if (!v) return std::string("   -  ");
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << std::setw(6) << 100.0 * *v;
        return s.str();
    };
    for (const auto& r : rows) {
        if (r.table != current) {
            current = r.table;
            os << "\n== " << current << " ==\n";
            os << std::left << std::setw(18) << "config" << std::setw(6) << "seed";
            for (int c = 0; c < k_classes; ++c) os << " ap" << c << "   ";
            os << " mAP   ";
            for (int c = 0; c < k_classes; ++c) os << " aph" << c << "  ";
            os << " mAPH" << "\n";
        }
        os << std::left << std::setw(18) << r.label << std::setw(6) << r.seed;
        if (!r.ok) {
            os << " FAILED: " << r.error << "\n";
            continue;
        }
        for (int c = 0; c < k_classes; ++c) os << pct(r.ap[std::size_t(c)]) << " ";
        os << pct(r.macro_ap) << " ";
        for (int c = 0; c < k_classes; ++c) os << pct(r.aph[std::size_t(c)]) << " ";
        os << pct(r.macro_aph) << "\n";
    }
    return os.str();
}

}  // namespace itkd
