#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "itkd/geometry.hpp"

namespace itkd {

struct Detection {
    Box3D box;
    double score = 0.0;
};

struct MatchRecord {
    double score = 0.0;
    bool matched = false;
    double heading_error = 0.0;  // radians in [0, pi], valid when matched
};

struct MatchResult {
    std::vector<MatchRecord> records;
    int gt_count = 0;
    int class_id = 0;
};

/// Greedy score-ordered matching of same-class detections against ground
/// truth. Each ground truth and each detection matches at most once.
inline MatchResult match_detections(std::span<const Detection> dets, std::span<const Box3D> gts,
                                    double iou_threshold, int class_id = 0) {
    std::vector<const Detection*> order;
    order.reserve(dets.size());
    for (const auto& d : dets) order.push_back(&d);
    std::stable_sort(order.begin(), order.end(),
                     [](const Detection* a, const Detection* b) { return a->score > b->score; });

    MatchResult result;
    result.gt_count = int(gts.size());
    result.class_id = class_id;
    std::vector<bool> taken(gts.size(), false);
    for (const Detection* d : order) {
        double best_iou = 0.0;
        int best = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            double iou = rotated_iou(d->box, gts[g]);
            if (iou >= iou_threshold && iou > best_iou) {
                best_iou = iou;
                best = int(g);
            }
        }
        MatchRecord rec;
        rec.score = d->score;
        if (best >= 0) {
            taken[std::size_t(best)] = true;
            rec.matched = true;
            rec.heading_error = std::fabs(wrap_angle(d->box.yaw - gts[std::size_t(best)].yaw));
        }
        result.records.push_back(rec);
    }
    return result;
}

/// Average precision with all-points interpolation (precision envelope).
/// With heading_weighted, each true positive contributes
/// max(0, 1 - heading_error/pi) to both the precision and recall numerators,
/// so the result is the heading-weighted APH and never exceeds plain AP.
inline double average_precision(std::span<const MatchRecord> records, int gt_count,
                                bool heading_weighted) {
    if (gt_count < 1 || records.empty()) return 0.0;

    std::vector<const MatchRecord*> order;
    order.reserve(records.size());
    for (const auto& r : records) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const MatchRecord* a, const MatchRecord* b) { return a->score > b->score; });

    std::vector<double> precision(order.size()), recall(order.size());
    double tp_weight = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (order[k]->matched) {
            double w = 1.0;
            if (heading_weighted)
                w = std::max(0.0, 1.0 - order[k]->heading_error / std::numbers::pi);
            tp_weight += w;
        }
        precision[k] = tp_weight / double(k + 1);
        recall[k] = tp_weight / double(gt_count);
    }

    // precision envelope: max precision at recall >= r
    for (std::size_t k = order.size() - 1; k-- > 0;)
        precision[k] = std::max(precision[k], precision[k + 1]);

    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    return ap;
}

struct ClassEval {
    int class_id = 0;
    int gt_count = 0;
    std::optional<double> ap;   // absent when the class has no ground truth
    std::optional<double> aph;
};

struct EvalSummary {
    std::vector<ClassEval> per_class;
    double macro_ap = 0.0;
    double macro_aph = 0.0;

    static EvalSummary from_matches(std::span<const std::vector<MatchRecord>> per_class_records,
                                    std::span<const int> per_class_gt) {
        EvalSummary s;
        double sum_ap = 0.0, sum_aph = 0.0;
        int present = 0;
        for (std::size_t c = 0; c < per_class_records.size(); ++c) {
            ClassEval ce;
            ce.class_id = int(c);
            ce.gt_count = per_class_gt[c];
            if (ce.gt_count >= 1) {
                ce.ap = average_precision(per_class_records[c], ce.gt_count, false);
                ce.aph = average_precision(per_class_records[c], ce.gt_count, true);
                sum_ap += *ce.ap;
                sum_aph += *ce.aph;
                ++present;
            }
            s.per_class.push_back(ce);
        }
        if (present > 0) {
            s.macro_ap = sum_ap / present;
            s.macro_aph = sum_aph / present;
        }
        return s;
    }
};

}  // namespace itkd
