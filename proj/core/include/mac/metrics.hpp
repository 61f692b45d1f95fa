#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "mac/geometry.hpp"

namespace mac::det {

struct ApMetrics {
    double ap50 = 0;       // AP at IoU 0.5
    double ap50_95 = 0;    // mean AP over IoU 0.50:0.05:0.95
    std::vector<double> thresholds;
    std::vector<double> per_threshold;
};

/// COCO-style thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// AP for one class at one IoU threshold with 101-point interpolated precision.
/// Predictions are ranked by score (ties keep image-id then input order); each
/// one greedily claims the unmatched ground truth of the same class with the
/// highest IoU >= threshold. Returns -1 when the class has no ground truth.
double average_precision(const std::map<std::int64_t, Detections>& predictions,
                         const std::map<std::int64_t, Annotations>& ground_truth, int class_id, double iou_threshold);

/// Mean over classes that have ground truth. Image ids of both maps must match.
ApMetrics evaluate_map(const std::map<std::int64_t, Detections>& predictions,
                       const std::map<std::int64_t, Annotations>& ground_truth, int num_classes,
                       const std::vector<double>& iou_thresholds = coco_iou_thresholds());

} // namespace mac::det
