#include "mac/metrics.hpp"

#include <algorithm>

#include "mac/error.hpp"

namespace mac::det {

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) {
        t.push_back(0.5 + 0.05 * i);
    }
    return t;
}

double average_precision(const std::map<std::int64_t, Detections>& predictions,
                         const std::map<std::int64_t, Annotations>& ground_truth, int class_id, double iou_threshold) {
    struct Ranked {
        float score;
        std::int64_t image;
        const Box* box;
    };
    std::vector<Ranked> ranked;
    for (const auto& [image, dets] : predictions) {
        for (const auto& d : dets) {
            if (d.class_id == class_id) {
                ranked.push_back({d.score, image, &d.box});
            }
        }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::map<std::int64_t, std::vector<const Box*>> gt_boxes;
    std::size_t n_gt = 0;
    for (const auto& [image, annots] : ground_truth) {
        for (const auto& a : annots) {
            if (a.class_id == class_id) {
                gt_boxes[image].push_back(&a.box);
                ++n_gt;
            }
        }
    }
    if (n_gt == 0) {
        return -1.0;
    }
    std::map<std::int64_t, std::vector<bool>> claimed;
    for (const auto& [image, boxes] : gt_boxes) {
        claimed[image].assign(boxes.size(), false);
    }

    std::vector<double> precision;
    std::vector<double> recall;
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (const auto& r : ranked) {
        int best = -1;
        double best_iou = iou_threshold;
        if (const auto it = gt_boxes.find(r.image); it != gt_boxes.end()) {
            auto& used = claimed[r.image];
            for (std::size_t g = 0; g < it->second.size(); ++g) {
                if (used[g]) {
                    continue;
                }
                const double v = iou(*r.box, *it->second[g]);
                if (v >= best_iou) {
                    best_iou = v;
                    best = static_cast<int>(g);
                }
            }
            if (best >= 0) {
                used[static_cast<std::size_t>(best)] = true;
            }
        }
        (best >= 0 ? tp : fp) += 1;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    // precision envelope
    for (std::size_t i = precision.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double sum = 0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
        if (it != recall.end()) {
            sum += precision[static_cast<std::size_t>(it - recall.begin())];
        }
    }
    return sum / 101.0;
}

ApMetrics evaluate_map(const std::map<std::int64_t, Detections>& predictions,
                       const std::map<std::int64_t, Annotations>& ground_truth, int num_classes,
                       const std::vector<double>& iou_thresholds) {
    if (predictions.size() != ground_truth.size() ||
        !std::equal(predictions.begin(), predictions.end(), ground_truth.begin(),
                    [](const auto& p, const auto& g) { return p.first == g.first; })) {
        throw InputError("prediction and ground-truth image ids do not match");
    }
    ApMetrics m;
    m.thresholds = iou_thresholds;
    for (const double t : iou_thresholds) {
        double sum = 0;
        int classes = 0;
        for (int c = 0; c < num_classes; ++c) {
            const double ap = average_precision(predictions, ground_truth, c, t);
            if (ap >= 0) {
                sum += ap;
                ++classes;
            }
        }
        m.per_threshold.push_back(classes > 0 ? sum / classes : 0.0);
    }
    for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
        if (std::abs(iou_thresholds[i] - 0.5) < 1e-9) {
            m.ap50 = m.per_threshold[i];
        }
    }
    if (!m.per_threshold.empty()) {
        double s = 0;
        for (const double v : m.per_threshold) {
            s += v;
        }
        m.ap50_95 = s / static_cast<double>(m.per_threshold.size());
    }
    return m;
}

} // namespace mac::det
