#pragma once

#include <algorithm>
#include <vector>

namespace mac {

/// Axis-aligned box in pixel coordinates; (x_min, y_min) inclusive corner,
/// (x_max, y_max) exclusive corner.
struct Box {
    float x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    float width() const { return x_max - x_min; }
    float height() const { return y_max - y_min; }
    float area() const { return std::max(0.0f, width()) * std::max(0.0f, height()); }
    float center_x() const { return 0.5f * (x_min + x_max); }
    float center_y() const { return 0.5f * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max; }
    bool inside(float w, float h) const { return x_min >= 0 && y_min >= 0 && x_max <= w && y_max <= h; }

    Box clipped(float w, float h) const {
        return {std::clamp(x_min, 0.0f, w), std::clamp(y_min, 0.0f, h), std::clamp(x_max, 0.0f, w),
                std::clamp(y_max, 0.0f, h)};
    }

    bool operator==(const Box&) const = default;
};

inline float iou(const Box& a, const Box& b) {
    const float ix = std::max(0.0f, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const float iy = std::max(0.0f, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const float inter = ix * iy;
    const float uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0f;
}

/// One labelled object: class id in [0, K) and its box.
struct Annotation {
    int class_id = 0;
    Box box;
    bool operator==(const Annotation&) const = default;
};

using Annotations = std::vector<Annotation>;

/// A predicted object with confidence in [0, 1].
struct Detection {
    int class_id = 0;
    Box box;
    float score = 0;
};

using Detections = std::vector<Detection>;

} // namespace mac
