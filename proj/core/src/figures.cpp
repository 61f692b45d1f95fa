#include "mac/figures.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include <fmt/format.h>
#include <json.hpp>
#include <png.h>

#include "mac/error.hpp"
#include "mac/sia.hpp"
#include "mac/tensor_io.hpp"

namespace mac::fig {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

nlohmann::json boxes_json(const Annotations& boxes) {
    auto arr = nlohmann::json::array();
    for (const auto& a : boxes) {
        arr.push_back({{"class_id", a.class_id}, {"box", {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max}}});
    }
    return arr;
}

std::vector<Box> boxes_from_json(const nlohmann::json& j) {
    std::vector<Box> out;
    for (const auto& a : j) {
        const auto b = a.at("box").get<std::vector<float>>();
        out.push_back({b.at(0), b.at(1), b.at(2), b.at(3)});
    }
    return out;
}

} // namespace

void write_png(const fs::path& path, const torch::Tensor& pixels) {
    if (pixels.dim() != 3 || (pixels.size(2) != 1 && pixels.size(2) != 3)) {
        throw InputError("write_png expects [H, W, 1|3] pixels");
    }
    const auto data = pixels.to(torch::kUInt8).contiguous();
    const auto h = static_cast<png_uint_32>(data.size(0));
    const auto w = static_cast<png_uint_32>(data.size(1));
    const int channels = static_cast<int>(data.size(2));
    File file(std::fopen(path.c_str(), "wb"));
    if (!file) {
        throw InputError("cannot write " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw InputError("libpng failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, w, h, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const auto* base = data.data_ptr<std::uint8_t>();
    for (png_uint_32 y = 0; y < h; ++y) {
        png_write_row(png, const_cast<png_bytep>(base + static_cast<std::size_t>(y) * w * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

torch::Tensor read_png(const fs::path& path) {
    File file(std::fopen(path.c_str(), "rb"));
    if (!file) {
        throw LoadError("cannot read " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("libpng failed reading " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const auto w = png_get_image_width(png, info);
    const auto h = png_get_image_height(png, info);
    const int channels = png_get_channels(png, info);
    auto out = torch::empty({static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), channels}, torch::kUInt8);
    auto* base = out.data_ptr<std::uint8_t>();
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, base + static_cast<std::size_t>(y) * w * channels, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

torch::Tensor to_rgb8(const torch::Tensor& image) {
    return (image.detach().clamp(0, 1) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
}

torch::Tensor heatmap8(const torch::Tensor& map) {
    auto m = map.detach().to(torch::kFloat32);
    const float peak = m.max().item<float>();
    m = peak > 0 ? m / peak : torch::zeros_like(m);
    // black -> red -> yellow -> white
    const auto r = (m * 3).clamp(0, 1);
    const auto g = (m * 3 - 1).clamp(0, 1);
    const auto b = (m * 3 - 2).clamp(0, 1);
    return (torch::stack({r, g, b}, 2) * 255.0).round().to(torch::kUInt8).contiguous();
}

torch::Tensor mask8(const torch::Tensor& mask) {
    return (mask.detach() > 0.5).to(torch::kUInt8).mul(255).unsqueeze(2).contiguous();
}

torch::Tensor target8(const torch::Tensor& x) {
    auto t = x.detach().to(torch::kFloat32);
    if (t.size(1) == 1 && t.size(2) == 1) {
        const auto n = t.numel();
        const auto side = static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(n))));
        t = torch::cat({t.flatten(), torch::zeros({side * side - n})}).view({1, side, side});
    }
    const auto lo = t.min();
    const auto hi = t.max();
    const auto span = (hi - lo).item<float>();
    auto norm = span > 0 ? (t - lo) / span : torch::zeros_like(t);
    if (norm.size(0) >= 3) {
        norm = norm.slice(0, 0, 3);
    } else if (norm.size(0) == 2) {
        norm = torch::stack({norm[0], norm[1], torch::zeros_like(norm[0])});
    } else {
        norm = norm.expand({3, norm.size(1), norm.size(2)});
    }
    return to_rgb8(norm);
}

void draw_boxes(torch::Tensor& rgb, const std::vector<Box>& boxes, std::array<std::uint8_t, 3> color) {
    const auto h = rgb.size(0);
    const auto w = rgb.size(1);
    auto acc = rgb.accessor<std::uint8_t, 3>();
    const auto put = [&](std::int64_t x, std::int64_t y) {
        if (x >= 0 && y >= 0 && x < w && y < h) {
            for (int c = 0; c < 3; ++c) {
                acc[y][x][c] = color[static_cast<std::size_t>(c)];
            }
        }
    };
    for (const auto& b : boxes) {
        const auto x0 = static_cast<std::int64_t>(std::floor(b.x_min));
        const auto y0 = static_cast<std::int64_t>(std::floor(b.y_min));
        const auto x1 = static_cast<std::int64_t>(std::ceil(b.x_max)) - 1;
        const auto y1 = static_cast<std::int64_t>(std::ceil(b.y_max)) - 1;
        for (auto x = x0; x <= x1; ++x) {
            put(x, y0);
            put(x, y1);
        }
        for (auto y = y0; y <= y1; ++y) {
            put(x0, y);
            put(x1, y);
        }
    }
}

FigureBundle capture_figures(train::TargetModel& model, const synth::Dataset& train, int count, double sia_fraction,
                             const train::SemanticsCache* semantics, const std::vector<train::LabelSource>& plan,
                             const inv::ForegroundSemantics* js) {
    FigureBundle bundle;
    model.calibrator.eval();
    model.detector->eval();
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(0, count)), train.size());
    const auto& cfg = model.detector->config();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = train.samples[i];
        FigureSample f;
        f.id = s.id;
        f.x = s.target;
        f.truth = s.annotations;
        auto j = model.calibrator.calibrate(s.target).image.detach().requires_grad_(true);
        const auto head = model.detector->forward(j);
        const auto targets = det::encode_targets(std::span<const Annotations>(&s.annotations, 1), cfg);
        const auto loss = det::source_loss(head, targets, cfg);
        const auto grads = torch::autograd::grad({loss.total}, {j, head.tap});
        f.j = j.detach()[0];
        f.grad = grads[0][0].abs().sum(0);
        f.mask = sia::sia_mask(grads[1][0], cfg.height, cfg.width, sia_fraction);
        f.detections = det::infer(model.detector, f.j, cfg.score_threshold)[0];
        if (semantics && i < plan.size() && semantics->contains(s.id, plan[i])) {
            f.jt = semantics->at(s.id, plan[i]);
        }
        bundle.samples.push_back(std::move(f));
    }
    if (js) {
        bundle.js = js->image;
        bundle.js_layout = js->layout;
    }
    return bundle;
}

void save_bundle(const fs::path& dir, const FigureBundle& bundle) {
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["samples"] = nlohmann::json::array();
    std::vector<torch::Tensor> tensors;
    const auto add = [&](const torch::Tensor& t) -> long long {
        if (!t.defined()) {
            return -1;
        }
        tensors.push_back(t.detach().to(torch::kFloat32).contiguous());
        return static_cast<long long>(tensors.size()) - 1;
    };
    for (const auto& s : bundle.samples) {
        auto dets = nlohmann::json::array();
        for (const auto& d : s.detections) {
            dets.push_back({{"class_id", d.class_id},
                            {"score", d.score},
                            {"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}}});
        }
        meta["samples"].push_back({{"id", s.id},
                                   {"x", add(s.x)},
                                   {"j", add(s.j)},
                                   {"grad", add(s.grad)},
                                   {"mask", add(s.mask)},
                                   {"jt", add(s.jt)},
                                   {"truth", boxes_json(s.truth)},
                                   {"detections", dets}});
    }
    meta["js"] = add(bundle.js);
    meta["js_layout"] = boxes_json(bundle.js_layout);
    save_tensor_file(dir / "figures.bin", tensors);
    std::ofstream(dir / "figures.json", std::ios::trunc) << meta.dump(1) << '\n';
}

RenderReport render_figures(const fs::path& run_dir, const fs::path& out_dir) {
    RenderReport report;
    const auto meta_path = run_dir / "figures.json";
    if (!fs::exists(meta_path) || !fs::exists(run_dir / "figures.bin")) {
        report.skipped.push_back("all panels: no figures.json / figures.bin in " + run_dir.string());
        return report;
    }
    nlohmann::json meta;
    std::ifstream(meta_path) >> meta;
    const auto tensors = load_tensor_file(run_dir / "figures.bin");
    const auto tensor = [&](const nlohmann::json& slot) -> torch::Tensor {
        const auto i = slot.get<long long>();
        return i >= 0 && i < static_cast<long long>(tensors.size()) ? tensors[static_cast<std::size_t>(i)]
                                                                    : torch::Tensor();
    };
    fs::create_directories(out_dir);
    const auto emit = [&](const std::string& name, const torch::Tensor& pixels) {
        const auto path = out_dir / name;
        write_png(path, pixels);
        report.written.push_back(path);
    };
    for (const auto& s : meta.at("samples")) {
        const auto prefix = fmt::format("sample{:06d}_", s.at("id").get<long long>());
        const auto x = tensor(s.at("x"));
        const auto j = tensor(s.at("j"));
        const auto grad = tensor(s.at("grad"));
        const auto mask = tensor(s.at("mask"));
        const auto jt = tensor(s.at("jt"));
        const auto skip = [&](const std::string& panel) { report.skipped.push_back(prefix + panel); };
        x.defined() ? emit(prefix + "x.png", target8(x)) : skip("x");
        j.defined() ? emit(prefix + "j.png", to_rgb8(j)) : skip("j");
        grad.defined() ? emit(prefix + "grad.png", heatmap8(grad)) : skip("grad");
        mask.defined() ? emit(prefix + "mask.png", mask8(mask)) : skip("mask");
        if (j.defined()) {
            auto overlay = to_rgb8(j);
            draw_boxes(overlay, boxes_from_json(s.at("truth")), {0, 255, 0});
            draw_boxes(overlay, boxes_from_json(s.at("detections")), {255, 0, 0});
            emit(prefix + "detections.png", overlay);
        } else {
            skip("detections");
        }
        jt.defined() ? emit(prefix + "jt.png", heatmap8(jt.abs().sum(0))) : skip("jt");
    }
    const auto js = tensor(meta.at("js"));
    if (js.defined()) {
        emit("js.png", heatmap8(js.abs().sum(0)));
    } else {
        report.skipped.push_back("js");
    }
    return report;
}

} // namespace mac::fig
