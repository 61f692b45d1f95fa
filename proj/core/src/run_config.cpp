#include "mac/run_config.hpp"

#include <fmt/format.h>

#include "mac/error.hpp"
#include "mac/tensor_io.hpp"

namespace mac {

const std::vector<ConfigKey>& config_registry() {
    static const std::vector<ConfigKey> keys{
        {"run.seed", "1", "master seed; every stage derives its seeds from it"},

        {"data.train_count", "512", "training scenes"},
        {"data.test_count", "128", "held-out scenes"},
        {"data.width", "128", "canvas width in px"},
        {"data.height", "128", "canvas height in px"},
        {"data.num_classes", "3", "object classes K"},
        {"data.min_objects", "1", "objects per scene, lower bound"},
        {"data.max_objects", "5", "objects per scene, upper bound"},
        {"data.min_size", "16.0", "shape extent lower bound in px"},
        {"data.max_size", "40.0", "shape extent upper bound in px"},
        {"data.min_area", "120.0", "minimum annotation box area in px^2"},
        {"data.max_rotation", "0.35", "maximum shape rotation in radians"},
        {"data.num_backgrounds", "4", "background texture families"},
        {"data.placement_attempts", "60", "rejection-sampling attempts per object"},

        {"sensor.mode", "spatial-degraded", "identity | spatial-degraded | scrambled-projection"},
        {"sensor.seed", "1234", "fixed sensor seed (mixing, fixed-pattern noise, projection)"},
        {"sensor.downsample", "2", "spatial-degraded: downsampling factor"},
        {"sensor.blur_sigma", "1.0", "spatial-degraded: Gaussian blur sigma in source px"},
        {"sensor.out_channels", "2", "spatial-degraded: output channels"},
        {"sensor.noise_std", "0.02", "fixed-pattern noise standard deviation"},
        {"sensor.projection_grid", "32", "scrambled-projection: pooled grid before projection"},
        {"sensor.projection_dim", "1024", "scrambled-projection: output length"},

        {"detector.base_channels", "16", "backbone width"},
        {"detector.lambda_bbox", "1.0", "box loss weight"},
        {"detector.lambda_cls", "1.0", "classification loss weight"},
        {"detector.lambda_mask", "0.0", "mask loss weight (no mask head; must stay 0)"},
        {"detector.focal_alpha", "0.25", "objectness focal loss alpha"},
        {"detector.focal_gamma", "2.0", "objectness focal loss gamma"},
        {"detector.nms_iou", "0.5", "class-wise NMS IoU threshold"},
        {"detector.score_threshold", "0.3", "inference score threshold"},

        {"source.iterations", "1500", "source training iterations"},
        {"source.batch_size", "16", "source training batch"},
        {"source.lr", "0.001", "source Adam learning rate"},
        {"source.hflip", "true", "random horizontal flips"},
        {"source.log_every", "50", "source log interval"},

        {"inversion.steps", "400", "gradient-descent steps per inversion"},
        {"inversion.step_size", "1.0", "fixed step size"},
        {"inversion.init_sigma", "0.02", "standard deviation of the Gaussian initialisation"},
        {"inversion.lambda_bbox", "1.0", "box loss weight during inversion"},
        {"inversion.lambda_cls", "1.0", "classification loss weight during inversion"},
        {"inversion.target_steps", "100", "steps for per-sample J_T inversions"},
        {"inversion.chunk", "32", "images inverted together"},

        {"layout.min_count", "1", "random layout: boxes per layout, lower bound"},
        {"layout.max_count", "5", "random layout: boxes per layout, upper bound"},
        {"layout.min_size", "16.0", "random layout: box side lower bound in px"},
        {"layout.max_size", "40.0", "random layout: box side upper bound in px"},

        {"corpus.count", "64", "J_S corpus size for FSR"},
        {"corpus.heldout", "16", "extra J_S items held out for reconstruction error"},
        {"corpus.max_final_ratio", "0.2", "convergence ceiling: final over initial inversion loss per corpus item"},

        {"calibrator.latent_channels", "16", "latent channel count"},
        {"calibrator.codebook_size", "64", "codebook entries p"},
        {"calibrator.beta", "0.25", "commitment weight"},
        {"calibrator.adapter_channels", "16", "adapter output channels (spatial sensors)"},
        {"calibrator.flat_adapter_channels", "4", "adapter output channels (flat sensors)"},
        {"calibrator.adapter_grid", "32", "adapter grid side for flat sensors"},

        {"fsr.steps", "2000", "reconstructor training steps"},
        {"fsr.batch_size", "16", "reconstructor batch"},
        {"fsr.lr", "0.001", "reconstructor Adam learning rate"},
        {"fsr.log_every", "100", "reconstructor log interval"},

        {"target.mode", "mac-supervised", "naive | mac-supervised | mac-self | mac-semi(f)"},
        {"target.seed", "0", "target run seed (combined with run.seed)"},
        {"target.fsr", "true", "initialise codebook and decoder from the reconstructor"},
        {"target.two_stage", "true", "source-initialised S, frozen during stage 1"},
        {"target.dss", "true", "decayed semantic supervision toward J_T"},
        {"target.sia", "true", "skipped inverted attention loss"},
        {"target.freeze_codebook", "false", "keep the transferred codebook fixed"},
        {"target.iterations", "400", "target training iterations"},
        {"target.batch_size", "16", "target training batch"},
        {"target.lr", "0.001", "target Adam learning rate"},
        {"target.stage1_fraction", "0.3", "share of iterations with S frozen"},
        {"target.decay", "0.9999", "DSS decay factor d"},
        {"target.ssim_range", "1.0", "SSIM dynamic range L"},
        {"target.pseudo_threshold", "0.5", "pseudo ground truth confidence threshold"},
        {"target.log_every", "10", "target log interval"},

        {"sia.fraction", "0.1", "share of image cells masked"},
        {"sia.cadence", "1", "masked pass every n iterations"},
        {"sia.supplement", "true", "add the masked loss (true) or replace L_S with it (false)"},

        {"eval.score_threshold", "0.05", "score threshold for AP evaluation"},
        {"figures.samples", "2", "training samples captured for figures"},

        {"ablate.seeds", "3", "seeds per ladder rung"},
        {"ablate.semi_fraction", "0.1", "manual-label share of the semi-supervised rung"},
        {"ablate.jobs", "1", "concurrent run processes"},
    };
    return keys;
}

namespace {

const ConfigKey* find_key(const std::string& key) {
    for (const auto& k : config_registry()) {
        if (k.key == key) {
            return &k;
        }
    }
    return nullptr;
}

/// Parses the value with the type implied by the default: digits only is an
/// integer, digits with a point or exponent a real.
void check_value(const ConfigKey& spec, const std::string& value) {
    KeyValues probe;
    probe.set("v", value);
    const auto& d = spec.default_value;
    if (d == "true" || d == "false") {
        (void)probe.get<bool>("v");
    } else if (d.find_first_not_of("0123456789") == std::string::npos) {
        (void)probe.get<long long>("v");
    } else if (d.find_first_not_of("0123456789.e-") == std::string::npos && d.find_first_of(".e") != std::string::npos) {
        (void)probe.get<double>("v");
    }
    if (spec.key == "target.mode") {
        (void)train::TrainMode::parse(value);
    } else if (spec.key == "sensor.mode") {
        (void)synth::sensor_mode_from_string(value);
    }
}

} // namespace

RunConfig::RunConfig() {
    for (const auto& k : config_registry()) {
        values_.set(k.key, k.default_value);
    }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    RunConfig c;
    c.apply(KeyValues::load(path));
    return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto* spec = find_key(key);
    if (!spec) {
        throw ConfigError(fmt::format("unknown configuration key '{}'", key));
    }
    try {
        check_value(*spec, value);
    } catch (const Error& e) {
        throw ConfigError(fmt::format("bad value '{}' for {}: {}", value, key, e.what()));
    }
    values_.set(key, value);
}

void RunConfig::apply(const KeyValues& overrides) {
    for (const auto& [k, v] : overrides.entries()) {
        set(k, v);
    }
}

void RunConfig::assign(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError(fmt::format("expected key=value, got '{}'", assignment));
    }
    const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

synth::GenConfig RunConfig::gen() const {
    auto g = synth::GenConfig::from_kv(values_.subtree("data"));
    g.validate();
    return g;
}

synth::SensorConfig RunConfig::sensor() const {
    auto s = synth::SensorConfig::from_kv(values_.subtree("sensor"));
    s.validate();
    return s;
}

det::DetectorConfig RunConfig::detector() const {
    auto d = det::DetectorConfig::from_kv(values_.subtree("detector"));
    const auto g = gen();
    d.in_channels = 3;
    d.width = g.width;
    d.height = g.height;
    d.num_classes = g.num_classes;
    d.validate();
    return d;
}

det::SourceSchedule RunConfig::source_schedule() const {
    det::SourceSchedule s;
    s.iterations = get<int>("source.iterations");
    s.batch_size = get<int>("source.batch_size");
    s.lr = get<double>("source.lr");
    s.hflip = get<bool>("source.hflip");
    s.log_every = get<int>("source.log_every");
    return s;
}

std::uint64_t RunConfig::source_seed() const {
    return mix_seed(seed(), 0x5012ce);
}

inv::InversionConfig RunConfig::inversion() const {
    inv::InversionConfig c;
    c.steps = get<int>("inversion.steps");
    c.step_size = get<double>("inversion.step_size");
    c.init_sigma = get<double>("inversion.init_sigma");
    c.seed = mix_seed(seed(), 0x1a7e);
    c.weights.bbox = get<double>("inversion.lambda_bbox");
    c.weights.cls = get<double>("inversion.lambda_cls");
    c.validate();
    return c;
}

inv::LayoutConfig RunConfig::layout() const {
    inv::LayoutConfig l;
    const auto g = gen();
    l.width = g.width;
    l.height = g.height;
    l.num_classes = g.num_classes;
    l.min_count = get<int>("layout.min_count");
    l.max_count = get<int>("layout.max_count");
    l.min_size = get<float>("layout.min_size");
    l.max_size = get<float>("layout.max_size");
    l.validate();
    return l;
}

inv::CorpusOptions RunConfig::corpus() const {
    inv::CorpusOptions o;
    o.count = get<int>("corpus.count");
    o.layout_seed = mix_seed(seed(), 0x1a40);
    o.init_seed = mix_seed(seed(), 0x1a41);
    o.chunk = get<int>("inversion.chunk");
    return o;
}

train::TargetSemanticsOptions RunConfig::target_semantics() const {
    train::TargetSemanticsOptions o;
    o.inversion = inversion();
    o.inversion.steps = get<int>("inversion.target_steps");
    o.inversion.seed = mix_seed(seed(), 0x7a26);
    o.inversion.validate();
    o.chunk = get<int>("inversion.chunk");
    return o;
}

calib::CalibratorConfig RunConfig::calibrator() const {
    const auto g = gen();
    auto c = calib::CalibratorConfig::for_sensor(sensor(), g.width, g.height);
    c.latent_channels = get<int>("calibrator.latent_channels");
    c.codebook_size = get<int>("calibrator.codebook_size");
    c.beta = get<double>("calibrator.beta");
    c.adapter_channels = get<int>(c.flat_input() ? "calibrator.flat_adapter_channels" : "calibrator.adapter_channels");
    c.adapter_grid = get<int>("calibrator.adapter_grid");
    c.validate();
    return c;
}

fsr::ReconstructorSchedule RunConfig::fsr_schedule() const {
    fsr::ReconstructorSchedule s;
    s.steps = get<int>("fsr.steps");
    s.batch_size = get<int>("fsr.batch_size");
    s.lr = get<double>("fsr.lr");
    s.log_every = get<int>("fsr.log_every");
    return s;
}

std::uint64_t RunConfig::fsr_seed() const {
    return mix_seed(seed(), 0xf5a);
}

train::TargetSpec RunConfig::target_spec() const {
    train::TargetSpec t;
    t.mode = train::TrainMode::parse(get<std::string>("target.mode"));
    t.techniques.fsr = get<bool>("target.fsr");
    t.techniques.two_stage = get<bool>("target.two_stage");
    t.techniques.dss = get<bool>("target.dss");
    t.techniques.sia = get<bool>("target.sia");
    t.techniques.freeze_codebook = get<bool>("target.freeze_codebook");
    auto& s = t.schedule;
    s.iterations = get<int>("target.iterations");
    s.batch_size = get<int>("target.batch_size");
    s.lr = get<double>("target.lr");
    s.stage1_fraction = get<double>("target.stage1_fraction");
    s.decay = get<double>("target.decay");
    s.ssim_range = get<double>("target.ssim_range");
    s.pseudo_threshold = get<float>("target.pseudo_threshold");
    s.log_every = get<int>("target.log_every");
    s.sia.fraction = get<double>("sia.fraction");
    s.sia.cadence = get<int>("sia.cadence");
    s.sia.supplement = get<bool>("sia.supplement");
    s.sia.validate();
    t.seed = mix_seed(seed(), 0x7a00 + get<unsigned long long>("target.seed"));
    t.calibrator = calibrator();
    t.detector = detector();
    return t;
}

std::string RunConfig::documentation() {
    std::string out;
    for (const auto& k : config_registry()) {
        out += fmt::format("{:<32} = {:<18} # {}\n", k.key, k.default_value, k.doc);
    }
    return out;
}

} // namespace mac
