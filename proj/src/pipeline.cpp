#include "mpcad/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace mpcad {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size())
        throw ConfigError("invalid value for '" + key + "': '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("invalid value for '" + key + "': '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string index_name(std::size_t i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%03zu", i);
    return buf;
}

[[noreturn]] void rethrow_named(const Error& e, const std::string& task) {
    const std::string prefix = "task '" + task + "'";
    const std::string what = e.what();
    if (what.rfind(prefix, 0) == 0) throw;
    const std::string msg = prefix + ": " + what;
    switch (e.kind()) {
        case ErrorKind::config: throw ConfigError(msg);
        case ErrorKind::data: throw DataError(msg);
        case ErrorKind::numerical: throw NumericalError(msg);
    }
    throw;
}

// ---------------------------------------------------------------------------
// PNM

struct PnmHeader {
    std::string magic;
    std::size_t width = 0, height = 0;
    std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& b, const fs::path& path) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < b.size()) {
            if (b[pos] == '#') {
                while (pos < b.size() && b[pos] != '\n') ++pos;
            } else if (std::isspace(b[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto token = [&] {
        skip_space();
        std::string t;
        while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') t += static_cast<char>(b[pos++]);
        if (t.empty()) throw DataError(path.string() + ": truncated image header");
        return t;
    };
    auto number = [&](const char* what) -> std::size_t {
        const std::string t = token();
        std::size_t v = 0;
        const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (ec != std::errc() || end != t.data() + t.size() || v == 0)
            throw DataError(path.string() + ": bad image " + what);
        return v;
    };
    PnmHeader h;
    h.magic = token();
    if (h.magic != "P5" && h.magic != "P6") throw DataError(path.string() + ": only binary PGM/PPM images are supported");
    h.width = number("width");
    h.height = number("height");
    if (number("maxval") != 255) throw DataError(path.string() + ": only 8-bit images are supported");
    if (pos >= b.size() || !std::isspace(b[pos])) throw DataError(path.string() + ": truncated image header");
    h.data_offset = pos + 1;
    const std::size_t channels = h.magic == "P6" ? 3 : 1;
    if (b.size() - h.data_offset < h.width * h.height * channels) throw DataError(path.string() + ": truncated image data");
    return h;
}

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("missing directory " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto& p = e.path();
        const auto ext = p.extension().string();
        if ((ext == ".ppm" || ext == ".pgm") && p.stem().extension().empty()) out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("no images in " + dir.string());
    return out;
}

std::vector<std::uint8_t> load_mask(const fs::path& path) {
    const Gray8 g = read_pgm8(path);
    std::vector<std::uint8_t> m(g.values.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = g.values[i] ? 1 : 0;
    return resize_mask(m, g.height, g.width, kOutputResolution, kOutputResolution);
}

void finish_labels(TestSet& t) {
    t.labels.clear();
    for (const auto& m : t.masks) t.labels.push_back(std::any_of(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
    out << text;
    if (!out) throw FormatError(FormatErrorKind::io, "write failed for " + path.string());
}

nlohmann::json matrix_json(const Mat& m) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        auto row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Continual evaluation with caching: a stored task never changes, so the branch maps
// of an item under a given task are computed once.

class StageEvaluator {
public:
    StageEvaluator(const Backbone& backbone, const std::vector<TaskData>& data) : backbone_(backbone), data_(data) {}

    std::vector<ScoredImage> score(const Detector& det, std::size_t set) {
        const TestSet& t = data_[set].test;
        if (keys_.size() <= set) keys_.resize(set + 1);
        auto& keys = keys_[set];
        if (keys.empty())
            for (std::size_t i = 0; i < t.size(); ++i)
                keys.push_back(t.feature_mode() ? t.grids[i] : backbone_.key_features(t.images[i]));
        std::vector<ScoredImage> out;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const TaskMatch m = det.identify(keys[i]);
            const auto key = std::make_tuple(set, i, m.index);
            auto it = maps_.find(key);
            if (it == maps_.end()) {
                BranchMaps b = t.feature_mode() ? det.branches(t.grids[i], m.index) : det.branches(t.images[i], m.index);
                it = maps_.emplace(key, std::move(b)).first;
            }
            out.push_back({m.index, m.score, it->second});
        }
        return out;
    }

private:
    const Backbone& backbone_;
    const std::vector<TaskData>& data_;
    std::vector<std::vector<FeatureGrid>> keys_;
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, BranchMaps> maps_;
};

AblationRow ablation_row(const std::string& name, const std::vector<ScoredImage>& s, const TestSet& t,
                         const MemoryBank& bank, std::size_t task, double alpha) {
    AblationRow r;
    r.task = name;
    r.fused = task_metrics(s, t, bank, task, alpha).pixel_aupr;
    r.without_anm = task_metrics(s, t, bank, task, alpha, false).pixel_aupr;
    r.visual_only = task_metrics(s, t, bank, task, 1.0).pixel_aupr;
    r.text_only = task_metrics(s, t, bank, task, 0.0).pixel_aupr;
    return r;
}

}  // namespace

// ============================================================================
// Configuration
// ============================================================================

std::string to_string(DataMode m) {
    switch (m) {
        case DataMode::synthetic: return "synthetic";
        case DataMode::images: return "images";
        case DataMode::features: return "features";
    }
    return "?";
}

DataMode data_mode_from_string(const std::string& s) {
    if (s == "synthetic") return DataMode::synthetic;
    if (s == "images") return DataMode::images;
    if (s == "features") return DataMode::features;
    throw ConfigError("unknown mode '" + s + "' (expected synthetic, images or features)");
}

std::vector<TaskSource> RunConfig::default_tasks() {
    std::vector<TaskSource> out;
    for (const auto& s : default_synthetic_suite()) out.push_back({s.name, {}, s.texture});
    return out;
}

void RunConfig::validate() const {
    backbone.validate();
    train.validate();
    if (tasks.empty()) throw ConfigError("no tasks configured");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto& t = tasks[i];
        if (t.name.empty() || t.name.find_first_of(" \t\r\n") != std::string::npos)
            throw ConfigError("task names must be nonempty single words");
        if (!seen.insert(t.name).second) throw ConfigError("duplicate task '" + t.name + "'");
        if (mode == DataMode::synthetic) {
            synthetic_spec(i).validate();
        } else if (t.path.empty() || !fs::is_directory(t.path)) {
            throw ConfigError("task '" + t.name + "': data directory '" + t.path.string() + "' does not exist");
        }
    }
    if (mode == DataMode::synthetic && backbone.image_channels != 3)
        throw ConfigError("synthetic tasks are RGB; backbone.image_channels must be 3");
}

TrainConfig RunConfig::effective_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
}

SyntheticTaskSpec RunConfig::synthetic_spec(std::size_t task) const {
    const auto& src = tasks.at(task);
    SyntheticTaskSpec s;
    s.name = src.name;
    s.texture = src.texture ? *src.texture : texture_from_string(src.name);
    s.train_images = synthetic.train_images;
    s.test_normal = synthetic.test_normal;
    s.test_anomalous = synthetic.test_anomalous;
    s.defect_area = synthetic.defect_area;
    s.region_levels = synthetic.region_levels;
    s.image_hw = backbone.input_hw;
    s.patch_size = backbone.patch_size;
    return s;
}

void apply_setting(RunConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
    const std::string key = trim(raw_key), v = trim(raw_value);
    auto sz = [&] { return parse_number<std::size_t>(key, v); };
    auto dbl = [&] { return parse_number<double>(key, v); };
    auto& b = cfg.backbone;
    auto& t = cfg.train;
    auto& s = cfg.synthetic;

    if (key.rfind("task.", 0) == 0) {
        const auto dot = key.rfind('.');
        const std::string name = key.substr(5, dot > 5 ? dot - 5 : 0), field = key.substr(dot + 1);
        auto it = std::find_if(cfg.tasks.begin(), cfg.tasks.end(), [&](const auto& x) { return x.name == name; });
        if (dot <= 5 || it == cfg.tasks.end()) throw ConfigError("unknown key '" + key + "' (task not listed in 'tasks')");
        if (field == "path") it->path = v;
        else if (field == "texture") it->texture = texture_from_string(v);
        else throw ConfigError("unknown key '" + key + "'");
        return;
    }

    if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "mode") cfg.mode = data_mode_from_string(v);
    else if (key == "out") cfg.out_dir = v;
    else if (key == "tasks") {
        cfg.tasks.clear();
        for (const auto& n : split_list(v)) cfg.tasks.push_back({n, {}, std::nullopt});
    }
    else if (key == "synthetic.train_images") s.train_images = sz();
    else if (key == "synthetic.test_normal") s.test_normal = sz();
    else if (key == "synthetic.test_anomalous") s.test_anomalous = sz();
    else if (key == "synthetic.defect_area") s.defect_area = dbl();
    else if (key == "synthetic.region_levels") s.region_levels = sz();
    else if (key == "epochs") t.epochs = sz();
    else if (key == "batch_size") t.batch_size = sz();
    else if (key == "learning_rate") t.learning_rate = dbl();
    else if (key == "momentum") t.momentum = dbl();
    else if (key == "sigma") t.sigma = dbl();
    else if (key == "lambda_alpha") t.lambda_alpha = dbl();
    else if (key == "lambda_beta") t.lambda_beta = dbl();
    else if (key == "alpha") t.alpha_fusion = dbl();
    else if (key == "k_sigmoid") t.k_sigmoid = dbl();
    else if (key == "delta_set") {
        t.delta_set.clear();
        for (const auto& d : split_list(v)) t.delta_set.push_back(parse_number<double>(key, d));
    }
    else if (key == "validation_fraction") t.validation_fraction = dbl();
    else if (key == "key_budget") t.key_budget = sz();
    else if (key == "bank_budget") t.bank_budget = sz();
    else if (key == "max_pairs") t.max_pairs = sz();
    else if (key == "backbone.layers") b.n_layers = sz();
    else if (key == "backbone.dim") b.dim = sz();
    else if (key == "backbone.heads") b.heads = sz();
    else if (key == "backbone.patch_size") b.patch_size = sz();
    else if (key == "backbone.input_hw") b.input_hw = sz();
    else if (key == "backbone.image_channels") b.image_channels = sz();
    else if (key == "backbone.mlp_hidden") b.mlp_hidden = sz();
    else if (key == "backbone.tap_key_layer") b.tap_layer_key = sz();
    else if (key == "backbone.tap_score_layer") b.tap_layer_score = sz();
    else if (key == "backbone.dropout") b.dropout_p = dbl();
    else if (key == "backbone.positional") b.positional = parse_bool(key, v);
    else if (key == "backbone.prompt_len") b.visual_prompt_len = sz();
    else if (key == "backbone.text_prompt_rows") b.text_prompt_rows = sz();
    else if (key == "backbone.text_dim") b.text_dim = sz();
    else if (key == "backbone.text_layers") b.text_layers = sz();
    else if (key == "backbone.text_heads") b.text_heads = sz();
    else if (key == "backbone.text_mlp_hidden") b.text_mlp_hidden = sz();
    else if (key == "backbone.seed") b.seed = parse_number<std::uint64_t>(key, v);
    else throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_run_config(std::istream& in, const fs::path& base_dir) {
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    RunConfig cfg;
    for (const auto& [k, v] : pairs)
        if (k == "tasks") apply_setting(cfg, k, v);
    for (const auto& [k, v] : pairs)
        if (k != "tasks") apply_setting(cfg, k, v);
    if (!base_dir.empty()) {
        for (auto& t : cfg.tasks)
            if (!t.path.empty() && t.path.is_relative()) t.path = base_dir / t.path;
        if (!cfg.out_dir.empty() && cfg.out_dir.is_relative()) cfg.out_dir = base_dir / cfg.out_dir;
    }
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    return parse_run_config(in, path.parent_path());
}

void write_run_config(std::ostream& out, const RunConfig& c) {
    const auto& b = c.backbone;
    const auto& t = c.train;
    out << "seed = " << c.seed << "\nmode = " << to_string(c.mode) << "\n";
    if (!c.out_dir.empty()) out << "out = " << c.out_dir.string() << "\n";
    out << "tasks = ";
    for (std::size_t i = 0; i < c.tasks.size(); ++i) out << (i ? "," : "") << c.tasks[i].name;
    out << "\n";
    for (const auto& task : c.tasks) {
        if (!task.path.empty()) out << "task." << task.name << ".path = " << task.path.string() << "\n";
        if (task.texture) out << "task." << task.name << ".texture = " << to_string(*task.texture) << "\n";
    }
    out << "synthetic.train_images = " << c.synthetic.train_images << "\n"
        << "synthetic.test_normal = " << c.synthetic.test_normal << "\n"
        << "synthetic.test_anomalous = " << c.synthetic.test_anomalous << "\n"
        << "synthetic.defect_area = " << fmt(c.synthetic.defect_area) << "\n"
        << "synthetic.region_levels = " << c.synthetic.region_levels << "\n"
        << "epochs = " << t.epochs << "\nbatch_size = " << t.batch_size << "\n"
        << "learning_rate = " << fmt(t.learning_rate) << "\nmomentum = " << fmt(t.momentum) << "\n"
        << "sigma = " << fmt(t.sigma) << "\nlambda_alpha = " << fmt(t.lambda_alpha) << "\n"
        << "lambda_beta = " << fmt(t.lambda_beta) << "\nalpha = " << fmt(t.alpha_fusion) << "\n"
        << "k_sigmoid = " << fmt(t.k_sigmoid) << "\ndelta_set = ";
    for (std::size_t i = 0; i < t.delta_set.size(); ++i) out << (i ? "," : "") << fmt(t.delta_set[i]);
    out << "\nvalidation_fraction = " << fmt(t.validation_fraction) << "\nkey_budget = " << t.key_budget
        << "\nbank_budget = " << t.bank_budget << "\nmax_pairs = " << t.max_pairs << "\n"
        << "backbone.layers = " << b.n_layers << "\nbackbone.dim = " << b.dim << "\nbackbone.heads = " << b.heads
        << "\nbackbone.patch_size = " << b.patch_size << "\nbackbone.input_hw = " << b.input_hw
        << "\nbackbone.image_channels = " << b.image_channels << "\nbackbone.mlp_hidden = " << b.mlp_hidden
        << "\nbackbone.tap_key_layer = " << b.tap_layer_key << "\nbackbone.tap_score_layer = " << b.tap_layer_score
        << "\nbackbone.dropout = " << fmt(b.dropout_p) << "\nbackbone.positional = " << (b.positional ? "true" : "false")
        << "\nbackbone.prompt_len = " << b.visual_prompt_len << "\nbackbone.text_prompt_rows = " << b.text_prompt_rows
        << "\nbackbone.text_dim = " << b.text_dim << "\nbackbone.text_layers = " << b.text_layers
        << "\nbackbone.text_heads = " << b.text_heads << "\nbackbone.text_mlp_hidden = " << b.text_mlp_hidden
        << "\nbackbone.seed = " << b.seed << "\n";
}

// ============================================================================
// Image files
// ============================================================================

Image read_pnm(const fs::path& path) {
    const auto bytes = read_file(path);
    const PnmHeader h = parse_pnm_header(bytes, path);
    Image img;
    img.channels = h.magic == "P6" ? 3 : 1;
    img.height = h.height;
    img.width = h.width;
    img.pixels.resize(img.channels * img.height * img.width);
    // file order is interleaved, storage is planar
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c)
                img.at(c, y, x) = bytes[h.data_offset + (y * h.width + x) * img.channels + c] / 255.0;
    return img;
}

void write_pnm(const Image& img, const fs::path& path) {
    if (img.channels != 1 && img.channels != 3) throw DataError("only 1- or 3-channel images can be written");
    const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                               std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double v = img.at(c, y, x);
                if (!(v >= 0.0 && v <= 1.0)) throw DataError("pixel value outside [0, 1]");
                bytes.push_back(static_cast<std::uint8_t>(std::lround(255.0 * v)));
            }
    write_file(path, bytes);
}

Gray8 read_pgm8(const fs::path& path) {
    const auto bytes = read_file(path);
    const PnmHeader h = parse_pnm_header(bytes, path);
    if (h.magic != "P5") throw DataError(path.string() + ": expected a grayscale PGM");
    Gray8 g{h.height, h.width, {}};
    g.values.assign(bytes.begin() + static_cast<long>(h.data_offset),
                    bytes.begin() + static_cast<long>(h.data_offset + h.width * h.height));
    return g;
}

void write_pgm8(const Gray8& g, const fs::path& path) {
    if (g.values.size() != g.height * g.width) throw DataError("PGM buffer size mismatch");
    const std::string header = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), g.values.begin(), g.values.end());
    write_file(path, bytes);
}

std::vector<std::uint8_t> resize_mask(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w,
                                      std::size_t out_h, std::size_t out_w) {
    if (mask.size() != h * w || h == 0 || w == 0) throw DataError("mask size mismatch");
    if (h == out_h && w == out_w) return mask;
    std::vector<std::uint8_t> out(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x)
            out[y * out_w + x] = mask[(y * h / out_h) * w + x * w / out_w];
    return out;
}

// ============================================================================
// Task data
// ============================================================================

TaskData load_task(const RunConfig& cfg, std::size_t index) {
    const TaskSource& src = cfg.tasks.at(index);
    TaskData d;
    d.name = src.name;
    try {
        switch (cfg.mode) {
            case DataMode::synthetic: {
                SyntheticTask s = gen_synthetic(cfg.synthetic_spec(index), cfg.seed);
                d.train_images = std::move(s.train);
                d.test.images = std::move(s.test_images);
                for (auto& m : s.test_masks)
                    d.test.masks.push_back(resize_mask(m, cfg.backbone.input_hw, cfg.backbone.input_hw,
                                                       kOutputResolution, kOutputResolution));
                finish_labels(d.test);
                break;
            }
            case DataMode::images: {
                d.train_images.task_name = src.name;
                for (const auto& p : list_images(src.path / "train")) {
                    d.train_images.images.push_back(read_pnm(p));
                    const Gray8 g = read_pgm8(p.parent_path() / (p.stem().string() + ".regions.pgm"));
                    RegionMask m{g.height, g.width, {}};
                    for (auto v : g.values) m.labels.push_back(v);
                    d.train_images.region_masks.push_back(std::move(m));
                }
                for (const auto& p : list_images(src.path / "test")) {
                    d.test.images.push_back(read_pnm(p));
                    d.test.masks.push_back(load_mask(p.parent_path() / (p.stem().string() + ".mask.pgm")));
                }
                finish_labels(d.test);
                break;
            }
            case DataMode::features: {
                FeatureFile train = ingest_features(src.path / "train.cadf");
                d.train_features.task_name = src.name;
                d.train_features.grids = std::move(train.grids);
                d.train_features.region_masks = std::move(train.region_masks);
                d.test.grids = ingest_features(src.path / "test.cadf").grids;
                for (std::size_t i = 0; i < d.test.grids.size(); ++i)
                    d.test.masks.push_back(load_mask(src.path / "test" / (index_name(i) + ".mask.pgm")));
                finish_labels(d.test);
                break;
            }
        }
    } catch (const Error& e) {
        rethrow_named(e, src.name);
    }
    return d;
}

void save_task_images(const SyntheticTask& task, const fs::path& dir) {
    fs::create_directories(dir / "train");
    fs::create_directories(dir / "test");
    for (std::size_t i = 0; i < task.train.images.size(); ++i) {
        write_pnm(task.train.images[i], dir / "train" / (index_name(i) + ".ppm"));
        const auto& m = task.train.region_masks[i];
        Gray8 g{m.height, m.width, {}};
        for (int l : m.labels) {
            if (l > 255) throw DataError("region label does not fit in 8 bits");
            g.values.push_back(static_cast<std::uint8_t>(l));
        }
        write_pgm8(g, dir / "train" / (index_name(i) + ".regions.pgm"));
    }
    for (std::size_t i = 0; i < task.test_images.size(); ++i) {
        const auto& img = task.test_images[i];
        write_pnm(img, dir / "test" / (index_name(i) + ".ppm"));
        Gray8 g{img.height, img.width, {}};
        for (auto v : task.test_masks[i]) g.values.push_back(v ? 255 : 0);
        write_pgm8(g, dir / "test" / (index_name(i) + ".mask.pgm"));
    }
}

void save_task_features(const SyntheticTask& task, const Backbone& backbone, const fs::path& dir) {
    fs::create_directories(dir / "test");
    FeatureFile train, test;
    for (const auto& img : task.train.images) train.grids.push_back(backbone.score_features(img, nullptr));
    train.region_masks = task.train.region_masks;
    for (const auto& img : task.test_images) test.grids.push_back(backbone.score_features(img, nullptr));
    write_features(train, dir / "train.cadf");
    write_features(test, dir / "test.cadf");
    for (std::size_t i = 0; i < task.test_images.size(); ++i) {
        const auto& img = task.test_images[i];
        Gray8 g{img.height, img.width, {}};
        for (auto v : task.test_masks[i]) g.values.push_back(v ? 255 : 0);
        write_pgm8(g, dir / "test" / (index_name(i) + ".mask.pgm"));
    }
}

// ============================================================================
// Evaluation
// ============================================================================

ScoredImage score_test_item(const Detector& det, const TestSet& set, std::size_t i,
                            std::optional<std::size_t> forced) {
    ScoredImage s;
    if (set.feature_mode()) {
        const auto r = forced ? TaskMatch{*forced, task_similarity(det.bank().at(*forced).keys, set.grids[i].flatten())}
                              : det.identify(set.grids[i]);
        s.task = r.index;
        s.similarity = r.score;
        s.maps = det.branches(set.grids[i], r.index);
    } else {
        const FeatureGrid keys = det.backbone().key_features(set.images[i]);
        const auto r = forced ? TaskMatch{*forced, task_similarity(det.bank().at(*forced).keys, keys.flatten())}
                              : det.identify(keys);
        s.task = r.index;
        s.similarity = r.score;
        s.maps = det.branches(set.images[i], r.index);
    }
    return s;
}

TaskMetrics task_metrics(const std::vector<ScoredImage>& scored, const TestSet& set, const MemoryBank& bank,
                         std::size_t true_task, double alpha, bool use_anm) {
    if (scored.size() != set.size()) throw DataError("scored items do not match the test set");
    std::vector<double> image_scores, pixel_scores;
    std::vector<int> pixel_labels;
    TaskMetrics m;
    for (std::size_t i = 0; i < scored.size(); ++i) {
        const ScoreMap fused = fuse_branches(scored[i].maps, bank.at(scored[i].task), alpha, use_anm);
        if (fused.values().size() != set.masks[i].size()) throw DataError("defect mask does not match the map size");
        image_scores.push_back(fused.max());
        pixel_scores.insert(pixel_scores.end(), fused.values().begin(), fused.values().end());
        pixel_labels.insert(pixel_labels.end(), set.masks[i].begin(), set.masks[i].end());
        if (scored[i].task == true_task) ++m.identified;
    }
    m.image_auroc = auroc(image_scores, set.labels);
    m.pixel_aupr = aupr(pixel_scores, pixel_labels);
    return m;
}

RunResult run_sequence(const RunConfig& cfg, const RunHooks& hooks) {
    cfg.validate();
    const TrainConfig train = cfg.effective_train();
    const double alpha = train.alpha_fusion;
    Backbone backbone(cfg.backbone);
    const std::size_t k = cfg.tasks.size();

    RunResult r;
    r.mode = to_string(cfg.mode);
    r.visual_prompt_tuning = cfg.mode != DataMode::features;
    r.image_auroc = EvalMatrix(k);
    r.pixel_aupr = EvalMatrix(k);

    std::vector<TaskData> data;
    StageEvaluator evaluator(backbone, data);
    std::size_t id_hits = 0, id_total = 0;
    for (std::size_t stage = 0; stage < k; ++stage) {
        const std::string& name = cfg.tasks[stage].name;
        r.task_names.push_back(name);
        data.push_back(load_task(cfg, stage));
        if (hooks.progress) hooks.progress("adapting " + name);
        AdaptReport report;
        try {
            r.bank = cfg.mode == DataMode::features
                         ? adapt_task_features(data.back().train_features, r.bank, train, backbone, &report)
                         : adapt_task(data.back().train_images, r.bank, train, backbone, &report);
        } catch (const Error& e) {
            rethrow_named(e, name);
        }
        r.reports.push_back(std::move(report));

        const Detector det(r.bank, backbone, alpha);
        id_hits = id_total = 0;
        for (std::size_t j = 0; j <= stage; ++j) {
            try {
                const auto scored = evaluator.score(det, j);
                const TaskMetrics m = task_metrics(scored, data[j].test, r.bank, j, alpha);
                r.image_auroc.set(stage, j, m.image_auroc);
                r.pixel_aupr.set(stage, j, m.pixel_aupr);
                id_hits += m.identified;
                id_total += scored.size();
                if (stage + 1 == k) r.ablation.push_back(ablation_row(data[j].name, scored, data[j].test, r.bank, j, alpha));
            } catch (const Error& e) {
                rethrow_named(e, data[j].name);
            }
        }
        if (hooks.progress) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "stage %zu/%zu done: %s AUROC %.4f, pixel AUPR %.4f", stage + 1, k,
                          name.c_str(), *r.image_auroc.get(stage, stage), *r.pixel_aupr.get(stage, stage));
            hooks.progress(buf);
        }
        if (hooks.after_stage) hooks.after_stage(stage, r.bank, backbone, data);
    }

    for (std::size_t j = 0; j < k; ++j)
        r.final_rows.push_back({r.task_names[j], *r.image_auroc.get(k - 1, j), *r.pixel_aupr.get(k - 1, j)});
    if (k >= 2) {
        r.fm_image_auroc = forgetting_measure(r.image_auroc);
        r.fm_pixel_aupr = forgetting_measure(r.pixel_aupr);
    }
    r.task_id_accuracy = static_cast<double>(id_hits) / static_cast<double>(id_total);
    r.backbone_checksum = backbone.checksum();
    return r;
}

RunResult evaluate_bank(const RunConfig& cfg, const MemoryBank& bank) {
    cfg.validate();
    const double alpha = cfg.train.alpha_fusion;
    Backbone backbone(cfg.backbone);
    for (const auto& t : bank.tasks()) backbone.register_words(t.text_prompt.class_name);
    const Detector det(bank, backbone, alpha);

    RunResult r;
    r.mode = to_string(cfg.mode);
    r.visual_prompt_tuning = std::any_of(bank.tasks().begin(), bank.tasks().end(),
                                         [](const auto& t) { return !t.visual_prompt.empty(); });
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        const TaskData d = load_task(cfg, i);
        const auto idx = bank.find(d.name);
        if (!idx) throw DataError("task '" + d.name + "' is not in the memory bank");
        try {
            std::vector<ScoredImage> scored;
            for (std::size_t j = 0; j < d.test.size(); ++j) scored.push_back(score_test_item(det, d.test, j));
            const TaskMetrics m = task_metrics(scored, d.test, bank, *idx, alpha);
            r.task_names.push_back(d.name);
            r.final_rows.push_back({d.name, m.image_auroc, m.pixel_aupr});
            r.ablation.push_back(ablation_row(d.name, scored, d.test, bank, *idx, alpha));
            hits += m.identified;
            total += scored.size();
        } catch (const Error& e) {
            rethrow_named(e, d.name);
        }
    }
    r.task_id_accuracy = static_cast<double>(hits) / static_cast<double>(total);
    r.bank = bank;
    r.backbone_checksum = backbone.checksum();
    return r;
}

void write_eval_matrix(std::ostream& out, const EvalMatrix& m, const std::vector<std::string>& names) {
    out << "after";
    for (const auto& n : names) out << "\t" << n;
    out << "\n";
    char buf[32];
    for (std::size_t s = 0; s < m.k(); ++s) {
        out << (s < names.size() ? names[s] : std::to_string(s));
        for (std::size_t t = 0; t < m.k(); ++t) {
            const auto v = m.get(s, t);
            if (v) {
                std::snprintf(buf, sizeof buf, "\t%.6f", *v);
                out << buf;
            } else {
                out << "\t-";
            }
        }
        out << "\n";
    }
}

void write_ablation(std::ostream& out, const std::vector<AblationRow>& rows) {
    out << "task\tfused\twithout_anm\tvisual_only\ttext_only\n";
    char buf[160];
    AblationRow avg;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%.6f\n", r.task.c_str(), r.fused, r.without_anm,
                      r.visual_only, r.text_only);
        out << buf;
        avg.fused += r.fused / rows.size();
        avg.without_anm += r.without_anm / rows.size();
        avg.visual_only += r.visual_only / rows.size();
        avg.text_only += r.text_only / rows.size();
    }
    if (rows.empty()) return;
    std::snprintf(buf, sizeof buf, "average\t%.6f\t%.6f\t%.6f\t%.6f\n", avg.fused, avg.without_anm, avg.visual_only,
                  avg.text_only);
    out << buf;
}

std::string run_metadata_json(const RunResult& r, const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["mode"] = r.mode;
    j["visual_prompt_tuning"] = r.visual_prompt_tuning;
    j["seed"] = cfg.seed;
    j["alpha"] = cfg.train.alpha_fusion;
    j["tap_score_layer"] = cfg.backbone.tap_layer_score;
    j["tasks"] = r.task_names;
    j["task_id_accuracy"] = r.task_id_accuracy;
    j["fm_image_auroc"] = r.fm_image_auroc ? nlohmann::ordered_json(*r.fm_image_auroc) : nullptr;
    j["fm_pixel_aupr"] = r.fm_pixel_aupr ? nlohmann::ordered_json(*r.fm_pixel_aupr) : nullptr;
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(r.backbone_checksum));
    j["backbone_checksum"] = hex;
    return j.dump(2) + "\n";
}

void write_run_outputs(const RunResult& r, const RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ostringstream results, auroc_m, aupr_m, abl, conf;
    write_results_table(results, r.final_rows, r.fm_image_auroc, r.fm_pixel_aupr);
    write_text(dir / "results.tsv", results.str());
    if (r.image_auroc.k() > 0) {
        write_eval_matrix(auroc_m, r.image_auroc, r.task_names);
        write_eval_matrix(aupr_m, r.pixel_aupr, r.task_names);
        write_text(dir / "image_auroc.tsv", auroc_m.str());
        write_text(dir / "pixel_aupr.tsv", aupr_m.str());
    }
    write_ablation(abl, r.ablation);
    write_text(dir / "ablation.tsv", abl.str());
    write_text(dir / "metadata.json", run_metadata_json(r, cfg));
    write_run_config(conf, cfg);
    write_text(dir / "config.cfg", conf.str());
    for (std::size_t i = 0; i < r.reports.size(); ++i) {
        std::ostringstream log;
        write_training_log(log, r.reports[i].epochs);
        write_text(dir / ("train_" + r.task_names[i] + ".tsv"), log.str());
    }
    save_bank(r.bank, dir / "bank.cmpb");
}

std::string bank_to_json(const MemoryBank& bank) {
    nlohmann::ordered_json j;
    j["version"] = kBankVersion;
    auto tasks = nlohmann::ordered_json::array();
    for (const auto& t : bank.tasks()) {
        nlohmann::ordered_json e;
        e["task_name"] = t.task_name;
        e["calib_v"] = {{"k", t.calib_v.k}, {"b", t.calib_v.b}};
        e["calib_t"] = {{"k", t.calib_t.k}, {"b", t.calib_t.b}};
        e["keys"] = matrix_json(t.keys.rows());
        e["text_prompt"] = {{"class_name", t.text_prompt.class_name}, {"rows", matrix_json(t.text_prompt.learnable)}};
        auto layers = nlohmann::json::array();
        for (const auto& l : t.visual_prompt.layers) layers.push_back(matrix_json(l));
        e["visual_prompt"] = std::move(layers);
        e["feature_bank"] = matrix_json(t.feature_bank.rows());
        tasks.push_back(std::move(e));
    }
    j["tasks"] = std::move(tasks);
    return j.dump() + "\n";
}

}  // namespace mpcad
