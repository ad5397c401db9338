#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "itkd/detector.hpp"
#include "itkd/distill.hpp"
#include "itkd/scene.hpp"

namespace itkd {

struct OptimSection {
    double lr_max = 0.003;
    double lr_min = 0.0;
    int epochs = 20;
    int batch = 8;
};

struct RunSection {
    int train_scenes = 500;
    int eval_scenes = 100;
    std::uint64_t train_seed0 = 1000;
    std::uint64_t eval_seed0 = 900000;
    std::vector<std::uint64_t> seeds = {11, 22, 33};
    double score_threshold = 0.1;
    int max_dets = 100;
    std::vector<double> iou_thresholds = {0.5, 0.25, 0.25};
    bool teacher_cache = true;
    int jobs = 1;
    int eval_every = 1;  // epochs between teacher eval passes
};

/// Everything a run needs; (RunConfig, seed) fully determines the results.
struct RunConfig {
    GenConfig gen;
    GridConfig grid;
    NetConfig net;  // teacher widths; width_divisor applies to the student
    DistillConfig distill;
    OptimSection optim;
    RunSection run;

    void validate() const {
        net.validate();
        distill.validate();
        if (net.k_classes != gen.num_classes())
            throw ConfigError(msg("config: net k_classes ", net.k_classes, " != gen templates ",
                                  gen.num_classes()));
        if (int(run.iou_thresholds.size()) != net.k_classes)
            throw ConfigError(msg("config: need ", net.k_classes, " iou thresholds, got ",
                                  run.iou_thresholds.size()));
        if (0.5 * grid.hw * grid.cell < gen.range)
            throw ConfigError(msg("config: grid half-extent ", 0.5 * grid.hw * grid.cell,
                                  " m does not cover the scene range ", gen.range, " m"));
        if (gen.min_boxes < 0 || gen.max_boxes < gen.min_boxes)
            throw ConfigError("config: invalid box count bounds");
        if (run.seeds.empty()) throw ConfigError("config: at least one seed is required");
        if (optim.batch < 1 || optim.epochs < 0) throw ConfigError("config: invalid optim section");
        // dataset splits must draw from disjoint seed ranges
        std::uint64_t t0 = run.train_seed0, t1 = t0 + std::uint64_t(run.train_scenes);
        std::uint64_t e0 = run.eval_seed0, e1 = e0 + std::uint64_t(run.eval_scenes);
        if (t0 < e1 && e0 < t1)
            throw ConfigError(msg("config: train seed range [", t0, ", ", t1,
                                  ") overlaps eval seed range [", e0, ", ", e1, ")"));
    }

    NetConfig teacher_net() const {
        NetConfig n = net;
        n.width_divisor = 1;
        return n;
    }

    NetConfig student_net() const { return net; }
};

/// The published-scale settings, kept as a named profile. Far too large for
/// the test suite; documented for completeness.
inline RunConfig paper_scale_config() {
    RunConfig c;
    c.gen.range = 74.88;
    c.gen.max_boxes = 24;
    c.grid.hw = 468;
    c.grid.cell = 0.32;
    c.net.ct = 384;
    c.net.blocks = {96, 192, 384};
    c.net.head_hidden = 64;
    c.net.width_divisor = 4;
    c.distill.enc_filters = {128, 64, 32};
    c.distill.dec_filters = {64, 128, 384};
    c.optim.epochs = 36;
    c.optim.batch = 32;
    c.run.train_scenes = 798;
    c.run.eval_scenes = 202;
    return c;
}

// ---------------------------------------------------------------------------
// Sectioned key-value config files
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline double to_double(const std::string& v, const std::string& where) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(msg("config: bad number '", v, "' for ", where));
    }
}

inline int to_int(const std::string& v, const std::string& where) {
    try {
        std::size_t used = 0;
        int i = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError(msg("config: bad integer '", v, "' for ", where));
    }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& where) {
    try {
        std::size_t used = 0;
        auto u = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError(msg("config: bad integer '", v, "' for ", where));
    }
}

inline bool to_bool(const std::string& v, const std::string& where) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(msg("config: bad boolean '", v, "' for ", where));
}

}  // namespace detail

inline BufferDirection buffer_from_string(const std::string& v) {
    if (v == "s2t") return BufferDirection::StudentToTeacher;
    if (v == "t2s") return BufferDirection::TeacherToStudent;
    if (v == "midpoint") return BufferDirection::Midpoint;
    throw ConfigError(msg("config: unknown buffer direction '", v, "' (s2t, t2s, midpoint)"));
}

inline ReconMode recon_from_string(const std::string& v) {
    if (v == "interchange") return ReconMode::Interchange;
    if (v == "self") return ReconMode::SelfRecon;
    throw ConfigError(msg("config: unknown reconstruction mode '", v, "' (interchange, self)"));
}

inline AxisPolicy axis_policy_from_string(const std::string& v) {
    if (v == "default") return AxisPolicy::HeadObjectAllChannel;
    if (v == "formula-literal") return AxisPolicy::FormulaLiteralChannel;
    throw ConfigError(msg("config: unknown axis policy '", v, "' (default, formula-literal)"));
}

inline BaselineKd baseline_from_string(const std::string& v) {
    if (v == "none") return BaselineKd::None;
    if (v == "hinton-kl") return BaselineKd::HintonKl;
    if (v == "plain-l1") return BaselineKd::PlainL1;
    throw ConfigError(msg("config: unknown baseline '", v, "' (none, hinton-kl, plain-l1)"));
}

inline RunConfig parse_config(std::istream& is) {
    RunConfig c;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(msg("config line ", lineno, ": malformed section"));
            section = s.substr(1, s.size() - 2);
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(msg("config line ", lineno, ": expected key = value"));
        std::string key = detail::trim(s.substr(0, eq));
        std::string val = detail::trim(s.substr(eq + 1));
        std::string where = section + "." + key;

        if (section == "gen") {
            if (key == "range") c.gen.range = detail::to_double(val, where);
            else if (key == "min_boxes") c.gen.min_boxes = detail::to_int(val, where);
            else if (key == "max_boxes") c.gen.max_boxes = detail::to_int(val, where);
            else if (key == "size_jitter") c.gen.size_jitter = detail::to_double(val, where);
            else if (key == "base_points") c.gen.base_points = detail::to_int(val, where);
            else if (key == "ref_dist") c.gen.ref_dist = detail::to_double(val, where);
            else if (key == "min_points") c.gen.min_points = detail::to_int(val, where);
            else if (key == "clutter_points") c.gen.clutter_points = detail::to_int(val, where);
            else if (key == "surface_noise") c.gen.surface_noise = detail::to_double(val, where);
            else if (key == "min_center_dist") c.gen.min_center_dist = detail::to_double(val, where);
            else if (key == "max_retries") c.gen.max_retries = detail::to_int(val, where);
            else if (key == "templates") {
                c.gen.templates.clear();
                for (const auto& t : detail::split(val, ',')) {
                    auto dims = detail::split(t, ':');
                    if (dims.size() != 3)
                        throw ConfigError(msg("config: template '", t, "' must be l:w:h"));
                    c.gen.templates.push_back({detail::to_double(dims[0], where),
                                               detail::to_double(dims[1], where),
                                               detail::to_double(dims[2], where)});
                }
            } else throw ConfigError(msg("config: unknown key '", where, "'"));
        } else if (section == "grid") {
            if (key == "hw") c.grid.hw = detail::to_int(val, where);
            else if (key == "cell") c.grid.cell = detail::to_double(val, where);
            else if (key == "c_in") c.grid.c_in = detail::to_int(val, where);
            else throw ConfigError(msg("config: unknown key '", where, "'"));
        } else if (section == "net") {
            if (key == "ct") c.net.ct = detail::to_int(val, where);
            else if (key == "divisor") c.net.width_divisor = detail::to_int(val, where);
            else if (key == "head_hidden") c.net.head_hidden = detail::to_int(val, where);
            else if (key == "classes") c.net.k_classes = detail::to_int(val, where);
            else if (key == "blocks") {
                auto parts = detail::split(val, ',');
                if (parts.size() != 3) throw ConfigError("config: net.blocks needs three widths");
                for (int i = 0; i < 3; ++i)
                    c.net.blocks[std::size_t(i)] = detail::to_int(parts[std::size_t(i)], where);
            } else throw ConfigError(msg("config: unknown key '", where, "'"));
        } else if (section == "distill") {
            if (key == "alpha") c.distill.alpha = detail::to_double(val, where);
            else if (key == "beta") c.distill.beta = detail::to_double(val, where);
            else if (key == "losses") {
                c.distill.loss_it = c.distill.loss_cr = c.distill.loss_attn = false;
                if (val != "none")
                    for (const auto& l : detail::split(val, ',')) {
                        if (l == "it") c.distill.loss_it = true;
                        else if (l == "cr") c.distill.loss_cr = true;
                        else if (l == "attn") c.distill.loss_attn = true;
                        else throw ConfigError(msg("config: unknown loss '", l, "' (it, cr, attn)"));
                    }
            } else if (key == "recon") c.distill.recon = recon_from_string(val);
            else if (key == "axis_policy") c.distill.axis_policy = axis_policy_from_string(val);
            else if (key == "buffer") c.distill.buffer = buffer_from_string(val);
            else if (key == "shared") c.distill.shared_autoencoder = detail::to_bool(val, where);
            else if (key == "enc" || key == "dec") {
                auto parts = detail::split(val, ',');
                std::vector<int> f;
                for (const auto& p : parts) f.push_back(detail::to_int(p, where));
                (key == "enc" ? c.distill.enc_filters : c.distill.dec_filters) = std::move(f);
            } else if (key == "baseline") c.distill.baseline = baseline_from_string(val);
            else if (key == "temperature") c.distill.temperature = detail::to_double(val, where);
            else throw ConfigError(msg("config: unknown key '", where, "'"));
        } else if (section == "optim") {
            if (key == "lr_max") c.optim.lr_max = detail::to_double(val, where);
            else if (key == "lr_min") c.optim.lr_min = detail::to_double(val, where);
            else if (key == "epochs") c.optim.epochs = detail::to_int(val, where);
            else if (key == "batch") c.optim.batch = detail::to_int(val, where);
            else throw ConfigError(msg("config: unknown key '", where, "'"));
        } else if (section == "run") {
            if (key == "train_scenes") c.run.train_scenes = detail::to_int(val, where);
            else if (key == "eval_scenes") c.run.eval_scenes = detail::to_int(val, where);
            else if (key == "train_seed0") c.run.train_seed0 = detail::to_u64(val, where);
            else if (key == "eval_seed0") c.run.eval_seed0 = detail::to_u64(val, where);
            else if (key == "seeds") {
                c.run.seeds.clear();
                for (const auto& p : detail::split(val, ',')) c.run.seeds.push_back(detail::to_u64(p, where));
            } else if (key == "score_threshold") c.run.score_threshold = detail::to_double(val, where);
            else if (key == "max_dets") c.run.max_dets = detail::to_int(val, where);
            else if (key == "iou_thresholds") {
                c.run.iou_thresholds.clear();
                for (const auto& p : detail::split(val, ','))
                    c.run.iou_thresholds.push_back(detail::to_double(p, where));
            } else if (key == "teacher_cache") c.run.teacher_cache = detail::to_bool(val, where);
            else if (key == "jobs") c.run.jobs = detail::to_int(val, where);
            else if (key == "eval_every") c.run.eval_every = detail::to_int(val, where);
            else throw ConfigError(msg("config: unknown key '", where, "'"));
        } else {
            throw ConfigError(msg("config: unknown section '", section, "'"));
        }
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(msg("cannot open config '", path, "'"));
    return parse_config(is);
}

}  // namespace itkd
