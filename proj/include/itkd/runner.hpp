#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "itkd/autodiff.hpp"
#include "itkd/checkpoint.hpp"
#include "itkd/config.hpp"
#include "itkd/distill.hpp"
#include "itkd/sha256.hpp"

namespace itkd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Model manifest (text sidecar that makes checkpoints self-describing)
// ---------------------------------------------------------------------------

inline void write_manifest(const std::string& path, const NetConfig& net) {
    std::ofstream os(path);
    if (!os) throw IoError(msg("cannot open '", path, "' for writing"));
    os << "itkd-manifest-v1\n";
    os << "c_in = " << net.c_in << "\n";
    os << "ct = " << net.ct << "\n";
    os << "divisor = " << net.width_divisor << "\n";
    os << "blocks = " << net.blocks[0] << "," << net.blocks[1] << "," << net.blocks[2] << "\n";
    os << "classes = " << net.k_classes << "\n";
    os << "head_hidden = " << net.head_hidden << "\n";
}

inline NetConfig read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(msg("cannot open manifest '", path, "'"));
    std::string header;
    std::getline(is, header);
    if (header != "itkd-manifest-v1")
        throw IoError(msg("'", path, "' is not a model manifest"));
    NetConfig net;
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (key == "c_in") net.c_in = detail::to_int(val, key);
        else if (key == "ct") net.ct = detail::to_int(val, key);
        else if (key == "divisor") net.width_divisor = detail::to_int(val, key);
        else if (key == "classes") net.k_classes = detail::to_int(val, key);
        else if (key == "head_hidden") net.head_hidden = detail::to_int(val, key);
        else if (key == "blocks") {
            auto parts = detail::split(val, ',');
            if (parts.size() != 3) throw IoError("manifest: blocks needs three widths");
            for (int i = 0; i < 3; ++i)
                net.blocks[std::size_t(i)] = detail::to_int(parts[std::size_t(i)], key);
        }
    }
    net.validate();
    return net;
}

/// Requires the checkpointed teacher to match what the run config expects.
inline void check_teacher_manifest(const NetConfig& manifest, const RunConfig& cfg) {
    NetConfig expect = cfg.teacher_net();
    if (manifest.c_in != expect.c_in || manifest.ct != expect.ct ||
        manifest.width_divisor != expect.width_divisor ||
        manifest.blocks != expect.blocks || manifest.k_classes != expect.k_classes ||
        manifest.head_hidden != expect.head_hidden)
        throw ConfigError("teacher checkpoint manifest does not match the run config");
}

// ---------------------------------------------------------------------------
// Metrics stream: line-delimited JSON records, no wall-clock content so a
// repeated run reproduces the stream byte for byte.
// ---------------------------------------------------------------------------

class MetricsWriter {
  public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path) : os_(std::make_unique<std::ofstream>(path)) {
        if (!*os_) throw IoError(msg("cannot open metrics stream '", path, "'"));
    }

    void write(const json& record) {
        if (os_) *os_ << record.dump() << "\n";
    }

    void flush() {
        if (os_) os_->flush();
    }

  private:
    std::unique_ptr<std::ofstream> os_;
};

inline json eval_to_json(const EvalSummary& s) {
    json per_class = json::array();
    for (const auto& ce : s.per_class) {
        json c;
        c["class"] = ce.class_id;
        c["gt"] = ce.gt_count;
        if (ce.ap) c["ap"] = *ce.ap; else c["ap"] = nullptr;
        if (ce.aph) c["aph"] = *ce.aph; else c["aph"] = nullptr;
        per_class.push_back(c);
    }
    return json{{"per_class", per_class}, {"macro_ap", s.macro_ap}, {"macro_aph", s.macro_aph}};
}

// ---------------------------------------------------------------------------
// Precomputed per-scene training data
// ---------------------------------------------------------------------------

struct SceneBatch {
    Tensor input;  // pillarized map, constant leaf
    TargetMaps targets;
    const Scene* scene = nullptr;
};

inline std::vector<SceneBatch> precompute_batches(std::span<const Scene> scenes,
                                                  const GridConfig& grid, int k_classes) {
    std::vector<SceneBatch> out;
    out.reserve(scenes.size());
    for (const auto& sc : scenes) {
        SceneBatch b;
        b.input = pillarize(sc, grid).map;
        b.targets = encode_targets(sc, grid, k_classes);
        b.scene = &sc;
        out.push_back(std::move(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
    double score_threshold = 0.1;
    int max_dets = 100;
    std::vector<double> iou_thresholds = {0.5, 0.25, 0.25};
};

inline EvalOptions eval_options(const RunConfig& cfg) {
    return {cfg.run.score_threshold, cfg.run.max_dets, cfg.run.iou_thresholds};
}

inline EvalSummary evaluate_detector(const DetectorParams& det,
                                     std::span<const SceneBatch> scenes, const GridConfig& grid,
                                     const EvalOptions& opt) {
    NoGradGuard ng;
    int k = det.cfg.k_classes;
    std::vector<std::vector<MatchRecord>> records{std::size_t(k)};
    std::vector<int> gt_counts(std::size_t(k), 0);
    for (const auto& sb : scenes) {
        HeadOutputs outs = heads_forward(backbone_forward(sb.input, det), det);
        auto dets = decode_detections(outs, grid, opt.score_threshold, opt.max_dets);
        for (int c = 0; c < k; ++c) {
            std::vector<Detection> class_dets;
            for (const auto& d : dets)
                if (d.box.class_id == c) class_dets.push_back(d);
            std::vector<Box3D> class_gts;
            for (const auto& b : sb.scene->boxes)
                if (b.class_id == c) class_gts.push_back(b);
            auto mr = match_detections(class_dets, class_gts, opt.iou_thresholds[std::size_t(c)], c);
            gt_counts[std::size_t(c)] += mr.gt_count;
            for (auto& r : mr.records) records[std::size_t(c)].push_back(r);
        }
    }
    return EvalSummary::from_matches(records, gt_counts);
}

// ---------------------------------------------------------------------------
// Teacher training (supervised only)
// ---------------------------------------------------------------------------

struct TeacherTrainResult {
    DetectorParams det;
    EvalSummary final_eval;
    std::vector<double> epoch_losses;
};

inline TeacherTrainResult train_teacher(const RunConfig& cfg, std::span<const SceneBatch> train,
                                        std::span<const SceneBatch> eval_scenes,
                                        std::uint64_t seed, MetricsWriter* metrics) {
    DetectorParams det = make_detector(cfg.teacher_net(), "net", mix_seed(seed, "teacher-init"));
    int n = int(train.size());
    int batch = cfg.optim.batch;
    int steps_per_epoch = n > 0 ? (n + batch - 1) / batch : 0;
    std::int64_t total_steps = std::int64_t(cfg.optim.epochs) * steps_per_epoch;
    AdamOptimizer opt(det.all(),
                      {cfg.optim.lr_max, cfg.optim.lr_min, std::max<std::int64_t>(1, total_steps)});

    TeacherTrainResult result;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(seed, "order-" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += batch) {
            int bn = std::min(batch, n - start);
            opt.zero_grad();
            double batch_loss = 0.0;
            for (int i = 0; i < bn; ++i) {
                const SceneBatch& sb = train[std::size_t(order[std::size_t(start + i)])];
                Tensor loss = supervised_loss(
                    heads_forward(backbone_forward(sb.input, det), det), sb.targets);
                double lv = loss.scalar_value();
                if (!std::isfinite(lv))
                    throw Error(msg("teacher training diverged: non-finite loss at step ", step));
                batch_loss += lv / bn;
                backward(scalar_mul(loss, 1.0 / bn));
            }
            double lr = opt.current_learning_rate();
            opt.step();
            epoch_loss += batch_loss / steps_per_epoch;
            if (metrics)
                metrics->write({{"t", "step"},
                                {"phase", "teacher"},
                                {"step", step},
                                {"epoch", epoch},
                                {"lr", lr},
                                {"loss_sup", batch_loss},
                                {"loss_total", batch_loss}});
            ++step;
        }
        result.epoch_losses.push_back(epoch_loss);

        bool last = epoch + 1 == cfg.optim.epochs;
        if (metrics && (last || (cfg.run.eval_every > 0 && (epoch + 1) % cfg.run.eval_every == 0))) {
            EvalSummary es = evaluate_detector(det, eval_scenes, cfg.grid, eval_options(cfg));
            json rec{{"t", "eval"}, {"phase", "teacher"}, {"epoch", epoch}};
            rec["metrics"] = eval_to_json(es);
            metrics->write(rec);
        }
    }
    result.final_eval = evaluate_detector(det, eval_scenes, cfg.grid, eval_options(cfg));
    result.det = det;
    return result;
}

// ---------------------------------------------------------------------------
// Teacher forward cache: the teacher is frozen during distillation, so its
// map-view features and head sequences per scene never change and are
// computed once. Head maps are kept only when a head-KD baseline needs them.
// ---------------------------------------------------------------------------

struct TeacherSceneData {
    Tensor m;  // detached map-view feature
    HeadSequenceSet seq;
    HeadOutputs heads;  // defined only when cached with keep_heads
    bool has_heads = false;
};

inline std::vector<TeacherSceneData> build_teacher_cache(const DetectorParams& teacher,
                                                         std::span<const SceneBatch> scenes,
                                                         bool keep_heads) {
    NoGradGuard ng;
    std::vector<TeacherSceneData> cache;
    cache.reserve(scenes.size());
    for (const auto& sb : scenes) {
        TeacherSceneData d;
        Tensor m = backbone_forward(sb.input, teacher);
        HeadOutputs heads = heads_forward(m, teacher);
        d.m = m;
        d.seq = extract_sequences(heads, sb.targets.objects);
        if (keep_heads) {
            d.heads = heads;
            d.has_heads = true;
        }
        cache.push_back(std::move(d));
    }
    return cache;
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

struct DistillOutcome {
    DetectorParams student;
    EvalSummary eval;
    std::map<std::string, double> last_epoch_losses;
    std::string teacher_hash;
    double wall_seconds = 0.0;
};

/// Distills a fresh student against the frozen teacher. With self_mode the
/// student has the teacher architecture (divisor 1). The teacher parameter
/// hash is asserted unchanged at the end of every run.
inline DistillOutcome distill_student(const RunConfig& cfg, const DistillConfig& dcfg,
                                      const DetectorParams& teacher,
                                      std::span<const SceneBatch> train,
                                      std::span<const TeacherSceneData> cache,
                                      std::span<const SceneBatch> eval_scenes,
                                      std::uint64_t seed, bool self_mode,
                                      MetricsWriter* metrics) {
    dcfg.validate();
    auto t_start = std::chrono::steady_clock::now();

    bool want_it = dcfg.loss_it;
    bool want_cr = dcfg.loss_cr;
    bool want_attn = dcfg.loss_attn;
    bool want_baseline = dcfg.baseline != BaselineKd::None;
    bool need_teacher = want_it || want_cr || want_attn || want_baseline;
    if (need_teacher && cache.size() != train.size())
        throw Error("distill: teacher cache does not cover the training scenes");
    if (want_baseline)
        for (const auto& d : cache)
            if (!d.has_heads)
                throw Error("distill: baseline head-KD requires a cache built with head maps");

    std::string hash_before = hash_parameters(teacher.all());

    NetConfig snet = self_mode ? cfg.teacher_net() : cfg.student_net();
    DetectorParams student =
        make_detector(snet, "net", mix_seed(seed, self_mode ? "self-student-init" : "student-init"));

    DistillModules modules = make_distill_modules(dcfg, teacher.cfg.map_channels(),
                                                  snet.map_channels(), snet.k_classes,
                                                  mix_seed(seed, "kd-init"));

    std::vector<Parameter> trainable = student.all();
    if (need_teacher) {
        auto extra = modules.trainable();
        trainable.insert(trainable.end(), extra.begin(), extra.end());
    }

    int n = int(train.size());
    int batch = cfg.optim.batch;
    int steps_per_epoch = n > 0 ? (n + batch - 1) / batch : 0;
    std::int64_t total_steps = std::int64_t(cfg.optim.epochs) * steps_per_epoch;
    AdamOptimizer opt(std::move(trainable),
                      {cfg.optim.lr_max, cfg.optim.lr_min, std::max<std::int64_t>(1, total_steps)});

    const char* loss_keys[6] = {"loss_total", "loss_sup", "loss_it", "loss_cr", "loss_attn",
                                "loss_baseline"};
    std::map<std::string, double> epoch_means;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(seed, "order-" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);

        for (const char* k : loss_keys) epoch_means[k] = 0.0;

        for (int start = 0; start < n; start += batch) {
            int bn = std::min(batch, n - start);
            opt.zero_grad();
            std::map<std::string, double> batch_means;
            for (const char* k : loss_keys) batch_means[k] = 0.0;

            for (int i = 0; i < bn; ++i) {
                int idx = order[std::size_t(start + i)];
                const SceneBatch& sb = train[std::size_t(idx)];

                Tensor m_s = backbone_forward(sb.input, student);
                HeadOutputs outs = heads_forward(m_s, student);

                LossComponents comp;
                comp.sup = supervised_loss(outs, sb.targets);
                if (want_it || want_cr) {
                    FeatureLosses fl =
                        feature_losses(cache[std::size_t(idx)].m, m_s, modules, want_cr, want_it);
                    comp.cr = fl.cr;
                    comp.it = fl.it;
                }
                if (want_attn) {
                    HeadSequenceSet sseq = extract_sequences(outs, sb.targets.objects);
                    comp.attn = attentive_head_loss(cache[std::size_t(idx)].seq, sseq,
                                                    modules.fusion, dcfg.axis_policy);
                }
                if (want_baseline)
                    comp.baseline = baseline_head_kd(cache[std::size_t(idx)].heads, outs,
                                                     dcfg.baseline, dcfg.temperature);

                Tensor total = total_loss(comp, dcfg);
                double tv = total.scalar_value();
                if (!std::isfinite(tv))
                    throw Error(msg("distillation diverged: non-finite loss at step ", step));

                batch_means["loss_total"] += tv / bn;
                batch_means["loss_sup"] += comp.sup.scalar_value() / bn;
                if (comp.it.defined()) batch_means["loss_it"] += comp.it.scalar_value() / bn;
                if (comp.cr.defined()) batch_means["loss_cr"] += comp.cr.scalar_value() / bn;
                if (comp.attn.defined()) batch_means["loss_attn"] += comp.attn.scalar_value() / bn;
                if (comp.baseline.defined())
                    batch_means["loss_baseline"] += comp.baseline.scalar_value() / bn;

                backward(scalar_mul(total, 1.0 / bn));
            }
            double lr = opt.current_learning_rate();
            opt.step();
            if (metrics) {
                json rec{{"t", "step"}, {"phase", "distill"}, {"step", step}, {"epoch", epoch},
                         {"lr", lr}};
                for (const char* k : loss_keys) rec[k] = batch_means[k];
                metrics->write(rec);
            }
            for (const char* k : loss_keys) epoch_means[k] += batch_means[k] / steps_per_epoch;
            ++step;
        }
    }

    std::string hash_after = hash_parameters(teacher.all());
    if (hash_after != hash_before)
        throw Error("frozen-teacher audit failed: teacher parameters changed during distillation");

    DistillOutcome out;
    out.student = student;
    out.eval = evaluate_detector(student, eval_scenes, cfg.grid, eval_options(cfg));
    out.last_epoch_losses = epoch_means;
    out.teacher_hash = hash_after;
    out.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (metrics) {
        json rec{{"t", "eval"}, {"phase", "distill"}, {"epoch", cfg.optim.epochs - 1}};
        rec["metrics"] = eval_to_json(out.eval);
        metrics->write(rec);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationCell {
    std::string id;
    DistillConfig distill;
};

struct AblationTableRow {
    std::string label;
    std::string cell_id;
};

struct AblationTable {
    std::string name;
    std::vector<AblationTableRow> rows;
};

/// Distinct configurations behind the five ablation tables. Cells shared by
/// several tables run once and are referenced by each.
inline std::vector<AblationCell> ablation_cells(const DistillConfig& base) {
    auto with = [&](bool it, bool cr, bool attn, BaselineKd bl = BaselineKd::None) {
        DistillConfig d = base;
        d.loss_it = it;
        d.loss_cr = cr;
        d.loss_attn = attn;
        d.baseline = bl;
        d.recon = ReconMode::Interchange;
        d.buffer = BufferDirection::StudentToTeacher;
        d.shared_autoencoder = true;
        return d;
    };
    std::vector<AblationCell> cells;
    cells.push_back({"sup_only", with(false, false, false)});
    cells.push_back({"sup_it", with(true, false, false)});
    cells.push_back({"sup_it_cr", with(true, true, false)});
    cells.push_back({"full", with(true, true, true)});
    {
        DistillConfig d = with(true, true, false);
        d.buffer = BufferDirection::TeacherToStudent;
        cells.push_back({"buffer_t2s", d});
    }
    {
        DistillConfig d = with(true, true, false);
        d.buffer = BufferDirection::Midpoint;
        cells.push_back({"buffer_mid", d});
    }
    {
        DistillConfig d = with(true, true, true);
        d.shared_autoencoder = false;
        cells.push_back({"nonshared", d});
    }
    {
        DistillConfig d = with(true, true, false);
        d.recon = ReconMode::SelfRecon;
        cells.push_back({"self_recon", d});
    }
    cells.push_back({"baseline_hinton", with(false, false, false, BaselineKd::HintonKl)});
    cells.push_back({"baseline_l1", with(false, false, false, BaselineKd::PlainL1)});
    cells.push_back({"attn_only", with(false, false, true)});
    return cells;
}

inline std::vector<AblationTable> ablation_tables() {
    return {
        {"buffer-direction (sup+it+cr)",
         {{"S->T", "sup_it_cr"}, {"T->S", "buffer_t2s"}, {"(S+T)/2", "buffer_mid"}}},
        {"shared-autoencoder (full)", {{"non-shared", "nonshared"}, {"shared", "full"}}},
        {"reconstruction (sup+it+cr)",
         {{"self-recon", "self_recon"}, {"interchange", "sup_it_cr"}}},
        {"head-kd baselines",
         {{"hinton-kl", "baseline_hinton"}, {"plain-l1", "baseline_l1"}, {"attn-only", "attn_only"}}},
        {"loss-components",
         {{"sup", "sup_only"}, {"sup+it", "sup_it"}, {"sup+it+cr", "sup_it_cr"},
          {"sup+it+cr+attn", "full"}}},
    };
}

struct CellResult {
    std::string cell_id;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalSummary eval;
    std::map<std::string, double> losses;
    double wall_seconds = 0.0;
};

/// Runs one ablation cell, capturing failures so the rest of the matrix can
/// proceed.
template <class Fn>
CellResult run_cell_guarded(const std::string& cell_id, std::uint64_t seed, Fn&& fn) {
    CellResult r;
    r.cell_id = cell_id;
    r.seed = seed;
    try {
        DistillOutcome out = fn();
        r.ok = true;
        r.eval = out.eval;
        r.losses = out.last_epoch_losses;
        r.wall_seconds = out.wall_seconds;
    } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
    }
    return r;
}

inline std::vector<CellResult> run_ablation(const RunConfig& cfg, const DetectorParams& teacher,
                                            std::span<const SceneBatch> train,
                                            std::span<const SceneBatch> eval_scenes,
                                            const std::string& out_dir) {
    bool any_baseline = false;
    auto cells = ablation_cells(cfg.distill);
    for (const auto& c : cells) any_baseline |= c.distill.baseline != BaselineKd::None;
    auto cache = build_teacher_cache(teacher, train, any_baseline);

    std::filesystem::create_directories(out_dir + "/cells");

    struct Task {
        const AblationCell* cell;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (const auto& c : cells)
        for (auto seed : cfg.run.seeds) tasks.push_back({&c, seed});

    std::vector<CellResult> results(tasks.size());
    int jobs = std::max(1, cfg.run.jobs);
    std::mutex next_mutex;
    std::size_t next = 0;
    auto worker = [&]() {
        for (;;) {
            std::size_t mine;
            {
                std::lock_guard<std::mutex> lk(next_mutex);
                if (next >= tasks.size()) return;
                mine = next++;
            }
            const Task& t = tasks[mine];
            std::string mpath = out_dir + "/cells/" + t.cell->id + "_seed" +
                                std::to_string(t.seed) + ".jsonl";
            results[mine] = run_cell_guarded(t.cell->id, t.seed, [&]() {
                MetricsWriter mw(mpath);
                return distill_student(cfg, t.cell->distill, teacher, train, cache, eval_scenes,
                                       t.seed, false, &mw);
            });
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return results;
}

}  // namespace itkd
