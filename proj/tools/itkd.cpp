// Command-line interface to the detection-distillation bench: dataset
// generation, teacher training, student distillation (including the
// self-distillation mode), evaluation, and the ablation matrix.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "itkd/config.hpp"
#include "itkd/report.hpp"
#include "itkd/runner.hpp"

namespace fs = std::filesystem;
using namespace itkd;

namespace {

RunConfig load_or_default(const std::string& config_path) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    cfg.validate();
    return cfg;
}

std::vector<Scene> generate_split(const GenConfig& gen, std::uint64_t seed0, int count) {
    std::vector<Scene> scenes;
    scenes.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(gen, seed0 + std::uint64_t(i)));
    return scenes;
}

struct LoadedDataset {
    std::vector<Scene> train, eval;
};

LoadedDataset load_dataset_dir(const std::string& dir) {
    LoadedDataset d;
    d.train = read_dataset(dir + "/train.ds");
    d.eval = read_dataset(dir + "/eval.ds");
    return d;
}

DetectorParams load_detector_checkpoint(const std::string& ckpt_path) {
    NetConfig net = read_manifest(ckpt_path + ".manifest");
    DetectorParams det = make_detector(net, "net", /*seed=*/0);
    auto saved = load_checkpoint(ckpt_path);
    auto params = det.all();
    load_into(params, saved);
    return det;
}

void save_detector_checkpoint(const std::string& ckpt_path, const DetectorParams& det) {
    auto params = det.all();
    save_checkpoint(ckpt_path, params);
    write_manifest(ckpt_path + ".manifest", det.cfg);
}

void print_eval(const EvalSummary& s) {
    std::cout << std::fixed << std::setprecision(2);
    for (const auto& ce : s.per_class) {
        std::cout << "  class " << ce.class_id << ": ";
        if (ce.ap)
            std::cout << "AP " << 100.0 * *ce.ap << "  APH " << 100.0 * *ce.aph << "  ("
                      << ce.gt_count << " gt)\n";
        else
            std::cout << "no ground truth\n";
    }
    std::cout << "  macro: AP " << 100.0 * s.macro_ap << "  APH " << 100.0 * s.macro_aph << "\n";
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = load_or_default(config_path);
    fs::create_directories(out_dir);
    auto train = generate_split(cfg.gen, cfg.run.train_seed0, cfg.run.train_scenes);
    auto eval = generate_split(cfg.gen, cfg.run.eval_seed0, cfg.run.eval_scenes);
    write_dataset(out_dir + "/train.ds", train);
    write_dataset(out_dir + "/eval.ds", eval);
    std::cout << "wrote " << train.size() << " train scenes and " << eval.size()
              << " eval scenes to " << out_dir << "\n";
    return 0;
}

int cmd_train_teacher(const std::string& config_path, const std::string& dataset_dir,
                      const std::string& out_dir, std::uint64_t seed_override, bool has_seed) {
    RunConfig cfg = load_or_default(config_path);
    std::uint64_t seed = has_seed ? seed_override : cfg.run.seeds.front();
    fs::create_directories(out_dir);

    LoadedDataset data = load_dataset_dir(dataset_dir);
    auto train = precompute_batches(data.train, cfg.grid, cfg.net.k_classes);
    auto eval = precompute_batches(data.eval, cfg.grid, cfg.net.k_classes);

    MetricsWriter metrics(out_dir + "/metrics.jsonl");
    auto result = train_teacher(cfg, train, eval, seed, &metrics);
    metrics.flush();

    save_detector_checkpoint(out_dir + "/teacher.ckpt", result.det);
    std::cout << "teacher trained (seed " << seed << "), final eval:\n";
    print_eval(result.final_eval);
    std::cout << "checkpoint: " << out_dir << "/teacher.ckpt\n";
    return 0;
}

int cmd_distill(const std::string& config_path, const std::string& teacher_path,
                const std::string& dataset_dir, const std::string& out_dir,
                std::uint64_t seed_override, bool has_seed, bool self_mode) {
    RunConfig cfg = load_or_default(config_path);
    std::uint64_t seed = has_seed ? seed_override : cfg.run.seeds.front();
    fs::create_directories(out_dir);

    DetectorParams teacher = load_detector_checkpoint(teacher_path);
    check_teacher_manifest(teacher.cfg, cfg);
    teacher.set_frozen(true);

    LoadedDataset data = load_dataset_dir(dataset_dir);
    auto train = precompute_batches(data.train, cfg.grid, cfg.net.k_classes);
    auto eval = precompute_batches(data.eval, cfg.grid, cfg.net.k_classes);

    bool needs_heads = cfg.distill.baseline != BaselineKd::None;
    auto cache = build_teacher_cache(teacher, train, needs_heads);

    MetricsWriter metrics(out_dir + "/metrics.jsonl");
    DistillOutcome out = distill_student(cfg, cfg.distill, teacher, train, cache, eval, seed,
                                         self_mode, &metrics);
    metrics.flush();

    save_detector_checkpoint(out_dir + "/student.ckpt", out.student);
    std::cout << (self_mode ? "self-distilled" : "distilled") << " student (seed " << seed
              << "), teacher hash " << out.teacher_hash.substr(0, 12) << ", final eval:\n";
    print_eval(out.eval);
    std::cout << "checkpoint: " << out_dir << "/student.ckpt\n";
    return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& ckpt_path,
                 const std::string& dataset_dir, const std::string& out_dir) {
    RunConfig cfg = load_or_default(config_path);
    DetectorParams det = load_detector_checkpoint(ckpt_path);
    LoadedDataset data = load_dataset_dir(dataset_dir);
    auto eval = precompute_batches(data.eval, cfg.grid, det.cfg.k_classes);
    EvalSummary s = evaluate_detector(det, eval, cfg.grid, eval_options(cfg));
    std::cout << "evaluated " << ckpt_path << " on " << data.eval.size() << " scenes:\n";
    print_eval(s);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream os(out_dir + "/eval.jsonl");
        os << eval_to_json(s).dump() << "\n";
    }
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& teacher_path,
               const std::string& dataset_dir, const std::string& out_dir) {
    RunConfig cfg = load_or_default(config_path);
    fs::create_directories(out_dir);

    DetectorParams teacher = load_detector_checkpoint(teacher_path);
    check_teacher_manifest(teacher.cfg, cfg);
    teacher.set_frozen(true);

    LoadedDataset data = load_dataset_dir(dataset_dir);
    auto train = precompute_batches(data.train, cfg.grid, cfg.net.k_classes);
    auto eval = precompute_batches(data.eval, cfg.grid, cfg.net.k_classes);

    auto results = run_ablation(cfg, teacher, train, eval, out_dir);
    auto rows = build_report_rows(results, cfg.net.k_classes);
    write_report_jsonl(out_dir + "/report.jsonl", rows);
    std::string text = render_report_text(rows, cfg.net.k_classes);
    {
        std::ofstream os(out_dir + "/report.txt");
        os << text;
    }
    std::cout << text;
    int failed = 0;
    for (const auto& r : results)
        if (!r.ok) ++failed;
    if (failed) std::cout << "\n" << failed << " cell run(s) failed; see report for details\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale 3D detection distillation bench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, dataset_dir, teacher_path, ckpt_path;
    std::uint64_t seed = 0;
    bool has_seed = false;

    auto add_common = [&](CLI::App* sub, bool with_seed) {
        sub->add_option("--config", config_path, "run config file (sectioned key=value)");
        if (with_seed)
            sub->add_option("--seed", seed, "run seed (default: first seed in the config)")
                ->each([&](const std::string&) { has_seed = true; });
    };

    auto* gen = app.add_subcommand("gen-data", "generate train/eval scene datasets");
    add_common(gen, false);
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* tt = app.add_subcommand("train-teacher", "train the full-width teacher (supervised)");
    add_common(tt, true);
    tt->add_option("--dataset", dataset_dir, "dataset directory from gen-data")->required();
    tt->add_option("--out", out_dir, "output directory")->required();

    auto* di = app.add_subcommand("distill", "distill a channel-reduced student");
    add_common(di, true);
    di->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    di->add_option("--dataset", dataset_dir, "dataset directory")->required();
    di->add_option("--out", out_dir, "output directory")->required();

    auto* sd = app.add_subcommand("self-distill", "distill into a same-width student");
    add_common(sd, true);
    sd->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    sd->add_option("--dataset", dataset_dir, "dataset directory")->required();
    sd->add_option("--out", out_dir, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
    add_common(ev, false);
    ev->add_option("--checkpoint", ckpt_path, "detector checkpoint")->required();
    ev->add_option("--dataset", dataset_dir, "dataset directory")->required();
    ev->add_option("--out", out_dir, "optional output directory for the eval record");

    auto* ab = app.add_subcommand("ablate", "run the ablation matrix over the config seeds");
    add_common(ab, false);
    ab->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    ab->add_option("--dataset", dataset_dir, "dataset directory")->required();
    ab->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
        if (tt->parsed()) return cmd_train_teacher(config_path, dataset_dir, out_dir, seed, has_seed);
        if (di->parsed())
            return cmd_distill(config_path, teacher_path, dataset_dir, out_dir, seed, has_seed, false);
        if (sd->parsed())
            return cmd_distill(config_path, teacher_path, dataset_dir, out_dir, seed, has_seed, true);
        if (ev->parsed()) return cmd_evaluate(config_path, ckpt_path, dataset_dir, out_dir);
        if (ab->parsed()) return cmd_ablate(config_path, teacher_path, dataset_dir, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
