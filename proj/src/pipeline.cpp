#include "kdx/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "kdx/scorecam.hpp"

namespace kdx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config: " + path + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) + "'");
        }
    }
}

template <typename T>
T get_or(const json& j, const std::string& path, const char* key, T def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value for '" + path + "." + key + "'");
    }
}

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config: " + what + " is not valid JSON: " + e.what());
    }
}

}  // namespace

void RunConfig::validate() const {
    distill.validate();
    if (dataset.kind == DatasetKind::Synthetic) {
        dataset.synthetic.validate();
        if (dataset.image_size != dataset.synthetic.image_size) {
            throw ConfigError("config: dataset.image_size must match dataset.synthetic.image_size");
        }
        if (dataset.channels != 1) {
            throw ConfigError("config: synthetic datasets are single-channel");
        }
    } else {
        if (dataset.root.empty()) throw ConfigError("config: dataset.root is required for kind=folder");
        dataset.policy.validate();
        if (dataset.image_size < 8) throw ConfigError("config: dataset.image_size must be >= 8");
        if (dataset.channels != 1 && dataset.channels != 3) {
            throw ConfigError("config: dataset.channels must be 1 or 3");
        }
    }
    if (model.teacher != "toy_teacher" && model.teacher != "toy_student") {
        throw ConfigError("config: model.teacher must name a registered model");
    }
    if (model.student != "toy_teacher" && model.student != "toy_student") {
        throw ConfigError("config: model.student must name a registered model");
    }
    if (dataset.augmentation != "none") {
        throw ConfigError("config: dataset.augmentation only supports 'none' (hook reserved)");
    }
    if (explain.sample_count < 1) throw ConfigError("config: explain.sample_count must be >= 1");
    if (output_dir.empty()) throw ConfigError("config: output_dir must not be empty");
}

std::string RunConfig::to_json_text() const {
    json j;
    j["output_dir"] = output_dir;
    json d;
    d["kind"] = dataset.kind == DatasetKind::Synthetic ? "synthetic" : "folder";
    d["image_size"] = dataset.image_size;
    d["channels"] = dataset.channels;
    d["root"] = dataset.root;
    d["policy"] = {dataset.policy.train_pct, dataset.policy.val_pct, dataset.policy.test_pct};
    d["split_seed"] = dataset.split_seed;
    d["augmentation"] = dataset.augmentation;
    json s;
    s["image_size"] = dataset.synthetic.image_size;
    s["classes"] = dataset.synthetic.num_classes;
    s["blob_radius"] = dataset.synthetic.blob_radius;
    s["noise"] = dataset.synthetic.noise;
    s["train_per_class"] = dataset.synthetic.train_per_class;
    s["val_per_class"] = dataset.synthetic.val_per_class;
    s["test_per_class"] = dataset.synthetic.test_per_class;
    s["seed"] = dataset.synthetic.seed;
    s["root"] = dataset.synthetic_root;
    d["synthetic"] = std::move(s);
    j["dataset"] = std::move(d);
    j["model"] = {{"teacher", model.teacher}, {"student", model.student}, {"seed", model.seed}};
    json t;
    t["alpha"] = distill.loss.alpha;
    t["gamma"] = distill.loss.gamma;
    t["temperature"] = distill.loss.temperature;
    t["variant"] = to_string(distill.loss.variant);
    t["epochs_teacher"] = distill.epochs_teacher;
    t["epochs_student"] = distill.epochs_student;
    t["batch_size"] = distill.batch_size;
    t["learning_rate"] = distill.learning_rate;
    t["optimizer"] = to_string(distill.optimizer);
    t["seed"] = distill.seed;
    j["distill"] = std::move(t);
    j["explain"] = {{"layer", explain.layer},
                    {"classes", explain.classes},
                    {"sample_count", explain.sample_count}};
    return j.dump(2);
}

std::string RunConfig::config_hash() const {
    json j = parse_json(to_json_text(), "resolved config");
    j.erase("output_dir");
    j["dataset"]["synthetic"].erase("root");
    return hash_hex(fnv1a64(j.dump()));
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    const json j = parse_json(text, "input");
    check_keys(j, "", {"output_dir", "dataset", "model", "distill", "explain"});
    RunConfig cfg;
    cfg.output_dir = get_or<std::string>(j, "", "output_dir", cfg.output_dir);

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, "dataset",
                   {"kind", "image_size", "channels", "root", "policy", "split_seed", "synthetic",
                    "augmentation"});
        const std::string kind = get_or<std::string>(d, "dataset", "kind", "synthetic");
        if (kind == "synthetic") {
            cfg.dataset.kind = DatasetKind::Synthetic;
        } else if (kind == "folder") {
            cfg.dataset.kind = DatasetKind::Folder;
        } else {
            throw ConfigError("config: dataset.kind must be 'synthetic' or 'folder'");
        }
        if (d.contains("synthetic")) {
            const json& s = d.at("synthetic");
            check_keys(s, "dataset.synthetic",
                       {"image_size", "classes", "blob_radius", "noise", "train_per_class",
                        "val_per_class", "test_per_class", "seed", "root"});
            auto& sp = cfg.dataset.synthetic;
            sp.image_size = get_or<int>(s, "dataset.synthetic", "image_size", sp.image_size);
            sp.num_classes = get_or<int>(s, "dataset.synthetic", "classes", sp.num_classes);
            sp.blob_radius = get_or<double>(s, "dataset.synthetic", "blob_radius", sp.blob_radius);
            sp.noise = get_or<double>(s, "dataset.synthetic", "noise", sp.noise);
            sp.train_per_class = get_or<int>(s, "dataset.synthetic", "train_per_class", sp.train_per_class);
            sp.val_per_class = get_or<int>(s, "dataset.synthetic", "val_per_class", sp.val_per_class);
            sp.test_per_class = get_or<int>(s, "dataset.synthetic", "test_per_class", sp.test_per_class);
            sp.seed = get_or<std::uint64_t>(s, "dataset.synthetic", "seed", sp.seed);
            cfg.dataset.synthetic_root = get_or<std::string>(s, "dataset.synthetic", "root", "");
        }
        cfg.dataset.root = get_or<std::string>(d, "dataset", "root", "");
        if (d.contains("policy")) {
            const json& p = d.at("policy");
            if (!p.is_array() || p.size() != 3) {
                throw ConfigError("config: dataset.policy must be [train%, val%, test%]");
            }
            cfg.dataset.policy = {p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()};
        }
        cfg.dataset.split_seed = get_or<std::uint64_t>(d, "dataset", "split_seed", cfg.dataset.split_seed);
        const int default_size = cfg.dataset.kind == DatasetKind::Synthetic
                                     ? cfg.dataset.synthetic.image_size
                                     : 224;
        const int default_channels = cfg.dataset.kind == DatasetKind::Synthetic ? 1 : 3;
        cfg.dataset.image_size = get_or<int>(d, "dataset", "image_size", default_size);
        cfg.dataset.channels = get_or<int>(d, "dataset", "channels", default_channels);
        cfg.dataset.augmentation = get_or<std::string>(d, "dataset", "augmentation", "none");
    }

    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, "model", {"teacher", "student", "seed"});
        cfg.model.teacher = get_or<std::string>(m, "model", "teacher", cfg.model.teacher);
        cfg.model.student = get_or<std::string>(m, "model", "student", cfg.model.student);
        cfg.model.seed = get_or<std::uint64_t>(m, "model", "seed", cfg.model.seed);
    }

    if (j.contains("distill")) {
        const json& t = j.at("distill");
        check_keys(t, "distill",
                   {"alpha", "gamma", "temperature", "variant", "epochs_teacher", "epochs_student",
                    "batch_size", "learning_rate", "optimizer", "seed"});
        cfg.distill.loss.alpha = get_or<double>(t, "distill", "alpha", cfg.distill.loss.alpha);
        cfg.distill.loss.gamma = get_or<double>(t, "distill", "gamma", cfg.distill.loss.gamma);
        cfg.distill.loss.temperature =
            get_or<double>(t, "distill", "temperature", cfg.distill.loss.temperature);
        cfg.distill.loss.variant =
            loss_variant_from_string(get_or<std::string>(t, "distill", "variant", "fbce_mse"));
        cfg.distill.epochs_teacher = get_or<int>(t, "distill", "epochs_teacher", cfg.distill.epochs_teacher);
        cfg.distill.epochs_student = get_or<int>(t, "distill", "epochs_student", cfg.distill.epochs_student);
        cfg.distill.batch_size = get_or<int>(t, "distill", "batch_size", cfg.distill.batch_size);
        cfg.distill.learning_rate = get_or<double>(t, "distill", "learning_rate", cfg.distill.learning_rate);
        cfg.distill.optimizer =
            optimizer_from_string(get_or<std::string>(t, "distill", "optimizer", "adam"));
        cfg.distill.seed = get_or<std::uint64_t>(t, "distill", "seed", cfg.distill.seed);
    }

    if (j.contains("explain")) {
        const json& e = j.at("explain");
        check_keys(e, "explain", {"layer", "classes", "sample_count"});
        cfg.explain.layer = get_or<std::string>(e, "explain", "layer", "");
        cfg.explain.classes = get_or<std::vector<int>>(e, "explain", "classes", {});
        cfg.explain.sample_count = get_or<int>(e, "explain", "sample_count", cfg.explain.sample_count);
    }

    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

DatasetManifest resolve_dataset(const RunConfig& cfg, const fs::path& run_dir) {
    if (cfg.dataset.kind == DatasetKind::Synthetic) {
        const fs::path root = cfg.dataset.synthetic_root.empty()
                                  ? run_dir / "dataset"
                                  : fs::path(cfg.dataset.synthetic_root);
        DatasetManifest m = generate_synthetic(cfg.dataset.synthetic, root.string());
        m.save(root / "manifest.json");
        return m;
    }
    return scan_folder(cfg.dataset.root, cfg.dataset.policy, cfg.dataset.split_seed);
}

namespace {

void write_resolved(const RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream out(dir / "resolved_config.json");
    if (!out) throw std::runtime_error("cannot write resolved config under " + dir.string());
    out << cfg.to_json_text() << "\n";
}

struct SplitSet {
    LoadedSplit train, val, test;
};

SplitSet load_splits(const RunConfig& cfg, const DatasetManifest& manifest) {
    return {LoadedSplit::load(manifest, SplitRole::Train, cfg.dataset.image_size, cfg.dataset.channels),
            LoadedSplit::load(manifest, SplitRole::Val, cfg.dataset.image_size, cfg.dataset.channels),
            LoadedSplit::load(manifest, SplitRole::Test, cfg.dataset.image_size, cfg.dataset.channels)};
}

void write_report(const MetricReport& r, const fs::path& dir, const std::string& stem) {
    r.save(dir / (stem + ".json"));
    std::ofstream txt(dir / (stem + ".txt"));
    txt << r.render_text();
}

Model load_checkpoint_for(const RunConfig& cfg, const fs::path& checkpoint, int num_classes) {
    Model m = Model::load(checkpoint);
    if (m.num_classes() != num_classes) {
        throw ConfigError("checkpoint " + checkpoint.string() + " has " +
                          std::to_string(m.num_classes()) + " classes but the dataset has " +
                          std::to_string(num_classes));
    }
    if (m.spec().in_channels != cfg.dataset.channels ||
        m.spec().input_h != cfg.dataset.image_size || m.spec().input_w != cfg.dataset.image_size) {
        throw ConfigError("checkpoint " + checkpoint.string() +
                          " input shape does not match the dataset config");
    }
    return m;
}

}  // namespace

TrainOutcome run_train_teacher(const RunConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    write_resolved(cfg, out_dir);
    DatasetManifest manifest = resolve_dataset(cfg, out_dir);
    manifest.save(out_dir / "manifest.json");
    const SplitSet splits = load_splits(cfg, manifest);

    Model teacher = build_model(cfg.model.teacher, cfg.model.seed, cfg.dataset.channels,
                                cfg.dataset.image_size, cfg.dataset.image_size,
                                static_cast<int>(manifest.class_names.size()));
    TrainOutcome out;
    out.run_dir = out_dir;
    out.trace = train_teacher(teacher, splits.train, splits.val, cfg.distill);
    out.trace.save_jsonl(out_dir / "teacher_trace.jsonl");

    out.checkpoint = out_dir / "teacher.ckpt";
    teacher.save(out.checkpoint, {out.trace.best_epoch, cfg.distill.seed, cfg.config_hash()});

    out.report = evaluate(teacher, splits.test, cfg.distill.batch_size, cfg.config_hash(),
                          hash_hex(teacher.parameter_hash()));
    write_report(out.report, out_dir, "teacher_report");
    return out;
}

DistillOutcome run_distill(const RunConfig& cfg, const fs::path& teacher_checkpoint,
                           bool with_baseline, const fs::path& out_dir) {
    cfg.validate();
    write_resolved(cfg, out_dir);
    DatasetManifest manifest = resolve_dataset(cfg, out_dir);
    manifest.save(out_dir / "manifest.json");
    const SplitSet splits = load_splits(cfg, manifest);
    const int C = static_cast<int>(manifest.class_names.size());

    Model teacher = load_checkpoint_for(cfg, teacher_checkpoint, C);
    teacher.freeze();

    DistillOutcome out;
    out.run_dir = out_dir;
    Model student = build_model(cfg.model.student, cfg.model.seed, cfg.dataset.channels,
                                cfg.dataset.image_size, cfg.dataset.image_size, C);
    out.student_trace = distill_student(student, teacher, splits.train, splits.val, cfg.distill);
    out.student_trace.save_jsonl(out_dir / "student_trace.jsonl");
    out.student_checkpoint = out_dir / "student.ckpt";
    student.save(out.student_checkpoint,
                 {out.student_trace.best_epoch, cfg.distill.seed, cfg.config_hash()});
    out.student_report = evaluate(student, splits.test, cfg.distill.batch_size, cfg.config_hash(),
                                  hash_hex(student.parameter_hash()));
    write_report(out.student_report, out_dir, "student_report");

    if (with_baseline) {
        out.has_baseline = true;
        Model baseline = build_model(cfg.model.student, cfg.model.seed, cfg.dataset.channels,
                                     cfg.dataset.image_size, cfg.dataset.image_size, C);
        out.baseline_trace = train_student_baseline(baseline, splits.train, splits.val, cfg.distill);
        out.baseline_trace.save_jsonl(out_dir / "baseline_trace.jsonl");
        out.baseline_checkpoint = out_dir / "baseline.ckpt";
        baseline.save(out.baseline_checkpoint,
                      {out.baseline_trace.best_epoch, cfg.distill.seed, cfg.config_hash()});
        out.baseline_report = evaluate(baseline, splits.test, cfg.distill.batch_size,
                                       cfg.config_hash(), hash_hex(baseline.parameter_hash()));
        write_report(out.baseline_report, out_dir, "baseline_report");

        std::ofstream cmp(out_dir / "comparison.txt");
        cmp << render_comparison({{"student (distilled)", out.student_report},
                                  {"student (no teacher)", out.baseline_report}});
        json cj;
        cj["distilled_accuracy"] = out.student_report.accuracy;
        cj["baseline_accuracy"] = out.baseline_report.accuracy;
        cj["accuracy_delta"] = out.student_report.accuracy - out.baseline_report.accuracy;
        std::ofstream cjs(out_dir / "comparison.json");
        cjs << cj.dump(2) << "\n";
    }
    return out;
}

std::vector<MetricReport> run_evaluate(const RunConfig& cfg,
                                       const std::vector<fs::path>& checkpoints, SplitRole role,
                                       const fs::path& out_dir) {
    cfg.validate();
    if (checkpoints.empty()) throw ConfigError("evaluate needs at least one checkpoint");
    write_resolved(cfg, out_dir);
    DatasetManifest manifest = resolve_dataset(cfg, out_dir);
    manifest.save(out_dir / "manifest.json");
    const int C = static_cast<int>(manifest.class_names.size());
    LoadedSplit split =
        LoadedSplit::load(manifest, role, cfg.dataset.image_size, cfg.dataset.channels);

    std::vector<MetricReport> reports;
    std::vector<std::pair<std::string, MetricReport>> named;
    for (const auto& ck : checkpoints) {
        Model model = load_checkpoint_for(cfg, ck, C);
        MetricReport r = evaluate(model, split, cfg.distill.batch_size, cfg.config_hash(),
                                  hash_hex(model.parameter_hash()));
        const std::string stem = ck.stem().string();
        write_report(r, out_dir, std::string("report_") + to_string(role) + "_" + stem);
        named.emplace_back(stem, r);
        reports.push_back(std::move(r));
    }
    if (reports.size() > 1) {
        std::ofstream grid(out_dir / (std::string("comparison_") + to_string(role) + ".txt"));
        grid << render_comparison(named);
    }
    return reports;
}

ExplainOutcome run_explain(const RunConfig& cfg, const std::vector<fs::path>& checkpoints,
                           const fs::path& out_dir) {
    cfg.validate();
    if (checkpoints.empty() || checkpoints.size() > 2) {
        throw ConfigError("explain needs one or two checkpoints");
    }
    write_resolved(cfg, out_dir);
    DatasetManifest manifest = resolve_dataset(cfg, out_dir);
    manifest.save(out_dir / "manifest.json");
    const int C = static_cast<int>(manifest.class_names.size());
    LoadedSplit test =
        LoadedSplit::load(manifest, SplitRole::Test, cfg.dataset.image_size, cfg.dataset.channels);

    std::vector<Model> models;
    std::vector<std::string> layers;
    for (const auto& ck : checkpoints) {
        models.push_back(load_checkpoint_for(cfg, ck, C));
        const std::string layer =
            cfg.explain.layer.empty() ? models.back().last_conv_layer() : cfg.explain.layer;
        const auto names = models.back().capture_layers();
        if (std::find(names.begin(), names.end(), layer) == names.end()) {
            throw ConfigError("layer '" + layer + "' not found in model " + models.back().name());
        }
        layers.push_back(layer);
    }

    fs::create_directories(out_dir / "overlays");
    fs::create_directories(out_dir / "heatmaps");

    ExplainOutcome out;
    out.run_dir = out_dir;
    out.has_alignment = models.size() == 2;
    const std::uint64_t params_before =
        models[0].parameter_hash() ^ (models.size() == 2 ? models[1].parameter_hash() : 0);

    json per_image = json::array();
    double sum_pearson = 0.0, sum_iou = 0.0;
    long hits0 = 0, hits1 = 0, boxed = 0;
    double sum_ent0 = 0.0, sum_ent1 = 0.0;
    long pairs = 0;

    const int n = std::min(cfg.explain.sample_count, test.size());
    for (int i = 0; i < n; ++i) {
        const ManifestItem& item = test.item(i);
        std::vector<int> targets = cfg.explain.classes;
        if (targets.empty()) targets = {test.label_of(i)};
        const Tensor3 image = test.image(i);

        for (int target : targets) {
            if (target < 0 || target >= C) {
                out.errors.push_back("image " + item.path + ": class index " +
                                     std::to_string(target) + " out of range");
                continue;
            }
            std::vector<HeatMap> maps;
            for (std::size_t mi = 0; mi < models.size(); ++mi) {
                maps.push_back(score_cam(models[mi], image, target, layers[mi],
                                         cfg.distill.batch_size));
                char hname[128];
                std::snprintf(hname, sizeof(hname), "%s_img%04d_class%d.txt",
                              models[mi].name().c_str(), i, target);
                maps.back().save_sidecar(out_dir / "heatmaps" / hname);
            }
            char oname[64];
            std::snprintf(oname, sizeof(oname), "img%04d_class%d.png", i, target);
            render_heatmap_overlay(out_dir / "overlays" / oname, image, maps[0],
                                   maps.size() == 2 ? &maps[1] : nullptr);

            std::optional<Box> box;
            if (item.has_box) box = Box{item.box[0], item.box[1], item.box[2], item.box[3]};

            json rec;
            rec["image"] = item.path;
            rec["class"] = target;
            rec["entropy_" + models[0].name()] = maps[0].entropy();
            sum_ent0 += maps[0].entropy();
            if (box.has_value()) {
                const auto [y0, x0] = maps[0].argmax_yx();
                const bool hit0 = box->contains(x0, y0);
                rec["pointing_" + models[0].name()] = hit0;
                hits0 += hit0 ? 1 : 0;
                ++boxed;
            }
            if (maps.size() == 2) {
                const AlignmentScore a = alignment(maps[0], maps[1], box);
                rec["pearson"] = a.pearson;
                rec["iou_at_half"] = a.iou_at_half;
                rec["entropy_" + models[1].name()] = maps[1].entropy();
                sum_ent1 += maps[1].entropy();
                if (a.pointing_hit.has_value()) {
                    rec["pointing_" + models[1].name()] = *a.pointing_hit;
                    hits1 += *a.pointing_hit ? 1 : 0;
                }
                sum_pearson += a.pearson;
                sum_iou += a.iou_at_half;
            }
            ++pairs;
            per_image.push_back(std::move(rec));
        }
    }
    out.images = static_cast<int>(pairs);
    if (pairs > 0) {
        out.mean_entropy_primary = sum_ent0 / static_cast<double>(pairs);
        if (models.size() == 2) {
            out.mean_pearson = sum_pearson / static_cast<double>(pairs);
            out.mean_iou = sum_iou / static_cast<double>(pairs);
            out.mean_entropy_secondary = sum_ent1 / static_cast<double>(pairs);
        }
    }
    if (boxed > 0) {
        out.pointing_accuracy_primary = static_cast<double>(hits0) / static_cast<double>(boxed);
        if (models.size() == 2) {
            out.pointing_accuracy_secondary = static_cast<double>(hits1) / static_cast<double>(boxed);
        }
    }

    if (params_before !=
        (models[0].parameter_hash() ^ (models.size() == 2 ? models[1].parameter_hash() : 0))) {
        throw std::logic_error("explain must not mutate model parameters");
    }

    json report;
    report["images"] = out.images;
    report["per_image"] = std::move(per_image);
    report["errors"] = out.errors;
    json summary;
    summary["mean_entropy_" + models[0].name()] = out.mean_entropy_primary;
    if (boxed > 0) summary["pointing_accuracy_" + models[0].name()] = out.pointing_accuracy_primary;
    if (models.size() == 2) {
        summary["mean_pearson"] = out.mean_pearson;
        summary["mean_iou_at_half"] = out.mean_iou;
        summary["mean_entropy_" + models[1].name()] = out.mean_entropy_secondary;
        if (boxed > 0) {
            summary["pointing_accuracy_" + models[1].name()] = out.pointing_accuracy_secondary;
        }
    }
    report["summary"] = std::move(summary);
    std::ofstream rep(out_dir / "alignment.json");
    rep << report.dump(2) << "\n";
    return out;
}

DatasetManifest run_gen_synthetic(const RunConfig& cfg, const fs::path& root) {
    cfg.validate();
    if (cfg.dataset.kind != DatasetKind::Synthetic) {
        throw ConfigError("gen-synthetic requires dataset.kind = synthetic");
    }
    DatasetManifest m = generate_synthetic(cfg.dataset.synthetic, root.string());
    m.save(root / "manifest.json");
    return m;
}

}  // namespace kdx
