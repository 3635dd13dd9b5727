#include "dtl/runner.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dtl/errors.hpp"

namespace dtl::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string records_file_for(const std::string& stage) { return "records_" + stage + ".jsonl"; }

void write_records(const fs::path& dir, const std::string& stage,
                   const std::vector<pipeline::RunRecord>& records) {
    std::ofstream out(dir / records_file_for(stage));
    for (const auto& r : records) {
        json j{{"stage", r.stage},     {"epoch", r.epoch},
               {"step", r.step},       {"loss", r.loss},
               {"retain", r.retain_component}, {"unlearn", r.unlearn_component},
               {"lr", r.lr}};
        out << j.dump() << "\n";
    }
}

void append_metrics(const fs::path& dir, const std::vector<MetricRecord>& recs) {
    std::ofstream out(dir / "metrics.jsonl", std::ios::app);
    for (const auto& r : recs) out << to_jsonl(r) << "\n";
}

// The manifest is rebuilt from the directory contents plus the resolved
// config, so it stays a pure function of the run.
void refresh_manifest(const config::RunConfig& cfg) {
    const fs::path dir(cfg.out_dir);
    json manifest;
    manifest["config"] = json::parse(config::dump(cfg));
    json checkpoints = json::array();
    json metric_files = json::array();
    json record_files = json::array();
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
        if (name.ends_with(".ckpt")) checkpoints.push_back(name);
        if (name == "metrics.jsonl" || name == "sweep.jsonl") metric_files.push_back(name);
        if (name.starts_with("records_")) record_files.push_back(name);
    }
    manifest["checkpoints"] = checkpoints;
    manifest["metric_files"] = metric_files;
    manifest["record_files"] = record_files;
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << "\n";
}

fs::path ensure_out_dir(const config::RunConfig& cfg) {
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    return dir;
}

nn::Model load_input(const config::RunConfig& cfg, const std::string& name) {
    const fs::path path = fs::path(cfg.out_dir) / name;
    if (!fs::exists(path)) {
        throw IoError("missing checkpoint " + path.string());
    }
    return nn::Model::load(path.string());
}

eval::PlProtocol pl_protocol(const config::RunConfig& cfg, const config::BenchData& bench) {
    eval::PlProtocol proto;
    proto.train = &bench.piggyback_train;
    proto.test = &bench.piggyback_test();
    proto.task = bench.piggyback_train.task_id;
    proto.num_classes = bench.piggyback_train.num_classes;
    proto.scheme = cfg.piggyback.scheme;
    proto.fresh_head = cfg.piggyback.fresh_head;
    return proto;
}

std::vector<MetricRecord> standard_metrics(const config::RunConfig& cfg,
                                           const config::BenchData& bench, const nn::Model& model,
                                           const std::string& name) {
    std::vector<MetricRecord> out;
    out.push_back({name, "acc_s", "source-test", 1.0, cfg.seed,
                   eval::accuracy(model, cfg.source.gaussian.task_id, bench.source_test)});
    out.push_back({name, "acc_t", "target-test", 1.0, cfg.seed,
                   eval::accuracy(model, cfg.target.gaussian.task_id, bench.target_test)});
    return out;
}

}  // namespace

std::string to_jsonl(const MetricRecord& rec) {
    json j{{"model", rec.model}, {"metric", rec.metric},   {"dataset", rec.dataset},
           {"gamma", rec.gamma}, {"seed", rec.seed},       {"value", rec.value}};
    return j.dump();
}

nn::TrainScheme dispose_scheme_for(const config::RunConfig& cfg, losses::UnlearnKind kind) {
    if (kind == losses::UnlearnKind::neg && cfg.dispose.neg_scheme) {
        return *cfg.dispose.neg_scheme;
    }
    return cfg.dispose.scheme;
}

void run_pretrain(const config::RunConfig& cfg) {
    const fs::path dir = ensure_out_dir(cfg);
    const config::BenchData bench = config::build_datasets(cfg);
    nn::Model model = cfg.pretrain.input_checkpoint.empty()
                          ? nn::Model::init(cfg.model, cfg.init_seed)
                          : load_input(cfg, cfg.pretrain.input_checkpoint);
    const auto records = pipeline::fit_ce(model, cfg.source.gaussian.task_id, bench.source_train,
                                          cfg.pretrain.scheme, "pretrain");
    model.save((dir / cfg.pretrain.output_checkpoint).string());
    write_records(dir, "pretrain", records);
    append_metrics(dir, standard_metrics(cfg, bench, model, "pretrain"));
    refresh_manifest(cfg);
}

void run_finetune(const config::RunConfig& cfg) {
    const fs::path dir = ensure_out_dir(cfg);
    const config::BenchData bench = config::build_datasets(cfg);
    nn::Model model = load_input(cfg, cfg.finetune.input_checkpoint);
    const auto records = pipeline::fit_ce(model, cfg.target.gaussian.task_id, bench.target_train,
                                          cfg.finetune.scheme, "finetune");
    model.save((dir / cfg.finetune.output_checkpoint).string());
    write_records(dir, "finetune", records);
    append_metrics(dir, standard_metrics(cfg, bench, model, "tl"));
    refresh_manifest(cfg);
}

void run_dispose(const config::RunConfig& cfg) {
    const fs::path dir = ensure_out_dir(cfg);
    const config::BenchData bench = config::build_datasets(cfg);
    nn::Model teacher = load_input(cfg, cfg.dispose.input_checkpoint);
    nn::Model model = teacher.clone();

    pipeline::DisposeOptions options;
    options.dtl = cfg.dispose.dtl;
    options.scheme = dispose_scheme_for(cfg, cfg.dispose.dtl.unlearn);
    options.gc_workers = cfg.dispose.gc_workers;
    options.freeze_source_head = cfg.dispose.freeze_source_head;
    options.freeze_trunk = cfg.dispose.freeze_trunk;

    const auto records =
        pipeline::dispose(model, teacher, bench.source_train, &bench.target_train, options);
    model.save((dir / cfg.dispose.output_checkpoint).string());
    write_records(dir, "dispose", records);
    auto metrics = standard_metrics(cfg, bench, model, "dtl");
    metrics.push_back({"dtl", "acc_pl", cfg.piggyback.base + "-piggyback", cfg.piggyback.gamma,
                       cfg.seed, eval::pl_accuracy(model, pl_protocol(cfg, bench))});
    append_metrics(dir, metrics);
    refresh_manifest(cfg);
}

void run_piggyback(const config::RunConfig& cfg) {
    const fs::path dir = ensure_out_dir(cfg);
    const config::BenchData bench = config::build_datasets(cfg);
    nn::Model base = load_input(cfg, cfg.dispose.output_checkpoint);
    const eval::PlProtocol proto = pl_protocol(cfg, bench);

    nn::Model piggy = base.clone();
    if (!piggy.has_task(proto.task) || proto.fresh_head) {
        piggy.attach_head(nn::TaskSpec{proto.task, proto.num_classes}, proto.scheme.seed);
    }
    const auto records =
        pipeline::fit_ce(piggy, proto.task, *proto.train, proto.scheme, "piggyback");
    piggy.save((dir / "pl.ckpt").string());
    write_records(dir, "piggyback", records);
    append_metrics(dir, {{"pl", "acc_pl", cfg.piggyback.base + "-piggyback", cfg.piggyback.gamma,
                          cfg.seed, eval::accuracy(piggy, proto.task, *proto.test)}});
    refresh_manifest(cfg);
}

std::vector<SweepPoint> run_sweep(const config::RunConfig& cfg,
                                  const std::vector<double>& lambda_grid,
                                  const std::vector<losses::UnlearnKind>& kinds) {
    const fs::path dir = ensure_out_dir(cfg);
    const config::BenchData bench = config::build_datasets(cfg);
    nn::Model teacher = load_input(cfg, cfg.dispose.input_checkpoint);
    const eval::PlProtocol proto = pl_protocol(cfg, bench);

    std::vector<SweepPoint> points;
    for (const auto kind : kinds) {
        for (const double lambda : lambda_grid) {
            SweepPoint p;
            p.unlearn = losses::to_string(kind);
            p.lambda = lambda;
            pipeline::DisposeOptions options;
            options.dtl = cfg.dispose.dtl;
            options.dtl.unlearn = kind;
            options.dtl.lambda = lambda;
            options.scheme = dispose_scheme_for(cfg, kind);
            options.gc_workers = cfg.dispose.gc_workers;
            nn::Model model = teacher.clone();
            try {
                pipeline::dispose(model, teacher, bench.source_train, &bench.target_train,
                                  options);
                p.acc_t = eval::accuracy(model, cfg.target.gaussian.task_id, bench.target_test);
                p.acc_s = eval::accuracy(model, cfg.source.gaussian.task_id, bench.source_test);
                p.acc_pl = eval::pl_accuracy(model, proto);
            } catch (const DivergedRunError&) {
                p.diverged = true;
            }
            points.push_back(p);
        }
    }

    std::ofstream jsonl(dir / "sweep.jsonl");
    for (const auto& p : points) {
        json j{{"unlearn", p.unlearn}, {"lambda", p.lambda}, {"diverged", p.diverged},
               {"acc_t", p.acc_t},     {"acc_s", p.acc_s},   {"acc_pl", p.acc_pl}};
        jsonl << j.dump() << "\n";
    }

    std::ofstream table(dir / "sweep_frontier.txt");
    table << "unlearn   lambda   acc_t    acc_s    acc_pl\n";
    char line[128];
    for (const auto& p : points) {
        if (p.diverged) {
            std::snprintf(line, sizeof(line), "%-9s %6.3f %8s %8s %8s\n", p.unlearn.c_str(),
                          p.lambda, "n/a", "n/a", "n/a");
        } else {
            std::snprintf(line, sizeof(line), "%-9s %6.3f %8.4f %8.4f %8.4f\n", p.unlearn.c_str(),
                          p.lambda, p.acc_t, p.acc_s, p.acc_pl);
        }
        table << line;
    }

    for (const auto kind : kinds) {
        const std::string name = losses::to_string(kind);
        std::ofstream plot(dir / ("frontier_" + name + ".dat"));
        plot << "# acc_t acc_pl (lambda grid sweep, unlearn=" << name << ")\n";
        for (const auto& p : points) {
            if (p.unlearn == name && !p.diverged) {
                std::snprintf(line, sizeof(line), "%.6f %.6f\n", p.acc_t, p.acc_pl);
                plot << line;
            }
        }
    }
    refresh_manifest(cfg);
    return points;
}

std::string run_report(const std::string& manifest_dir) {
    const fs::path dir(manifest_dir);
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw IoError("report: no manifest.json in " + manifest_dir);
    }
    std::ifstream min(manifest_path);
    json manifest = json::parse(min, nullptr, false);
    if (manifest.is_discarded()) throw ParseError("report: malformed manifest");

    // metric -> model -> value
    std::map<std::string, std::map<std::string, double>> table;
    std::set<std::string> models;
    // model -> gamma -> PL accuracy, for the per-gamma curve files
    std::map<std::string, std::map<double, double>> pl_curves;
    const fs::path metrics_path = dir / "metrics.jsonl";
    if (fs::exists(metrics_path)) {
        std::ifstream in(metrics_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;
            const std::string model = j.at("model").get<std::string>();
            const std::string metric = j.at("metric").get<std::string>();
            table[metric][model] = j.at("value").get<double>();
            models.insert(model);
            if (metric == "acc_pl") {
                pl_curves[model][j.at("gamma").get<double>()] = j.at("value").get<double>();
            }
        }
    }
    for (const auto& [model, curve] : pl_curves) {
        std::ofstream plot(dir / ("pl_curve_" + model + ".dat"));
        plot << "# gamma acc_pl (piggyback subsample ratio sweep, model=" << model << ")\n";
        char line[64];
        for (const auto& [gamma, value] : curve) {
            std::snprintf(line, sizeof(line), "%.6f %.6f\n", gamma, value);
            plot << line;
        }
    }

    std::ostringstream out;
    out << "run: " << manifest_dir << "\n\n";
    out << "metric    ";
    for (const auto& m : models) {
        char cell[32];
        std::snprintf(cell, sizeof(cell), " %10s", m.c_str());
        out << cell;
    }
    out << "\n";
    for (const auto& [metric, row] : table) {
        char cell[64];
        std::snprintf(cell, sizeof(cell), "%-10s", metric.c_str());
        out << cell;
        for (const auto& m : models) {
            const auto it = row.find(m);
            if (it == row.end()) {
                std::snprintf(cell, sizeof(cell), " %10s", "n/a");
            } else {
                std::snprintf(cell, sizeof(cell), " %10.4f", it->second);
            }
            out << cell;
        }
        out << "\n";
    }

    // Delta rows vs the TL and TGT reference models, when present.
    for (const std::string ref : {"tl", "tgt"}) {
        bool have_ref = models.count(ref) > 0;
        if (!have_ref) continue;
        out << "\ndelta vs " << ref << " (percentage points)\n";
        for (const auto& [metric, row] : table) {
            const auto rit = row.find(ref);
            if (rit == row.end()) continue;
            char cell[64];
            std::snprintf(cell, sizeof(cell), "%-10s", metric.c_str());
            out << cell;
            for (const auto& m : models) {
                const auto it = row.find(m);
                if (it == row.end()) {
                    std::snprintf(cell, sizeof(cell), " %10s", "n/a");
                } else {
                    std::snprintf(cell, sizeof(cell), " %10.2f", (it->second - rit->second) * 100.0);
                }
                out << cell;
            }
            out << "\n";
        }
    }

    const std::string text = out.str();
    std::ofstream rep(dir / "report.txt");
    rep << text;
    return text;
}

}  // namespace dtl::runner
