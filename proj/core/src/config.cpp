#include "dtl/config.hpp"

#include <fstream>

#include <json.hpp>

#include "dtl/errors.hpp"

namespace dtl::config {

using nlohmann::json;

namespace {

json scheme_to_json(const nn::TrainScheme& s) {
    return json{{"eta0", s.eta0},
                {"momentum", s.momentum},
                {"weight_decay", s.weight_decay},
                {"epochs", s.epochs},
                {"batch_size", s.batch_size},
                {"schedule", s.schedule == nn::Schedule::cosine ? "cosine" : "constant"},
                {"seed", s.seed}};
}

nn::TrainScheme scheme_from_json(const json& j) {
    nn::TrainScheme s;
    s.eta0 = j.at("eta0").get<double>();
    s.momentum = j.at("momentum").get<double>();
    s.weight_decay = j.at("weight_decay").get<double>();
    s.epochs = j.at("epochs").get<int>();
    s.batch_size = j.at("batch_size").get<int>();
    const std::string sched = j.at("schedule").get<std::string>();
    if (sched == "cosine") {
        s.schedule = nn::Schedule::cosine;
    } else if (sched == "constant") {
        s.schedule = nn::Schedule::constant;
    } else {
        throw ParseError("config: unknown schedule '" + sched + "'");
    }
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

json dataset_to_json(const DatasetConfig& d) {
    json j{{"kind", d.kind},
           {"subsample_gamma", d.subsample_gamma},
           {"subsample_seed", d.subsample_seed}};
    if (d.kind == "gaussian") {
        const auto& g = d.gaussian;
        j["k"] = g.k;
        j["d"] = g.d;
        j["n_train_per_class"] = g.n_train_per_class;
        j["n_test_per_class"] = g.n_test_per_class;
        j["separation"] = g.separation;
        j["seed"] = g.seed;
        j["subspace_dim"] = g.subspace_dim;
        j["family_seed"] = g.family_seed;
        j["task_id"] = g.task_id;
    } else {
        j["csv_train"] = d.csv_train;
        j["csv_test"] = d.csv_test;
        j["task_id"] = d.gaussian.task_id;
    }
    return j;
}

DatasetConfig dataset_from_json(const json& j) {
    DatasetConfig d;
    d.kind = j.at("kind").get<std::string>();
    d.subsample_gamma = j.value("subsample_gamma", 1.0);
    d.subsample_seed = j.value("subsample_seed", std::uint64_t{0});
    if (d.kind == "gaussian") {
        d.gaussian.k = j.at("k").get<int>();
        d.gaussian.d = j.at("d").get<int>();
        d.gaussian.n_train_per_class = j.at("n_train_per_class").get<int>();
        d.gaussian.n_test_per_class = j.at("n_test_per_class").get<int>();
        d.gaussian.separation = j.at("separation").get<double>();
        d.gaussian.seed = j.at("seed").get<std::uint64_t>();
        d.gaussian.subspace_dim = j.value("subspace_dim", 0);
        d.gaussian.family_seed = j.value("family_seed", std::uint64_t{0});
        d.gaussian.task_id = j.at("task_id").get<int>();
    } else if (d.kind == "csv") {
        d.csv_train = j.at("csv_train").get<std::string>();
        d.csv_test = j.at("csv_test").get<std::string>();
        d.gaussian.task_id = j.at("task_id").get<int>();
    } else {
        throw ParseError("config: unknown dataset kind '" + d.kind + "'");
    }
    return d;
}

json to_json(const RunConfig& cfg) {
    json model{{"input_dim", cfg.model.input_dim}, {"hidden", cfg.model.hidden}};
    model["tasks"] = json::array();
    for (const auto& t : cfg.model.tasks) {
        model["tasks"].push_back({{"id", t.task_id}, {"classes", t.num_classes}});
    }

    json dispose{{"scheme", scheme_to_json(cfg.dispose.scheme)},
                 {"in", cfg.dispose.input_checkpoint},
                 {"out", cfg.dispose.output_checkpoint},
                 {"lambda", cfg.dispose.dtl.lambda},
                 {"unlearn", losses::to_string(cfg.dispose.dtl.unlearn)},
                 {"retain", losses::to_string(cfg.dispose.dtl.retain)},
                 {"chunks", cfg.dispose.dtl.chunks},
                 {"source_task", cfg.dispose.dtl.source_task},
                 {"target_task", cfg.dispose.dtl.target_task},
                 {"workers", cfg.dispose.gc_workers},
                 {"freeze_source_head", cfg.dispose.freeze_source_head},
                 {"freeze_trunk", cfg.dispose.freeze_trunk}};
    if (cfg.dispose.neg_scheme) dispose["neg_scheme"] = scheme_to_json(*cfg.dispose.neg_scheme);

    return json{
        {"seed", cfg.seed},
        {"out_dir", cfg.out_dir},
        {"model", model},
        {"init_seed", cfg.init_seed},
        {"scratch_init_seed", cfg.scratch_init_seed},
        {"data", json{{"source", dataset_to_json(cfg.source)},
                      {"target", dataset_to_json(cfg.target)},
                      {"piggyback", json{{"base", cfg.piggyback.base},
                                         {"gamma", cfg.piggyback.gamma},
                                         {"subsample_seed", cfg.piggyback.subsample_seed},
                                         {"fresh_head", cfg.piggyback.fresh_head},
                                         {"scheme", scheme_to_json(cfg.piggyback.scheme)}}}}},
        {"stages", json{{"pretrain", json{{"scheme", scheme_to_json(cfg.pretrain.scheme)},
                                          {"in", cfg.pretrain.input_checkpoint},
                                          {"out", cfg.pretrain.output_checkpoint}}},
                        {"finetune", json{{"scheme", scheme_to_json(cfg.finetune.scheme)},
                                          {"in", cfg.finetune.input_checkpoint},
                                          {"out", cfg.finetune.output_checkpoint}}},
                        {"dispose", dispose}}},
    };
}

RunConfig from_json(const json& j) {
    RunConfig cfg;
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.out_dir = j.at("out_dir").get<std::string>();
    const json& model = j.at("model");
    cfg.model.input_dim = model.at("input_dim").get<int>();
    cfg.model.hidden = model.at("hidden").get<std::vector<int>>();
    for (const auto& t : model.at("tasks")) {
        cfg.model.tasks.push_back({t.at("id").get<int>(), t.at("classes").get<int>()});
    }
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    cfg.scratch_init_seed = j.at("scratch_init_seed").get<std::uint64_t>();

    const json& d = j.at("data");
    cfg.source = dataset_from_json(d.at("source"));
    cfg.target = dataset_from_json(d.at("target"));
    const json& pb = d.at("piggyback");
    cfg.piggyback.base = pb.at("base").get<std::string>();
    cfg.piggyback.gamma = pb.at("gamma").get<double>();
    cfg.piggyback.subsample_seed = pb.at("subsample_seed").get<std::uint64_t>();
    cfg.piggyback.fresh_head = pb.at("fresh_head").get<bool>();
    cfg.piggyback.scheme = scheme_from_json(pb.at("scheme"));

    const json& stages = j.at("stages");
    cfg.pretrain.scheme = scheme_from_json(stages.at("pretrain").at("scheme"));
    cfg.pretrain.input_checkpoint = stages.at("pretrain").value("in", "");
    cfg.pretrain.output_checkpoint = stages.at("pretrain").at("out").get<std::string>();
    cfg.finetune.scheme = scheme_from_json(stages.at("finetune").at("scheme"));
    cfg.finetune.input_checkpoint = stages.at("finetune").at("in").get<std::string>();
    cfg.finetune.output_checkpoint = stages.at("finetune").at("out").get<std::string>();

    const json& disp = stages.at("dispose");
    cfg.dispose.scheme = scheme_from_json(disp.at("scheme"));
    cfg.dispose.input_checkpoint = disp.at("in").get<std::string>();
    cfg.dispose.output_checkpoint = disp.at("out").get<std::string>();
    cfg.dispose.dtl.lambda = disp.at("lambda").get<double>();
    cfg.dispose.dtl.unlearn = losses::parse_unlearn_kind(disp.at("unlearn").get<std::string>());
    cfg.dispose.dtl.retain = losses::parse_retain_kind(disp.at("retain").get<std::string>());
    cfg.dispose.dtl.chunks = disp.at("chunks").get<int>();
    cfg.dispose.dtl.source_task = disp.at("source_task").get<int>();
    cfg.dispose.dtl.target_task = disp.at("target_task").get<int>();
    cfg.dispose.gc_workers = disp.at("workers").get<int>();
    cfg.dispose.freeze_source_head = disp.at("freeze_source_head").get<bool>();
    cfg.dispose.freeze_trunk = disp.at("freeze_trunk").get<bool>();
    if (disp.contains("neg_scheme")) {
        cfg.dispose.neg_scheme = scheme_from_json(disp.at("neg_scheme"));
    }
    return cfg;
}

}  // namespace

void RunConfig::validate() const {
    if (model.input_dim <= 0) throw ContractViolation("config: model input_dim must be positive");
    dispose.dtl.validate();
    if (piggyback.gamma <= 0.0 || piggyback.gamma > 1.0) {
        throw ContractViolation("config: piggyback gamma must be in (0, 1]");
    }
}

RunConfig default_benchmark(std::uint64_t s) {
    RunConfig cfg;
    cfg.seed = s;
    cfg.out_dir = "runs/bench-" + std::to_string(s);

    cfg.model.input_dim = 48;
    cfg.model.hidden = {64, 64};
    cfg.model.tasks = {{0, 10}, {1, 4}};
    cfg.init_seed = 400 + s;
    cfg.scratch_init_seed = 420 + s;

    cfg.source.kind = "gaussian";
    cfg.source.gaussian = {10, 48, 500, 40, 1.8, 200 + s, 10, 100 + s, 0};
    cfg.target.kind = "gaussian";
    cfg.target.gaussian = {4, 48, 200, 50, 2.5, 300 + s, 10, 100 + s, 1};
    cfg.target.subsample_gamma = 0.05;
    cfg.target.subsample_seed = 310 + s;

    cfg.piggyback.base = "source";
    cfg.piggyback.gamma = 0.10;
    cfg.piggyback.subsample_seed = 320 + s;
    cfg.piggyback.fresh_head = false;
    cfg.piggyback.scheme = {0.01, 0.9, 1e-4, 30, 32, nn::Schedule::cosine, 700 + s};

    cfg.pretrain.scheme = {0.05, 0.9, 1e-4, 30, 128, nn::Schedule::cosine, 410 + s};
    cfg.pretrain.output_checkpoint = "pretrain.ckpt";
    cfg.finetune.scheme = {0.01, 0.9, 1e-4, 30, 32, nn::Schedule::cosine, 510 + s};
    cfg.finetune.input_checkpoint = "pretrain.ckpt";
    cfg.finetune.output_checkpoint = "tl.ckpt";

    cfg.dispose.scheme = {0.03, 0.9, 1e-4, 8, 24, nn::Schedule::cosine, 610 + s};
    cfg.dispose.input_checkpoint = "tl.ckpt";
    cfg.dispose.output_checkpoint = "dtl.ckpt";
    cfg.dispose.dtl.lambda = 0.3;
    cfg.dispose.dtl.unlearn = losses::UnlearnKind::gc;
    cfg.dispose.dtl.retain = losses::RetainKind::src_kd;
    cfg.dispose.dtl.chunks = 8;
    cfg.dispose.dtl.source_task = 0;
    cfg.dispose.dtl.target_task = 1;
    cfg.dispose.gc_workers = 1;
    cfg.dispose.neg_scheme = nn::TrainScheme{1e-4, 0.9, 1e-4, 4, 24, nn::Schedule::cosine, 610 + s};
    return cfg;
}

RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError("config: malformed JSON in " + path);
    try {
        return from_json(j);
    } catch (const json::exception& e) {
        throw ParseError("config: " + std::string(e.what()) + " in " + path);
    }
}

void save(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("config: cannot write " + path);
    out << dump(cfg) << "\n";
}

std::string dump(const RunConfig& cfg) { return to_json(cfg).dump(2); }

RunConfig parse(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("config: malformed JSON");
    return from_json(j);
}

RunConfig apply_override(const RunConfig& cfg, const std::string& key_value) {
    const auto eq = key_value.find('=');
    if (eq == std::string::npos) {
        throw ContractViolation("override: expected KEY=VALUE, got '" + key_value + "'");
    }
    std::string key = key_value.substr(0, eq);
    const std::string value = key_value.substr(eq + 1);
    for (char& c : key) {
        if (c == '.') c = '/';
    }
    json j = to_json(cfg);
    const json::json_pointer ptr("/" + key);
    try {
        json parsed = json::parse(value, nullptr, false);
        if (parsed.is_discarded()) parsed = value;  // bare strings
        // Keep the original type when the target exists as a string.
        if (j.contains(ptr) && j.at(ptr).is_string() && !parsed.is_string()) {
            parsed = value;
        }
        j[ptr] = parsed;
        return from_json(j);
    } catch (const json::exception& e) {
        throw ContractViolation("override: cannot set '" + key + "': " + e.what());
    }
}

BenchData build_datasets(const RunConfig& cfg) {
    cfg.validate();
    BenchData b;
    auto realize = [](const DatasetConfig& d) {
        std::pair<data::Dataset, data::Dataset> pair;
        if (d.kind == "gaussian") {
            pair = data::make_gaussian_task(d.gaussian);
        } else {
            pair = data::load_csv_task(d.csv_train, d.csv_test, d.gaussian.task_id);
        }
        if (d.subsample_gamma < 1.0) {
            pair.first = data::subsample(pair.first, {d.subsample_gamma, d.subsample_seed});
        }
        return pair;
    };
    std::tie(b.source_train, b.source_test) = realize(cfg.source);
    std::tie(b.target_train, b.target_test) = realize(cfg.target);

    const bool from_source = cfg.piggyback.base == "source";
    if (!from_source && cfg.piggyback.base != "target") {
        throw ContractViolation("config: piggyback base must be 'source' or 'target'");
    }
    const data::Dataset& base = from_source ? b.source_train : b.target_train;
    b.piggyback_train = cfg.piggyback.gamma < 1.0
                            ? data::subsample(base, {cfg.piggyback.gamma, cfg.piggyback.subsample_seed})
                            : base;
    b.piggyback_from_source = from_source;
    return b;
}

}  // namespace dtl::config
