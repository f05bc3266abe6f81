#include "cat/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cat/checkpoint.hpp"
#include "cat/errors.hpp"
#include "cat/eval.hpp"
#include "cat/text.hpp"

namespace cat::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void config_fail(const std::string& message) {
    throw ConfigError("config: " + message);
}

void check_keys(const json& section, const std::string& name,
                std::initializer_list<const char*> allowed) {
    for (auto it = section.begin(); it != section.end(); ++it) {
        bool known = false;
        for (const char* key : allowed)
            if (it.key() == key) known = true;
        if (!known) config_fail("unknown key \"" + it.key() + "\" in " + name);
    }
}

const json& section_of(const json& doc, const char* name, const json& fallback) {
    if (!doc.contains(name)) return fallback;
    const json& section = doc.at(name);
    if (!section.is_object()) config_fail(std::string("section \"") + name + "\" must be an object");
    return section;
}

double get_double(const json& section, const char* key, double fallback) {
    if (!section.contains(key)) return fallback;
    const json& value = section.at(key);
    if (!value.is_number()) config_fail(std::string("\"") + key + "\" must be a number");
    return value.get<double>();
}

int64_t get_int(const json& section, const char* key, int64_t fallback) {
    if (!section.contains(key)) return fallback;
    const json& value = section.at(key);
    if (!value.is_number_integer()) config_fail(std::string("\"") + key + "\" must be an integer");
    return value.get<int64_t>();
}

uint64_t get_seed(const json& section, const char* key, uint64_t fallback) {
    if (!section.contains(key)) return fallback;
    const json& value = section.at(key);
    if (!value.is_number_integer() || value.get<int64_t>() < 0)
        config_fail(std::string("\"") + key + "\" must be a non-negative integer");
    return value.get<uint64_t>();
}

std::string get_string(const json& section, const char* key, const std::string& fallback) {
    if (!section.contains(key)) return fallback;
    const json& value = section.at(key);
    if (!value.is_string()) config_fail(std::string("\"") + key + "\" must be a string");
    return value.get<std::string>();
}

TrainMode mode_from_string(const std::string& name) {
    if (name == "baseline") return TrainMode::Baseline;
    if (name == "at") return TrainMode::AT;
    if (name == "at_ctr") return TrainMode::AT_CTR;
    config_fail("mode must be one of baseline, at, at_ctr (got \"" + name + "\")");
}

std::string mode_to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::Baseline: return "baseline";
        case TrainMode::AT: return "at";
        default: return "at_ctr";
    }
}

PerturbationConfig::NormForm norm_from_string(const std::string& name) {
    if (name == "max") return PerturbationConfig::NormForm::MaxNorm;
    if (name == "l2") return PerturbationConfig::NormForm::L2;
    if (name == "random") return PerturbationConfig::NormForm::RandomPerBatch;
    config_fail("norm must be one of max, l2, random (got \"" + name + "\")");
}

std::string norm_to_string(PerturbationConfig::NormForm form) {
    switch (form) {
        case PerturbationConfig::NormForm::MaxNorm: return "max";
        case PerturbationConfig::NormForm::L2: return "l2";
        default: return "random";
    }
}

PerturbationConfig::Target target_from_string(const std::string& name) {
    if (name == "matrix") return PerturbationConfig::Target::EmbeddingMatrix;
    if (name == "words") return PerturbationConfig::Target::WordEmbeddings;
    config_fail("target must be one of matrix, words (got \"" + name + "\")");
}

std::string target_to_string(PerturbationConfig::Target target) {
    return target == PerturbationConfig::Target::EmbeddingMatrix ? "matrix" : "words";
}

PerturbationConfig::Sign sign_from_string(const std::string& name) {
    if (name == "ascent") return PerturbationConfig::Sign::Ascent;
    if (name == "negated") return PerturbationConfig::Sign::Negated;
    config_fail("sign must be one of ascent, negated (got \"" + name + "\")");
}

std::string sign_to_string(PerturbationConfig::Sign sign) {
    return sign == PerturbationConfig::Sign::Ascent ? "ascent" : "negated";
}

void check_metric_name(const std::string& metric) {
    if (metric != "accuracy" && metric != "f1" && metric != "mcc")
        config_fail("metric must be one of accuracy, f1, mcc (got \"" + metric + "\")");
}

json config_json(const RunConfig& rc) {
    json doc;
    doc["model"] = {{"layers", rc.train.encoder.layers},
                    {"heads", rc.train.encoder.heads},
                    {"hidden", rc.train.encoder.d_h},
                    {"ffn", rc.train.encoder.ffn},
                    {"max_len", rc.train.encoder.max_len},
                    {"dropout", rc.train.encoder.dropout},
                    {"vocab_min_freq", rc.vocab_min_freq}};
    doc["train"] = {{"mode", mode_to_string(rc.train.mode)},
                    {"learning_rate", rc.train.learning_rate},
                    {"weight_decay", rc.train.weight_decay},
                    {"warmup_fraction", rc.train.warmup_fraction},
                    {"epochs", rc.train.epochs},
                    {"batch_size", rc.train.batch_size},
                    {"seed", rc.train.seed}};
    doc["adversarial"] = {{"epsilon", rc.train.perturbation.epsilon},
                          {"norm", norm_to_string(rc.train.perturbation.norm_form)},
                          {"target", target_to_string(rc.train.perturbation.target)},
                          {"sign", sign_to_string(rc.train.perturbation.sign_convention)},
                          {"seed", rc.train.perturbation.seed}};
    doc["contrastive"] = {{"tau", rc.train.contrastive.tau},
                          {"lambda", rc.train.contrastive.lambda},
                          {"projection_dim", rc.train.contrastive.d_k}};
    doc["eval"] = {{"metric", rc.metric},
                   {"iterations", rc.iterations},
                   {"seed", rc.significance_seed}};
    return doc;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    if (in.bad()) throw DataError("read failed: " + path);
    return buffer.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open file for writing: " + path);
    out << content;
    out.flush();
    if (!out) throw DataError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// artifacts

struct InputFile {
    std::string name;
    std::string path;
};

struct Workspace {
    fs::path out_dir;
    json manifest;

    Workspace(const std::string& out, const std::string& command) {
        fs::create_directories(out);
        out_dir = out;
        manifest["command"] = command;
        manifest["tool_version"] = kToolVersion;
        manifest["outputs"] = json::object();
        manifest["output_fingerprints"] = json::object();
    }

    void record_inputs(const std::vector<InputFile>& inputs) {
        json block = json::object();
        for (const InputFile& input : inputs)
            block[input.name] = {{"path", input.path},
                                 {"fnv1a64", hex64(fingerprint_file(input.path))}};
        manifest["inputs"] = block;
    }

    void write_artifact(const std::string& name, const std::string& label,
                        const std::string& content) {
        const fs::path path = out_dir / name;
        write_file(path.string(), content);
        manifest["outputs"][label] = name;
        manifest["output_fingerprints"][name] = hex64(fnv1a64(content));
    }

    void finish() {
        write_file((out_dir / "manifest.json").string(), manifest.dump(2) + "\n");
    }
};

std::string dataset_jsonl(const Dataset& dataset, const std::vector<int64_t>* keep) {
    std::ostringstream out;
    auto emit = [&](const Example& example) {
        json row;
        row["label"] = dataset.label_names[example.label];
        row["text"] = example.text;
        if (example.text2) row["text2"] = *example.text2;
        out << row.dump() << '\n';
    };
    if (keep == nullptr) {
        for (const Example& example : dataset.examples) emit(example);
    } else {
        for (int64_t index : *keep) emit(dataset.examples[static_cast<size_t>(index)]);
    }
    return out.str();
}

std::vector<PredictionRecord> load_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open prediction file: " + path);
    std::vector<PredictionRecord> records;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!row.is_object() || !row.contains("id") || !row.contains("gold") ||
            !row.contains("pred") || !row.at("id").is_number_integer() ||
            !row.at("gold").is_number_integer() || !row.at("pred").is_number_integer())
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": expected integer fields id, gold, pred");
        PredictionRecord record;
        record.id = row.at("id").get<int64_t>();
        record.gold = row.at("gold").get<int32_t>();
        record.pred = row.at("pred").get<int32_t>();
        record.correct = record.gold == record.pred;
        records.push_back(record);
    }
    if (records.empty()) throw DataError("prediction file has no records: " + path);
    return records;
}

std::string predictions_jsonl(const Dataset& dataset, const std::vector<int32_t>& preds) {
    std::ostringstream out;
    for (size_t i = 0; i < dataset.size(); ++i) {
        json row;
        row["id"] = static_cast<int64_t>(i);
        row["gold"] = dataset.examples[i].label;
        row["pred"] = preds[i];
        out << row.dump() << '\n';
    }
    return out.str();
}

Vocab vocab_from(const Dataset& dataset, int64_t min_freq) {
    std::vector<std::string> corpus;
    corpus.reserve(dataset.size() * 2);
    for (const Example& example : dataset.examples) {
        corpus.push_back(example.text);
        if (example.text2) corpus.push_back(*example.text2);
    }
    return build_vocab(corpus, min_freq);
}

double dataset_accuracy(const Dataset& dataset, const std::vector<int32_t>& preds) {
    std::vector<int32_t> gold;
    gold.reserve(dataset.size());
    for (const Example& example : dataset.examples) gold.push_back(example.label);
    return accuracy(make_records(gold, preds));
}

// ---------------------------------------------------------------------------
// commands

int cmd_train(const RunConfig& rc_in, const std::string& train_path,
              const std::string& dev_path, const std::string& out_dir) {
    RunConfig rc = rc_in;
    const Dataset train_ds = load_jsonl(train_path);
    const Dataset dev_ds = load_jsonl(dev_path, train_ds.label_names);
    const Vocab vocab = vocab_from(train_ds, rc.vocab_min_freq);
    rc.train.encoder.d_v = vocab.size();
    rc.train.validate();

    const TrainResult result = train(train_ds, dev_ds, vocab, rc.train);

    Workspace ws(out_dir, "train");
    ws.record_inputs({{"train", train_path}, {"dev", dev_path}});
    const json snapshot = config_json(rc);
    const std::string fingerprint = hex64(fnv1a64(snapshot.dump()));
    ws.manifest["config"] = snapshot;
    ws.manifest["config_fingerprint"] = fingerprint;
    ws.manifest["parameters"] = json::object();

    {
        const fs::path path = ws.out_dir / "checkpoint.bin";
        save_checkpoint(path.string(), result.state.encoder,
                        result.state.projection ? &*result.state.projection : nullptr);
        ws.manifest["outputs"]["checkpoint"] = "checkpoint.bin";
        ws.manifest["output_fingerprints"]["checkpoint.bin"] =
            hex64(fnv1a64(read_file(path.string())));
    }

    std::ostringstream metrics;
    for (const EpochLog& row : result.log) {
        json line;
        line["epoch"] = row.epoch;
        line["train_loss"] = row.mean_train_loss;
        line["dev_accuracy"] = row.dev_accuracy;
        line["config_fingerprint"] = fingerprint;
        line["manifest"] = "manifest.json";
        metrics << line.dump() << '\n';
    }
    ws.write_artifact("metrics.jsonl", "metrics", metrics.str());

    const std::vector<int32_t> preds =
        predict(result.state.encoder, dev_ds, vocab, rc.train.batch_size);
    ws.write_artifact("predictions.jsonl", "predictions", predictions_jsonl(dev_ds, preds));

    json vocab_doc;
    vocab_doc["tokens"] = vocab.tokens;
    vocab_doc["manifest"] = "manifest.json";
    ws.write_artifact("vocab.json", "vocab", vocab_doc.dump(2) + "\n");

    ws.finish();
    return 0;
}

int cmd_ablation(const RunConfig& rc_in, const std::string& train_path,
                 const std::string& dev_path, const std::string& test_path,
                 const std::string& subset_path, const std::vector<uint64_t>& seeds,
                 const std::string& out_dir) {
    RunConfig rc = rc_in;
    const Dataset train_ds = load_jsonl(train_path);
    const Dataset dev_ds = load_jsonl(dev_path, train_ds.label_names);
    const Dataset test_ds = load_jsonl(test_path, train_ds.label_names);
    Dataset subset_ds;
    const bool with_subset = !subset_path.empty();
    if (with_subset) subset_ds = load_jsonl(subset_path, train_ds.label_names);
    const Vocab vocab = vocab_from(train_ds, rc.vocab_min_freq);
    rc.train.encoder.d_v = vocab.size();
    rc.train.validate();

    const json snapshot = config_json(rc);
    const std::string fingerprint = hex64(fnv1a64(snapshot.dump()));
    const TrainMode modes[] = {TrainMode::Baseline, TrainMode::AT, TrainMode::AT_CTR};

    std::ostringstream rows;
    for (TrainMode mode : modes) {
        for (uint64_t seed : seeds) {
            TrainConfig tc = rc.train;
            tc.mode = mode;
            tc.seed = seed;
            const TrainResult result = train(train_ds, dev_ds, vocab, tc);
            json row;
            row["mode"] = mode_to_string(mode);
            row["seed"] = seed;
            row["dev_accuracy"] = result.log.back().dev_accuracy;
            row["test_accuracy"] = dataset_accuracy(
                test_ds, predict(result.state.encoder, test_ds, vocab, tc.batch_size));
            if (with_subset)
                row["difficult_accuracy"] = dataset_accuracy(
                    subset_ds,
                    predict(result.state.encoder, subset_ds, vocab, tc.batch_size));
            row["config_fingerprint"] = fingerprint;
            row["manifest"] = "manifest.json";
            rows << row.dump() << '\n';
        }
    }

    Workspace ws(out_dir, "ablation");
    std::vector<InputFile> inputs = {
        {"train", train_path}, {"dev", dev_path}, {"test", test_path}};
    if (with_subset) inputs.push_back({"subset", subset_path});
    ws.record_inputs(inputs);
    ws.manifest["config"] = snapshot;
    ws.manifest["config_fingerprint"] = fingerprint;
    ws.manifest["parameters"] = {{"seeds", seeds}};
    ws.write_artifact("ablation.jsonl", "ablation", rows.str());
    ws.finish();
    return 0;
}

int cmd_split(const std::string& train_path, const std::string& test_path,
              double fraction, const std::string& out_dir) {
    const Dataset train_ds = load_jsonl(train_path);
    const Dataset test_ds = load_jsonl(test_path, train_ds.label_names);
    const DifficultSubset subset = difficult_subset(train_ds, test_ds, fraction);

    Workspace ws(out_dir, "split");
    ws.record_inputs({{"train", train_path}, {"test", test_path}});
    ws.manifest["parameters"] = {{"fraction", fraction},
                                 {"selected", subset.indices.size()},
                                 {"test_size", test_ds.size()}};
    ws.write_artifact("subset.jsonl", "subset", dataset_jsonl(test_ds, &subset.indices));

    std::ostringstream selection;
    for (size_t i = 0; i < subset.indices.size(); ++i) {
        json row;
        row["id"] = subset.indices[i];
        row["score"] = subset.scores[i];
        row["manifest"] = "manifest.json";
        selection << row.dump() << '\n';
    }
    ws.write_artifact("selection.jsonl", "selection", selection.str());
    ws.finish();
    return 0;
}

int cmd_half(const std::string& train_path, double fraction, uint64_t seed,
             const std::string& out_dir) {
    const Dataset train_ds = load_jsonl(train_path);
    const auto [kept, rest] = per_intent_split(train_ds, fraction, seed);

    Workspace ws(out_dir, "half");
    ws.record_inputs({{"train", train_path}});
    ws.manifest["parameters"] = {{"fraction", fraction},
                                 {"seed", seed},
                                 {"kept", kept.size()},
                                 {"total", train_ds.size()}};
    ws.write_artifact("half.jsonl", "half", dataset_jsonl(kept, nullptr));
    ws.finish();
    return 0;
}

int cmd_significance(const std::string& a_path, const std::string& b_path,
                     const std::string& metric, int64_t iterations, uint64_t seed,
                     const std::string& out_dir) {
    check_metric_name(metric);
    const std::vector<PredictionRecord> a = load_predictions(a_path);
    const std::vector<PredictionRecord> b = load_predictions(b_path);

    std::string test_name;
    double value_a = 0.0;
    double value_b = 0.0;
    double p = 0.0;
    if (metric == "accuracy") {
        test_name = "mcnemar_exact";
        value_a = accuracy(a);
        value_b = accuracy(b);
        p = mcnemar_exact(a, b);
    } else {
        test_name = "fisher_randomization";
        if (metric == "f1") {
            value_a = f1_binary(a, 1);
            value_b = f1_binary(b, 1);
            p = fisher_randomization(a, b, FisherMetric::F1, iterations, seed);
        } else {
            value_a = mcc(a);
            value_b = mcc(b);
            p = fisher_randomization(a, b, FisherMetric::Mcc, iterations, seed);
        }
    }

    Workspace ws(out_dir, "significance");
    ws.record_inputs({{"a", a_path}, {"b", b_path}});
    json params = {{"metric", metric}};
    if (test_name == "fisher_randomization") {
        params["iterations"] = iterations;
        params["seed"] = seed;
    }
    ws.manifest["parameters"] = params;
    const std::string fingerprint = hex64(fnv1a64(params.dump()));

    EvalReport checked;
    checked.metric = metric;
    checked.value = value_a;
    checked.n = static_cast<int64_t>(a.size());
    checked.p_value = p;
    checked.config_fingerprint = fingerprint;
    checked.tool_version = kToolVersion;
    checked.validate();

    json report;
    report["test"] = test_name;
    report["metric"] = metric;
    report["n"] = static_cast<int64_t>(a.size());
    report["value_a"] = value_a;
    report["value_b"] = value_b;
    report["p_value"] = p;
    if (test_name == "fisher_randomization") {
        report["iterations"] = iterations;
        report["seed"] = seed;
    }
    report["tool_version"] = kToolVersion;
    report["config_fingerprint"] = fingerprint;
    report["manifest"] = "manifest.json";
    ws.write_artifact("report.json", "report", report.dump(2) + "\n");
    ws.finish();
    return 0;
}

int cmd_rerun(const std::string& manifest_path, const std::string& out_dir) {
    json manifest;
    try {
        manifest = json::parse(read_file(manifest_path));
    } catch (const json::exception& e) {
        throw DataError("manifest " + manifest_path + ": " + e.what());
    }
    if (!manifest.is_object() || !manifest.contains("command") ||
        !manifest.contains("inputs"))
        throw DataError("manifest " + manifest_path + ": missing command or inputs");

    auto input_path = [&](const char* name) {
        const json& inputs = manifest.at("inputs");
        if (!inputs.contains(name))
            throw DataError("manifest " + manifest_path + ": missing input \"" + name + "\"");
        const json& record = inputs.at(name);
        const std::string path = record.at("path").get<std::string>();
        const std::string recorded = record.at("fnv1a64").get<std::string>();
        if (hex64(fingerprint_file(path)) != recorded)
            throw DataError("input \"" + path + "\" changed since the manifest was written");
        return path;
    };
    auto run_config = [&]() {
        if (!manifest.contains("config"))
            throw DataError("manifest " + manifest_path + ": missing config snapshot");
        return parse_run_config(manifest.at("config").dump());
    };
    const json params = manifest.contains("parameters") ? manifest.at("parameters")
                                                        : json::object();
    const std::string command = manifest.at("command").get<std::string>();
    try {
        if (command == "train")
            return cmd_train(run_config(), input_path("train"), input_path("dev"), out_dir);
        if (command == "ablation") {
            const bool with_subset = manifest.at("inputs").contains("subset");
            return cmd_ablation(run_config(), input_path("train"), input_path("dev"),
                                input_path("test"),
                                with_subset ? input_path("subset") : std::string(),
                                params.at("seeds").get<std::vector<uint64_t>>(), out_dir);
        }
        if (command == "split")
            return cmd_split(input_path("train"), input_path("test"),
                             params.at("fraction").get<double>(), out_dir);
        if (command == "half")
            return cmd_half(input_path("train"), params.at("fraction").get<double>(),
                            params.at("seed").get<uint64_t>(), out_dir);
        if (command == "significance")
            return cmd_significance(input_path("a"), input_path("b"),
                                    params.at("metric").get<std::string>(),
                                    params.value("iterations", int64_t{10000}),
                                    params.value("seed", uint64_t{1}), out_dir);
    } catch (const json::exception& e) {
        throw DataError("manifest " + manifest_path + ": " + e.what());
    }
    throw DataError("manifest " + manifest_path + ": unknown command \"" + command + "\"");
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
    std::vector<uint64_t> seeds;
    std::stringstream in(text);
    std::string piece;
    while (std::getline(in, piece, ',')) {
        if (piece.empty()) config_fail("empty entry in seed list \"" + text + "\"");
        try {
            size_t used = 0;
            const uint64_t value = std::stoull(piece, &used);
            if (used != piece.size()) throw std::invalid_argument(piece);
            seeds.push_back(value);
        } catch (const std::exception&) {
            config_fail("seed list entry \"" + piece + "\" is not a non-negative integer");
        }
    }
    if (seeds.empty()) config_fail("seed list is empty");
    return seeds;
}

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"contrastive adversarial trainer for small text classifiers"};
    app.require_subcommand(1);

    std::string config_path, train_path, dev_path, test_path, out_dir;
    std::string mode_name, metric, a_path, b_path, manifest_path, subset_path, seeds_text;
    double fraction = 0.0;
    uint64_t seed = 1;
    int64_t iterations = 10000;
    uint64_t sig_seed = 1;

    CLI::App* c_train = app.add_subcommand("train", "fine-tune a classifier");
    c_train->add_option("--config", config_path)->required();
    c_train->add_option("--train", train_path)->required();
    c_train->add_option("--dev", dev_path)->required();
    c_train->add_option("--out", out_dir)->required();
    c_train->add_option("--mode", mode_name);
    c_train->add_option("--seed", seed);

    CLI::App* c_ablation = app.add_subcommand("ablation", "compare the three training modes");
    c_ablation->add_option("--config", config_path)->required();
    c_ablation->add_option("--train", train_path)->required();
    c_ablation->add_option("--dev", dev_path)->required();
    c_ablation->add_option("--test", test_path)->required();
    c_ablation->add_option("--out", out_dir)->required();
    c_ablation->add_option("--seeds", seeds_text);
    c_ablation->add_option("--subset", subset_path);

    CLI::App* c_split = app.add_subcommand("split", "select the difficult test subset");
    c_split->add_option("--train", train_path)->required();
    c_split->add_option("--test", test_path)->required();
    c_split->add_option("--fraction", fraction)->required();
    c_split->add_option("--out", out_dir)->required();

    CLI::App* c_half = app.add_subcommand("half", "take a per-intent training subset");
    c_half->add_option("--train", train_path)->required();
    c_half->add_option("--fraction", fraction)->required();
    c_half->add_option("--seed", seed);
    c_half->add_option("--out", out_dir)->required();

    CLI::App* c_sig = app.add_subcommand("significance", "paired significance test");
    c_sig->add_option("--a", a_path)->required();
    c_sig->add_option("--b", b_path)->required();
    c_sig->add_option("--metric", metric)->required();
    c_sig->add_option("--iterations", iterations);
    c_sig->add_option("--seed", sig_seed);
    c_sig->add_option("--out", out_dir)->required();

    CLI::App* c_rerun = app.add_subcommand("rerun", "repeat a recorded run");
    c_rerun->add_option("--manifest", manifest_path)->required();
    c_rerun->add_option("--out", out_dir)->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        config_fail(e.what());
    }

    if (c_train->parsed()) {
        RunConfig rc = load_run_config(config_path);
        if (c_train->count("--mode")) rc.train.mode = mode_from_string(mode_name);
        if (c_train->count("--seed")) rc.train.seed = seed;
        return cmd_train(rc, train_path, dev_path, out_dir);
    }
    if (c_ablation->parsed()) {
        RunConfig rc = load_run_config(config_path);
        std::vector<uint64_t> seeds = {rc.train.seed};
        if (c_ablation->count("--seeds")) seeds = parse_seed_list(seeds_text);
        return cmd_ablation(rc, train_path, dev_path, test_path, subset_path, seeds, out_dir);
    }
    if (c_split->parsed()) return cmd_split(train_path, test_path, fraction, out_dir);
    if (c_half->parsed()) return cmd_half(train_path, fraction, seed, out_dir);
    if (c_sig->parsed())
        return cmd_significance(a_path, b_path, metric, iterations, sig_seed, out_dir);
    if (c_rerun->parsed()) return cmd_rerun(manifest_path, out_dir);
    config_fail("no command given");
}

int fail(int code, const char* category, const std::string& message) {
    json line;
    line["error"] = category;
    line["message"] = message;
    std::cerr << line.dump() << '\n';
    return code;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (!doc.is_object()) config_fail("document must be a JSON object");
    check_keys(doc, "config", {"model", "train", "adversarial", "contrastive", "eval"});

    RunConfig rc;
    const json empty = json::object();

    const json& model = section_of(doc, "model", empty);
    check_keys(model, "model",
               {"layers", "heads", "hidden", "ffn", "max_len", "dropout", "vocab_min_freq"});
    rc.train.encoder.layers = get_int(model, "layers", rc.train.encoder.layers);
    rc.train.encoder.heads = get_int(model, "heads", rc.train.encoder.heads);
    rc.train.encoder.d_h = get_int(model, "hidden", rc.train.encoder.d_h);
    rc.train.encoder.ffn = get_int(model, "ffn", rc.train.encoder.ffn);
    rc.train.encoder.max_len = get_int(model, "max_len", rc.train.encoder.max_len);
    rc.train.encoder.dropout = get_double(model, "dropout", rc.train.encoder.dropout);
    rc.vocab_min_freq = get_int(model, "vocab_min_freq", rc.vocab_min_freq);
    if (rc.vocab_min_freq < 1) config_fail("\"vocab_min_freq\" must be >= 1");

    const json& train = section_of(doc, "train", empty);
    check_keys(train, "train",
               {"mode", "learning_rate", "weight_decay", "warmup_fraction", "epochs",
                "batch_size", "seed"});
    rc.train.mode = mode_from_string(get_string(train, "mode", "baseline"));
    rc.train.learning_rate = get_double(train, "learning_rate", rc.train.learning_rate);
    rc.train.weight_decay = get_double(train, "weight_decay", rc.train.weight_decay);
    rc.train.warmup_fraction = get_double(train, "warmup_fraction", rc.train.warmup_fraction);
    rc.train.epochs = get_int(train, "epochs", rc.train.epochs);
    rc.train.batch_size = get_int(train, "batch_size", rc.train.batch_size);
    rc.train.seed = get_seed(train, "seed", rc.train.seed);

    const json& adversarial = section_of(doc, "adversarial", empty);
    check_keys(adversarial, "adversarial", {"epsilon", "norm", "target", "sign", "seed"});
    rc.train.perturbation.epsilon =
        get_double(adversarial, "epsilon", rc.train.perturbation.epsilon);
    rc.train.perturbation.norm_form = norm_from_string(
        get_string(adversarial, "norm", norm_to_string(rc.train.perturbation.norm_form)));
    rc.train.perturbation.target = target_from_string(
        get_string(adversarial, "target", target_to_string(rc.train.perturbation.target)));
    rc.train.perturbation.sign_convention = sign_from_string(get_string(
        adversarial, "sign", sign_to_string(rc.train.perturbation.sign_convention)));
    rc.train.perturbation.seed = get_seed(adversarial, "seed", rc.train.perturbation.seed);

    const json& contrastive = section_of(doc, "contrastive", empty);
    check_keys(contrastive, "contrastive", {"tau", "lambda", "projection_dim"});
    rc.train.contrastive.tau = get_double(contrastive, "tau", rc.train.contrastive.tau);
    rc.train.contrastive.lambda =
        get_double(contrastive, "lambda", rc.train.contrastive.lambda);
    rc.train.contrastive.d_k =
        get_int(contrastive, "projection_dim", rc.train.contrastive.d_k);

    const json& eval = section_of(doc, "eval", empty);
    check_keys(eval, "eval", {"metric", "iterations", "seed"});
    rc.metric = get_string(eval, "metric", rc.metric);
    check_metric_name(rc.metric);
    rc.iterations = get_int(eval, "iterations", rc.iterations);
    if (rc.iterations < 1) config_fail("\"iterations\" must be >= 1");
    rc.significance_seed = get_seed(eval, "seed", rc.significance_seed);

    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_run_config(buffer.str());
}

std::string serialize_run_config(const RunConfig& config) {
    return config_json(config).dump();
}

uint64_t fnv1a64(std::string_view bytes) {
    uint64_t hash = 14695981039346656037ULL;
    for (unsigned char byte : bytes) {
        hash ^= byte;
        hash *= 1099511628211ULL;
    }
    return hash;
}

std::string hex64(uint64_t value) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[value & 0xF];
        value >>= 4;
    }
    return out;
}

uint64_t fingerprint_file(const std::string& path) {
    return fnv1a64(read_file(path));
}

int run_cli(const std::vector<std::string>& args) {
    try {
        return dispatch(args);
    } catch (const ConfigError& e) {
        return fail(1, "config", e.what());
    } catch (const NumericError& e) {
        return fail(3, "numeric", e.what());
    } catch (const DataError& e) {
        return fail(2, "data", e.what());
    } catch (const std::invalid_argument& e) {
        return fail(1, "config", e.what());
    } catch (const std::logic_error& e) {
        return fail(1, "config", e.what());
    } catch (const std::exception& e) {
        return fail(2, "data", e.what());
    }
}

}  // namespace cat::cli
