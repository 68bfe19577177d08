// Experiment harness: make-data -> pretrain -> generate -> train -> certify -> report.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "decrop/data.hpp"
#include "decrop/datagen.hpp"
#include "decrop/models.hpp"
#include "decrop/smoothing.hpp"
#include "decrop/training.hpp"

namespace fs = std::filesystem;
using namespace decrop;

namespace {

struct ExperimentConfig {
    json j;

    ExperimentConfig() {
        j = {
            {"num_classes", 10},    {"per_class", 200},      {"test_per_class", 50}, {"image_size", 12},
            {"data_seed", 7},       {"k_percent", 1.0},      {"sigma", 0.25},

            {"epsilon_inf", 0.1}, {"attack_steps", 20}, {"attack_step_size", 0.0125},
            {"random_start", false},

            {"alpha", 0.5},         {"opt_steps", 200},      {"opt_lr", 0.01},

            {"beta1", 1.0},         {"beta2", 4.0},          {"beta3", 4.0},         {"beta4", 1.0},

            {"classifier_epochs", 60}, {"classifier_lr", 0.02}, {"classifier_batch", 64},
            {"epochs", 120},        {"adam_epochs", 20},     {"adam_lr", 1e-3},      {"sgd_lr", 1e-3},
            {"weight_decay", 1e-4}, {"batch", 32},           {"augment", true},      {"disc_lr", 1e-5},
            {"dd_warmup_frac", 0.25},

            {"n0", 100},            {"n", 10000},            {"failure_prob", 0.001},
            {"cert_batch", 100},    {"stride", 10},          {"wall_times", false},

            {"preset", "decrop"},   {"master_seed", 1},
        };
    }

    void load_file(const fs::path& p) {
        std::ifstream f(p);
        if (!f) throw std::invalid_argument("config: cannot open " + p.string());
        json file = json::parse(f);
        for (auto& [k, v] : file.items()) j[k] = v;
    }

    void apply_overrides(const std::vector<std::string>& sets) {
        for (const std::string& s : sets) {
            size_t eq = s.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + s);
            std::string key = s.substr(0, eq), val = s.substr(eq + 1);
            try {
                j[key] = json::parse(val);
            } catch (const json::exception&) {
                j[key] = val; // bare string
            }
        }
    }

    template <typename T>
    T get(const std::string& key) const {
        if (!j.contains(key)) throw std::invalid_argument("config: missing key " + key);
        return j.at(key).get<T>();
    }

    AttackConfig attack() const {
        AttackConfig a;
        a.epsilon_inf = get<float>("epsilon_inf");
        a.steps = get<int>("attack_steps");
        a.step_size = get<float>("attack_step_size");
        a.random_start = get<bool>("random_start");
        return a;
    }
    InterpolationConfig interp() const {
        InterpolationConfig i;
        i.alpha = get<double>("alpha");
        i.opt_steps = get<int>("opt_steps");
        i.opt_lr = get<float>("opt_lr");
        return i;
    }
    CertifyConfig certcfg() const {
        CertifyConfig c;
        c.n0 = get<int>("n0");
        c.n = get<int>("n");
        c.failure_prob = get<double>("failure_prob");
        c.batch_size = get<int>("cert_batch");
        return c;
    }
    SyntheticSpec dataspec() const {
        SyntheticSpec s;
        s.num_classes = get<int>("num_classes");
        s.per_class = get<int>("per_class");
        s.test_per_class = get<int>("test_per_class");
        s.image_size = get<int>("image_size");
        s.seed = get<uint64_t>("data_seed");
        return s;
    }
    DenoiserTrainConfig traincfg() const {
        DenoiserTrainConfig t;
        t.epochs = get<int>("epochs");
        t.adam_epochs = get<int>("adam_epochs");
        t.adam_lr = get<double>("adam_lr");
        t.sgd_lr = get<double>("sgd_lr");
        t.weight_decay = get<double>("weight_decay");
        t.batch = get<int>("batch");
        t.augment = get<bool>("augment");
        t.sigma = get<double>("sigma");
        t.disc_lr = get<double>("disc_lr");
        t.dd_warmup_frac = get<double>("dd_warmup_frac");
        t.seed = get<uint64_t>("master_seed");
        return t;
    }
};

void write_resolved_config(const ExperimentConfig& cfg, const fs::path& dir, const std::string& command) {
    fs::create_directories(dir);
    json out = cfg.j;
    out["resolved_for"] = command;
    std::ofstream f(dir / ("config." + command + ".json"));
    f << out.dump(2) << '\n';
}

// Preset -> loss weights and data streams (the ablation ladder).
struct Preset {
    LossWeights weights;
    bool use_boundary = false;
    bool use_interpolated = false;
    bool needs_triplets = false;
};

Preset resolve_preset(const std::string& name, const ExperimentConfig& cfg) {
    double b1 = cfg.get<double>("beta1"), b2 = cfg.get<double>("beta2");
    double b3 = cfg.get<double>("beta3"), b4 = cfg.get<double>("beta4");
    if (name == "baseline") return {{b1, 0, 0, 0}, false, false, false};
    if (name == "boundary_only") return {{b1, b2, 0, 0}, true, false, true};
    if (name == "instance") return {{b1, b2, 0, 0}, true, true, true};
    if (name == "instance_dd") return {{b1, b2, 0, b4}, true, true, true};
    if (name == "decrop") return {{b1, b2, b3, b4}, true, true, true};
    throw std::invalid_argument("unknown preset: " + name);
}

int cmd_make_data(const ExperimentConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out, "make-data");
    auto [train, test] = make_synthetic_dataset(cfg.dataspec());
    save_dataset(out / "train.bin", train);
    save_dataset(out / "test.bin", test);
    LimitedDataset lim = subsample_balanced(train, cfg.get<double>("k_percent"), cfg.get<uint64_t>("master_seed"));
    json manifest;
    manifest["train"] = {{"path", "train.bin"}, {"size", train.size()}};
    manifest["test"] = {{"path", "test.bin"}, {"size", test.size()}};
    manifest["data_seed"] = cfg.get<uint64_t>("data_seed");
    manifest["k_percent"] = lim.k_percent;
    manifest["limited_size"] = lim.size();
    manifest["limited_indices"] = lim.indices;
    manifest["per_class_counts"] = lim.per_class_counts;
    std::ofstream(out / "data_manifest.json") << manifest.dump(2) << '\n';
    std::cout << "wrote " << (out / "data_manifest.json").string() << " (limited " << lim.size() << " of "
              << train.size() << ")\n";
    return 0;
}

LimitedDataset load_limited(const fs::path& dir) {
    std::ifstream f(dir / "data_manifest.json");
    if (!f) throw std::invalid_argument("missing data_manifest.json in " + dir.string() + "; run make-data first");
    json m = json::parse(f);
    LimitedDataset lim;
    lim.k_percent = m.at("k_percent").get<double>();
    lim.indices = m.at("limited_indices").get<std::vector<int>>();
    lim.per_class_counts = m.at("per_class_counts").get<std::vector<int>>();
    return lim;
}

int cmd_pretrain(const ExperimentConfig& cfg, const fs::path& out) {
    write_resolved_config(cfg, out, "pretrain");
    Dataset train = load_dataset(out / "train.bin");
    Dataset test = load_dataset(out / "test.bin");
    ClassifierTrainConfig tc;
    tc.epochs = cfg.get<int>("classifier_epochs");
    tc.lr = cfg.get<double>("classifier_lr");
    tc.batch = cfg.get<int>("classifier_batch");
    tc.seed = cfg.get<uint64_t>("master_seed");
    ClassifierModel m = pretrain_classifier(cfg.get<int>("image_size"), train, tc);
    double sigma = cfg.get<double>("sigma");
    json metrics;
    metrics["clean_train_accuracy"] = classifier_accuracy(m, nullptr, train);
    metrics["clean_test_accuracy"] = classifier_accuracy(m, nullptr, test);
    metrics["noisy_test_accuracy"] = classifier_accuracy(m, nullptr, test, sigma, tc.seed);
    metrics["sigma"] = sigma;
    save_classifier(out / "classifier.bin", m, metrics);
    std::ofstream(out / "pretrain_metrics.json") << metrics.dump(2) << '\n';
    std::cout << "classifier: clean test acc " << metrics["clean_test_accuracy"] << ", noisy(sigma=" << sigma
              << ") " << metrics["noisy_test_accuracy"] << "\n";
    return 0;
}

int cmd_generate(const ExperimentConfig& cfg, const fs::path& out) {
    if (!fs::exists(out / "classifier.bin"))
        throw std::invalid_argument("missing classifier.bin in " + out.string() + "; run pretrain first");
    write_resolved_config(cfg, out, "generate");
    ClassifierModel bc = load_classifier(out / "classifier.bin");
    Dataset train = load_dataset(out / "train.bin");
    LimitedDataset lim = load_limited(out);
    uint64_t seed = cfg.get<uint64_t>("master_seed");
    auto triplets = generate_dataset(bc, train, lim, cfg.attack(), cfg.interp(), seed);
    save_triplets(out / "triplets.bin", triplets, cfg.attack(), cfg.interp(), seed);

    int flips = 0, disagreements = 0, reduced = 0;
    double mse = 0.0, mse0 = 0.0;
    for (size_t i = 0; i < triplets.size(); ++i) {
        flips += triplets[i].flip_succeeded ? 1 : 0;
        mse += triplets[i].final_mse;
        mse0 += triplets[i].initial_mse;
        if (triplets[i].final_mse <= 0.1 * triplets[i].initial_mse) ++reduced;
        if (triplets[i].y_pseudo != train.labels[size_t(lim.indices[i])]) ++disagreements;
    }
    json manifest;
    manifest["count"] = triplets.size();
    manifest["flip_rate"] = double(flips) / double(triplets.size());
    manifest["mean_final_mse"] = mse / double(triplets.size());
    manifest["mean_initial_mse"] = mse0 / double(triplets.size());
    manifest["mse_reduced_10pct_rate"] = double(reduced) / double(triplets.size());
    manifest["alpha"] = cfg.get<double>("alpha");
    manifest["pseudo_label_disagreements"] = disagreements;
    std::ofstream(out / "generate_manifest.json") << manifest.dump(2) << '\n';
    std::cout << "generated " << triplets.size() << " triplets, flip rate " << manifest["flip_rate"] << "\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const fs::path& out) {
    if (!fs::exists(out / "classifier.bin"))
        throw std::invalid_argument("missing classifier.bin in " + out.string() + "; run pretrain first");
    std::string preset_name = cfg.get<std::string>("preset");
    Preset preset = resolve_preset(preset_name, cfg);
    if (preset.needs_triplets && !fs::exists(out / "triplets.bin"))
        throw std::invalid_argument("preset " + preset_name + " needs triplets.bin; run generate first");
    write_resolved_config(cfg, out, "train");

    ClassifierModel bc = load_classifier(out / "classifier.bin");
    Dataset train = load_dataset(out / "train.bin");
    LimitedDataset lim = load_limited(out);
    std::vector<GeneratedTriplet> triplets;
    if (preset.needs_triplets) triplets = load_triplets(out / "triplets.bin");

    uint64_t seed = cfg.get<uint64_t>("master_seed");
    DenoiserTrainConfig tc = cfg.traincfg();
    tc.use_boundary = preset.use_boundary;
    tc.use_interpolated = preset.use_interpolated;
    DenoiserModel dn = make_denoiser(7, 12, seed);
    DiscriminatorModel dd = make_discriminator(bc.feature_dim, seed);
    auto log = train_denoiser(bc, dn, dd, train, lim, triplets, preset.weights, tc);

    json extra;
    extra["preset"] = preset_name;
    extra["weights"] = {preset.weights.beta1, preset.weights.beta2, preset.weights.beta3, preset.weights.beta4};
    if (fs::exists(out / "test.bin")) {
        Dataset test = load_dataset(out / "test.bin");
        extra["noisy_test_accuracy"] = classifier_accuracy(bc, &dn, test, tc.sigma, seed);
        std::cout << "noisy test accuracy " << extra["noisy_test_accuracy"] << "\n";
    }
    save_denoiser(out / ("denoiser." + preset_name + ".bin"), dn, extra);
    if (preset.weights.beta4 != 0.0) save_discriminator(out / ("discriminator." + preset_name + ".bin"), dd);
    std::ofstream lf(out / ("train_log." + preset_name + ".tsv"));
    lf << train_log_header() << '\n';
    for (const auto& r : log) lf << train_log_line(r) << '\n';
    std::cout << "trained preset " << preset_name << " (" << log.size() << " steps), final total loss "
              << (log.empty() ? 0.0 : log.back().total) << "\n";
    return 0;
}

int cmd_certify(const ExperimentConfig& cfg, const fs::path& out, const std::string& checkpoint) {
    if (!fs::exists(out / "classifier.bin"))
        throw std::invalid_argument("missing classifier.bin in " + out.string() + "; run pretrain first");
    fs::path dn_path = checkpoint.empty() ? out / ("denoiser." + cfg.get<std::string>("preset") + ".bin")
                                          : fs::path(checkpoint);
    bool identity = checkpoint == "identity";
    if (!identity && !fs::exists(dn_path))
        throw std::invalid_argument("missing denoiser checkpoint " + dn_path.string());
    write_resolved_config(cfg, out, "certify");

    ClassifierModel bc = load_classifier(out / "classifier.bin");
    DenoiserModel dn;
    if (!identity) dn = load_denoiser(dn_path);
    else dn = make_denoiser(7, 12, 0); // zero residual head: exact identity
    Dataset test = load_dataset(out / "test.bin");

    NoiseModel noise{cfg.get<double>("sigma")};
    CertifyConfig ccfg = cfg.certcfg();
    int stride = cfg.get<int>("stride");
    bool wall = cfg.get<bool>("wall_times");
    uint64_t seed = cfg.get<uint64_t>("master_seed");
    BatchClassifier model = [&](const TensorData& b) { return classify_batch(bc, &dn, b); };

    std::string tag = identity ? "identity" : dn_path.stem().extension().string().substr(1);
    std::ofstream lf(out / ("certify_log." + tag + ".tsv"));
    write_certification_header(lf);
    std::vector<std::pair<CertificationResult, int>> results;
    Rng master(seed);
    for (int i = 0; i < test.size(); i += stride) {
        CertificationResult r =
            certify(model, test.sample(i), test.num_classes, noise, ccfg, master.derive(0xce47, uint64_t(i)));
        write_certification_row(lf, i, test.labels[size_t(i)], r, wall);
        results.emplace_back(r, test.labels[size_t(i)]);
    }
    std::vector<double> radii = {0.0, 0.25, 0.5, 0.75};
    std::vector<double> acc = approx_certified_accuracy(results, radii);
    json summary;
    summary["preset"] = tag;
    summary["sigma"] = noise.sigma;
    summary["radii"] = radii;
    summary["certified_accuracy"] = acc;
    summary["samples"] = results.size();
    std::ofstream(out / ("certify_summary." + tag + ".json")) << summary.dump(2) << '\n';
    std::cout << "certified " << results.size() << " samples:";
    for (size_t i = 0; i < radii.size(); ++i) std::cout << "  r=" << radii[i] << ": " << acc[i];
    std::cout << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& summaries, const fs::path& out_csv) {
    if (summaries.empty()) throw std::invalid_argument("report: needs at least one certify_summary.json");
    std::vector<json> rows;
    std::vector<double> radii;
    for (const std::string& s : summaries) {
        std::ifstream f(s);
        if (!f) throw std::invalid_argument("report: cannot open " + s);
        json j = json::parse(f);
        std::vector<double> r = j.at("radii").get<std::vector<double>>();
        if (radii.empty())
            radii = r;
        else if (radii != r)
            throw std::invalid_argument("report: incompatible radii grids across runs");
        rows.push_back(j);
    }
    std::ofstream f(out_csv);
    f << "order,preset,sigma";
    for (double r : radii) f << ",r=" << format_fixed(r, 2);
    f << "\r\n";
    for (size_t i = 0; i < rows.size(); ++i) {
        f << i << ',' << rows[i].at("preset").get<std::string>() << ',' << rows[i].at("sigma").get<double>();
        for (double a : rows[i].at("certified_accuracy").get<std::vector<double>>()) f << ',' << format_fixed(a, 4);
        f << "\r\n";
    }
    std::cout << "wrote " << out_csv.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Data-efficient certified robustness toolkit"};
    app.require_subcommand(1);

    std::string config_file, out_dir = "runs/default", checkpoint;
    std::vector<std::string> sets, report_inputs;
    std::string report_out = "report.csv";
    app.add_option("--config", config_file, "JSON config file");
    app.add_option("--out", out_dir, "run output directory");
    app.add_option("--set", sets, "override a config key, key=value (repeatable)");

    auto* make_data = app.add_subcommand("make-data", "generate the synthetic dataset and limited subsample");
    auto* pretrain = app.add_subcommand("pretrain", "train and freeze the base classifier");
    auto* generate = app.add_subcommand("generate", "craft boundary and interpolated samples");
    auto* train = app.add_subcommand("train", "train the denoiser for the configured preset");
    auto* certify_cmd = app.add_subcommand("certify", "randomized-smoothing certification over the test set");
    certify_cmd->add_option("--checkpoint", checkpoint, "denoiser checkpoint ('identity' for a sanity run)");
    auto* report = app.add_subcommand("report", "merge certification summaries into a ladder CSV");
    report->add_option("summaries", report_inputs, "certify_summary.json files in ladder order");
    report->add_option("--csv", report_out, "output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg;
        if (!config_file.empty()) cfg.load_file(config_file);
        cfg.apply_overrides(sets);
        fs::path out(out_dir);
        if (make_data->parsed()) return cmd_make_data(cfg, out);
        if (pretrain->parsed()) return cmd_pretrain(cfg, out);
        if (generate->parsed()) return cmd_generate(cfg, out);
        if (train->parsed()) return cmd_train(cfg, out);
        if (certify_cmd->parsed()) return cmd_certify(cfg, out, checkpoint);
        if (report->parsed()) return cmd_report(report_inputs, report_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
