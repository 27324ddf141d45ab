// Command line front end: dataset synthesis, projection, training,
// evaluation, paired AUC comparison, gradient checking and benchmarking.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bimamba/bench.hpp"
#include "bimamba/data.hpp"
#include "bimamba/metrics.hpp"
#include "bimamba/model.hpp"
#include "bimamba/runconfig.hpp"
#include "bimamba/train.hpp"

namespace fs = std::filesystem;
using namespace bimamba;

namespace {

// 0 success, 1 usage, 2 data/contract, 3 numerical
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

std::vector<double> read_score_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open score file '" + path + "'");
    std::vector<double> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(std::stod(line));
    }
    return out;
}

std::vector<int> read_label_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open label file '" + path + "'");
    std::vector<int> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(std::stoi(line));
    }
    return out;
}

config::RunConfig resolve_config(const std::string& config_path,
                                 const std::vector<std::string>& sets,
                                 bool seed_flag_given, u64 seed_flag) {
    config::RunConfig rc;
    if (!config_path.empty() && config_path != "toy") rc = config::parse_file(config_path);
    if (config_path == "toy") {
        model::ModelConfig toy = model::toy_config();
        rc.model = toy;
    }
    for (const std::string& kv : sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ContractError("--set expects key=value, got '" + kv + "'");
        config::apply_kv(rc, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed_flag_given) {
        rc.train.seed = seed_flag;
        rc.has_seed = true;
    }
    return rc;
}

void log_config(const config::RunConfig& rc) {
    std::istringstream is(config::dump(rc));
    std::string line;
    while (std::getline(is, line)) std::cerr << "config: " << line << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"bidirectional selective state-space sequence kit"};
    app.require_subcommand(1);

    std::ostringstream keys_help;
    keys_help << "config file keys (key = value per line, '#' comments):\n";
    for (const auto& kd : config::known_keys())
        keys_help << "  " << kd.key << ": " << kd.doc << "\n";
    app.footer(keys_help.str());

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate the synthetic two-view dataset");
    u64 synth_seed = 0;
    i64 synth_n = 0;
    i64 synth_image = 64;
    std::string synth_out;
    bool synth_force = false;
    synth->add_option("--seed", synth_seed, "master seed")->required();
    synth->add_option("--n", synth_n, "number of subjects (>= 10)")->required();
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--image-size", synth_image, "square image side");
    synth->add_flag("--force", synth_force, "write into a non-empty directory");

    // ---- project ----
    auto* project = app.add_subcommand("project", "parallel-project a volume to two views");
    std::string vol_path, out_frontal, out_lateral;
    project->add_option("--volume", vol_path, "RAWV volume path")->required();
    project->add_option("--out-frontal", out_frontal, "frontal output PGM")->required();
    project->add_option("--out-lateral", out_lateral, "lateral output PGM")->required();

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train a classifier on a dataset directory");
    std::string train_data, train_out, train_config;
    std::vector<std::string> train_sets;
    u64 train_seed = 0;
    bool train_dump = false;
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--out", train_out, "output directory");
    train_cmd->add_option("--config", train_config, "config file path");
    train_cmd->add_option("--set", train_sets, "override: key=value (repeatable)");
    auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "master seed");
    train_cmd->add_flag("--dump-config", train_dump, "print the resolved config and exit");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string eval_ckpt, eval_data, eval_split = "test", eval_fusion;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--split", eval_split, "train | val | test");
    eval_cmd->add_option("--fusion", eval_fusion,
                         "expected fusion mode; must match the checkpoint");

    // ---- delong ----
    auto* delong = app.add_subcommand("delong", "paired AUC comparison of two score files");
    std::string scores_a, scores_b, labels_path;
    delong->add_option("scores_a", scores_a, "scores of model A, one per line")->required();
    delong->add_option("scores_b", scores_b, "scores of model B, one per line")->required();
    delong->add_option("labels", labels_path, "labels, one 0/1 per line")->required();

    // ---- bench ----
    auto* bench_cmd = app.add_subcommand("bench", "run the timing and memory sweep");
    std::string bench_out = "bench.csv";
    u64 bench_seed = 0;
    int bench_repeats = 9;
    bench_cmd->add_option("--seed", bench_seed, "input seed")->required();
    bench_cmd->add_option("--out", bench_out, "CSV output path");
    bench_cmd->add_option("--repeats", bench_repeats, "timed repeats per point (>= 5)");
    bool bench_quick = false;
    bench_cmd->add_flag("--quick", bench_quick,
                        "short sweep (L up to 256, compact configuration only)");

    // ---- gradcheck ----
    auto* gradcheck = app.add_subcommand("gradcheck",
                                         "finite-difference check of every parameter gradient");
    std::string gc_config = "toy";
    gradcheck->add_option("--config", gc_config, "'toy' or a config file path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    if (synth->parsed()) {
        if (fs::exists(synth_out) && !fs::is_empty(synth_out) && !synth_force)
            throw ContractError("output directory '" + synth_out +
                                "' is not empty (use --force)");
        data::SynthConfig sc;
        sc.height = sc.width = synth_image;
        data::Dataset ds = data::synth_dataset(synth_seed, synth_n, sc);
        data::write_dataset_dir(synth_out, ds);
        std::cout << "wrote " << ds.samples.size() * 2 << " images and manifest.tsv to "
                  << synth_out << " (train/val/test = " << ds.manifest.train.size() << "/"
                  << ds.manifest.val.size() << "/" << ds.manifest.test.size() << ")\n";
        return 0;
    }

    if (project->parsed()) {
        data::Volume v = data::read_rawv(vol_path);
        data::write_pgm16(out_frontal, data::parallel_project(v, data::ProjectionAxis::Frontal));
        data::write_pgm16(out_lateral, data::parallel_project(v, data::ProjectionAxis::Lateral));
        std::cout << "projected " << vol_path << " -> " << out_frontal << ", " << out_lateral
                  << "\n";
        return 0;
    }

    if (train_cmd->parsed()) {
        config::RunConfig rc =
            resolve_config(train_config, train_sets, train_seed_opt->count() > 0, train_seed);
        if (train_dump) {
            std::cout << config::dump(rc);
            return 0;
        }
        if (!rc.has_seed)
            throw CLI::ValidationError("train", "a seed is required (--seed or config)");
        if (train_out.empty())
            throw CLI::ValidationError("train", "--out is required");
        log_config(rc);
        data::Dataset ds = data::load_dataset_dir(train_data);
        const data::Image& probe = ds.samples.front().frontal;
        if (probe.height != rc.model.height || probe.width != rc.model.width)
            throw ContractError("dataset images are " + std::to_string(probe.height) + "x" +
                                std::to_string(probe.width) + " but the config says " +
                                std::to_string(rc.model.height) + "x" +
                                std::to_string(rc.model.width));
        fs::create_directories(train_out);
        model::ModelParams params = model::ModelParams::init(rc.model, rc.train.seed);
        std::string ckpt = (fs::path(train_out) / "model.ckpt").string();
        train::TrainResult res =
            train::train_loop(params, rc.model, ds, rc.train, ckpt, &std::cerr);
        train::write_history_csv((fs::path(train_out) / "history.csv").string(), res.history);
        std::cout << "best_val_auroc=" << res.best_val_auroc << " best_epoch=" << res.best_epoch
                  << " checkpoint=" << ckpt << "\n";
        return 0;
    }

    if (eval_cmd->parsed()) {
        model::ModelConfig cfg = model::read_checkpoint_config(eval_ckpt);
        if (!eval_fusion.empty() &&
            model::fusion_from_name(eval_fusion) != cfg.fusion)
            throw ContractError("checkpoint was trained with fusion '" +
                                std::string(model::fusion_name(cfg.fusion)) +
                                "', not '" + eval_fusion + "'");
        model::ModelParams params = model::load_checkpoint(eval_ckpt, cfg);
        data::Dataset ds = data::load_dataset_dir(eval_data);
        double auc = train::evaluate_auroc(params, cfg, ds, eval_split);
        std::cout << "split=" << eval_split << " n=" << ds.split_indices(eval_split).size()
                  << " fusion=" << model::fusion_name(cfg.fusion) << " auroc=" << auc << "\n";
        return 0;
    }

    if (delong->parsed()) {
        std::vector<double> a = read_score_file(scores_a);
        std::vector<double> b = read_score_file(scores_b);
        std::vector<int> y = read_label_file(labels_path);
        try {
            metrics::DelongResult r = metrics::delong_test(a, b, y);
            std::cout << "auc_a=" << r.auc_a << " auc_b=" << r.auc_b << " z=" << r.z
                      << " p=" << r.p << "\n";
        } catch (const metrics::DegenerateTestError& e) {
            std::cerr << "error: degenerate delong test (auc_a=" << e.auc_a
                      << " auc_b=" << e.auc_b << "): " << e.what() << "\n";
            return kData;
        }
        return 0;
    }

    if (bench_cmd->parsed()) {
        std::vector<bench::BenchRecord> records;
        if (bench_quick) {
            bench::BenchConfig compact;
            compact.seed = bench_seed;
            for (auto k : {bench::Kernel::BimambaBlock, bench::Kernel::AttnBlock,
                           bench::Kernel::ScanSequential, bench::Kernel::ScanParallel}) {
                auto rs = bench::measure(k, {64, 128, 256}, compact, bench_repeats, 2,
                                         &std::cerr);
                records.insert(records.end(), rs.begin(), rs.end());
            }
        } else {
            records = bench::default_sweep(bench_seed, bench_repeats, &std::cerr);
        }
        std::ofstream csv(bench_out, std::ios::trunc);
        if (!csv) throw Error("cannot open '" + bench_out + "' for writing");
        bench::write_csv(csv, records);
        bench::write_report(std::cout, records);
        std::cout << "csv=" << bench_out << "\n";
        return 0;
    }

    if (gradcheck->parsed()) {
        model::ModelConfig cfg;
        if (gc_config == "toy") {
            cfg = model::toy_config();
        } else {
            cfg = config::parse_file(gc_config).model;
            cfg.dtype = Dtype::Float64;
        }
        model::GradCheckReport rep = model::finite_difference_check(cfg, 1);
        std::cout << "max_rel_err=" << rep.max_rel_err << " coords=" << rep.coords_checked
                  << " worst=" << (rep.worst_param.empty() ? "-" : rep.worst_param)
                  << " tolerance=0.001\n";
        if (rep.max_rel_err >= 1e-3) {
            std::cerr << "error: gradient check failed (max_rel_err=" << rep.max_rel_err
                      << ")\n";
            return kNumeric;
        }
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CLI::ParseError&) {
        // CLI11_PARSE already printed and returned; unreachable in practice
        return kUsage;
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const metrics::UndefinedMetricError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
}
