#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mscg/gradsuite.hpp"
#include "mscg/synth.hpp"
#include "mscg/trainer.hpp"

namespace {

using namespace mscg;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
    std::string config_path;
    std::string data_root;
    std::string manifest_path;
    std::string out_dir = "out";
    std::string resume;
    std::int64_t seed = -1; // -1 = keep config value
};

DatasetManifest resolve_manifest(const CommonArgs& args, std::int64_t classes) {
    std::string path = args.manifest_path;
    if (path.empty()) {
        if (args.data_root.empty()) throw data_error("either --manifest or --data-root is required");
        path = args.data_root + "/manifest.txt";
    }
    return load_manifest(path, args.data_root, classes);
}

TrainConfig resolve_config(const CommonArgs& args) {
    TrainConfig cfg = args.config_path.empty() ? TrainConfig{} : load_config(args.config_path);
    if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
    cfg.validate();
    return cfg;
}

template <typename T>
int run_train(const TrainConfig& cfg, const CommonArgs& args) {
    auto manifest = resolve_manifest(args, cfg.classes);
    Trainer<T> trainer(cfg, manifest);
    std::printf("training: %zu samples, %lld iterations, loss=%s dtype=%s seed=%llu\n", manifest.size(),
                static_cast<long long>(trainer.total_iterations()), cfg.loss.c_str(), cfg.dtype.c_str(),
                static_cast<unsigned long long>(cfg.seed));
    auto outcome = trainer.train(args.out_dir, args.resume);
    for (const auto& row : outcome.log) {
        if (row.iteration % 10 == 0 || row.iteration + 1 == trainer.total_iterations()) {
            std::printf("iter %5lld  lr %.6f  %s  loss %.6f  kl %.6f  dl %.6f  total %.6f%s\n",
                        static_cast<long long>(row.iteration), row.lr, row.optimizer, row.acw, row.kl, row.dl,
                        row.total, row.skipped ? "  [skipped]" : "");
        }
    }
    auto [state, report] = trainer.evaluate();
    std::ofstream csv(args.out_dir + "/report.csv", std::ios::trunc);
    write_report_csv(state, report, class_names(), csv);
    std::printf("final train-set mIoU %.4f  mIoU* %.4f\n", report.miou, report.miou_star);
    std::printf("checkpoint: %s\n", outcome.checkpoint_path.c_str());
    return kExitOk;
}

template <typename T>
int run_eval(const TrainConfig& cfg, const CommonArgs& args, const std::string& checkpoint_path) {
    auto manifest = resolve_manifest(args, cfg.classes);
    Trainer<T> trainer(cfg, manifest);
    trainer.restore(Checkpoint<T>::load(checkpoint_path));
    auto [state, report] = trainer.evaluate();
    std::filesystem::create_directories(args.out_dir);
    const std::string path = args.out_dir + "/report.csv";
    std::ofstream csv(path, std::ios::trunc);
    write_report_csv(state, report, class_names(), csv);
    write_report_csv(state, report, class_names(), std::cout);
    std::printf("report written to %s\n", path.c_str());
    return kExitOk;
}

template <typename T>
int run_dump_graph(const TrainConfig& cfg, const CommonArgs& args, const std::string& checkpoint_path,
                   std::int64_t index) {
    auto manifest = resolve_manifest(args, cfg.classes);
    Trainer<T> trainer(cfg, manifest);
    trainer.restore(Checkpoint<T>::load(checkpoint_path));
    auto sample = load_sample<T>(manifest, static_cast<std::size_t>(index));
    CounterRng rng(0);
    auto features = backbone_forward(constant(sample.images), trainer.model().backbone, Mode::eval);
    auto bundles = scg_forward(features, trainer.model().head.scg, Mode::eval, rng);
    std::filesystem::create_directories(args.out_dir);
    mten::save(args.out_dir + "/a_hat.mten", bundles[0].a_hat->value);
    mten::save(args.out_dir + "/a_prime.mten", bundles[0].a_prime->value);
    std::printf("wrote %s/a_hat.mten and a_prime.mten (n = %lld)\n", args.out_dir.c_str(),
                static_cast<long long>(bundles[0].a_hat->value.shape[0]));
    return kExitOk;
}

int run_weights_log(const CommonArgs& args, std::int64_t epochs, std::int64_t batch_size, std::uint64_t seed,
                    std::int64_t classes) {
    auto manifest = resolve_manifest(args, classes);
    auto dataset = load_all<float>(manifest);
    ClassFrequencyState<float> state(classes);
    std::filesystem::create_directories(args.out_dir);
    const std::string path = args.out_dir + "/weights_log.csv";
    std::ofstream csv(path, std::ios::trunc);
    csv << "iteration";
    for (std::int64_t c = 0; c < classes; ++c) csv << ",class_" << c;
    csv << "\n";
    const auto per_epoch = static_cast<std::int64_t>((dataset.size() + static_cast<std::size_t>(batch_size) - 1) /
                                                     static_cast<std::size_t>(batch_size));
    for (std::int64_t iter = 0; iter < epochs * per_epoch; ++iter) {
        auto batch = batch_for_iteration(dataset, iter, batch_size, dataset[0].height(), 0.0, seed);
        if (!update_frequency(state, batch.labels, batch.valid)) continue;
        auto w = median_weights(state);
        csv << iter;
        for (std::int64_t c = 0; c < classes; ++c) csv << ',' << w.at(c);
        csv << "\n";
    }
    std::printf("wrote %s\n", path.c_str());
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mscgnet: multi-view self-constructing-graph segmentation"};
    app.require_subcommand(1);

    CommonArgs args;
    app.add_option("--config", args.config_path, "key=value config file")->capture_default_str();
    app.add_option("--seed", args.seed, "override the config seed");
    app.add_option("--data-root", args.data_root, "dataset root directory");
    app.add_option("--manifest", args.manifest_path, "manifest file (default <data-root>/manifest.txt)");
    app.add_option("--out-dir", args.out_dir, "output directory")->capture_default_str();

    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--resume", args.resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string checkpoint_path;
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string selector;
    std::uint64_t gc_seed = 20240601;
    gradcheck->add_option("selector", selector, "substring filter, e.g. 'scg'");
    gradcheck->add_option("--gc-seed", gc_seed, "probe seed");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    SynthConfig synth_cfg;
    std::string mix_text;
    synth->add_option("--count", synth_cfg.count, "number of images")->capture_default_str();
    synth->add_option("--size", synth_cfg.size, "image extent, divisible by 16")->capture_default_str();
    synth->add_option("--class-mix", mix_text, "comma-separated per-class pixel fractions");
    synth->add_option("--classes-per-image", synth_cfg.classes_per_image, "foreground classes hosted per image");
    synth->add_option("--overlap-prob", synth_cfg.overlap_prob, "chance of a second label per region");
    synth->add_option("--snap", synth_cfg.snap, "region corner granularity")->capture_default_str();
    synth->add_option("--min-region", synth_cfg.min_region, "minimum region extent")->capture_default_str();
    synth->add_option("--max-region", synth_cfg.max_region, "maximum region extent")->capture_default_str();
    synth->add_option("--boundary-margin-frac", synth_cfg.boundary_margin_frac, "max boundary inset fraction");
    synth->add_option("--mask-hole-prob", synth_cfg.mask_hole_prob, "chance of a mask hole");
    synth->add_option("--noise", synth_cfg.noise, "per-pixel color noise")->capture_default_str();

    auto* dump = app.add_subcommand("dump-graph", "export the constructed adjacency for one sample");
    std::string dump_checkpoint;
    std::int64_t dump_index = 0;
    dump->add_option("--checkpoint", dump_checkpoint, "checkpoint file")->required();
    dump->add_option("--index", dump_index, "sample index")->capture_default_str();

    auto* wlog = app.add_subcommand("weights-log", "dump the adaptive class-weight trajectory");
    std::int64_t wl_epochs = 1, wl_batch = 4, wl_classes = 7;
    wlog->add_option("--epochs", wl_epochs, "epochs to stream")->capture_default_str();
    wlog->add_option("--batch-size", wl_batch, "batch size")->capture_default_str();
    wlog->add_option("--classes", wl_classes, "class count")->capture_default_str();

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*train) {
            const auto cfg = resolve_config(args);
            return cfg.dtype == "f64" ? run_train<double>(cfg, args) : run_train<float>(cfg, args);
        }
        if (*eval) {
            auto meta = Checkpoint<float>::load(checkpoint_path).meta; // meta is dtype-agnostic
            auto cfg = Trainer<float>::config_from_checkpoint_meta(meta);
            return cfg.dtype == "f64" ? run_eval<double>(cfg, args, checkpoint_path)
                                      : run_eval<float>(cfg, args, checkpoint_path);
        }
        if (*gradcheck) {
            const auto rows = run_gradient_suite(selector, gc_seed);
            if (rows.empty()) {
                std::fprintf(stderr, "no gradcheck rows match selector '%s'\n", selector.c_str());
                return kExitUsage;
            }
            bool all_pass = true;
            std::printf("%-28s %14s %8s  %s\n", "op", "max_rel_err", "checked", "status");
            for (const auto& r : rows) {
                std::printf("%-28s %14.3e %8lld  %s\n", r.name.c_str(), r.max_rel_error,
                            static_cast<long long>(r.checked), r.pass ? "pass" : "FAIL");
                all_pass = all_pass && r.pass;
            }
            return all_pass ? kExitOk : kExitNumeric;
        }
        if (*synth) {
            if (args.seed >= 0) synth_cfg.seed = static_cast<std::uint64_t>(args.seed);
            if (!mix_text.empty()) {
                synth_cfg.class_mix.clear();
                std::istringstream in(mix_text);
                std::string tok;
                while (std::getline(in, tok, ',')) synth_cfg.class_mix.push_back(std::stod(tok));
                synth_cfg.num_classes = static_cast<std::int64_t>(synth_cfg.class_mix.size());
            }
            auto manifest = synth_generate(synth_cfg, args.out_dir);
            std::printf("generated %zu samples under %s\n", manifest.size(), args.out_dir.c_str());
            return kExitOk;
        }
        if (*dump) {
            auto meta = Checkpoint<float>::load(dump_checkpoint).meta;
            auto cfg = Trainer<float>::config_from_checkpoint_meta(meta);
            return cfg.dtype == "f64" ? run_dump_graph<double>(cfg, args, dump_checkpoint, dump_index)
                                      : run_dump_graph<float>(cfg, args, dump_checkpoint, dump_index);
        }
        if (*wlog) {
            return run_weights_log(args, wl_epochs, wl_batch,
                                   args.seed >= 0 ? static_cast<std::uint64_t>(args.seed) : 42ull, wl_classes);
        }
    } catch (const data_error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const numeric_fault& e) {
        std::fprintf(stderr, "numerical fault: %s\n", e.what());
        return kExitNumeric;
    } catch (const contract_violation& e) {
        std::fprintf(stderr, "invalid arguments: %s\n", e.what());
        return kExitUsage;
    }
    return kExitUsage;
}
