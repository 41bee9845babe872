#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sicnn/analysis.hpp"
#include "sicnn/config.hpp"
#include "sicnn/data.hpp"
#include "sicnn/experiments.hpp"
#include "sicnn/gradcheck.hpp"
#include "sicnn/network.hpp"
#include "sicnn/train.hpp"

namespace {

struct VariantInfo {
    int canvas;
    std::string default_dist;
};

VariantInfo variant_info(const std::string& variant) {
    if (variant == "mnist-scale-28") return {28, "uniform:0.3,1"};
    if (variant == "mnist-scale-40") return {40, "uniform:0.3,1"};
    if (variant == "gaussian-40") return {40, "gaussian:1,0.24"};
    if (variant == "uniform-range-40") return {40, ""};
    throw CLI::ValidationError("--variant", "unknown variant '" + variant + "'");
}

// Base protocol for the 40-canvas scale-distribution experiments.
sicnn::ExperimentConfig canvas40_config() {
    sicnn::ExperimentConfig cfg;
    cfg.canvas = 40;
    cfg.kernel1 = 9;
    cfg.scales = "0.5,0.762199122,1,1.161895004,1.771190704,2.7";
    cfg.variant = "mnist-scale-40";
    cfg.dist = "gaussian:1,0.24";
    cfg.test_size = 10000;
    return cfg;
}

sicnn::Dataset head_rows(const sicnn::Dataset& ds, int limit) {
    if (limit <= 0 || limit >= ds.count()) return ds;
    sicnn::Dataset out;
    out.meta = ds.meta;
    const std::int64_t plane = ds.images.size() / ds.count();
    std::vector<int> dims{limit};
    for (int d = 1; d < ds.images.ndim(); ++d) dims.push_back(ds.images.dim(d));
    out.images = sicnn::Tensor(dims);
    std::copy(ds.images.data(), ds.images.data() + plane * limit, out.images.data());
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + limit);
    return out;
}

// True when consecutive scale ratios agree closely enough to read the set as
// one geometric ladder, which is what the closed-form multiple models.
bool geometric_ladder(const std::vector<double>& scales, sicnn::OpCountModel& model) {
    if (scales.size() < 2) return false;
    const double ratio = scales[1] / scales[0];
    for (std::size_t i = 2; i < scales.size(); ++i) {
        if (std::abs(scales[i] / scales[i - 1] - ratio) > 1e-6 * ratio) return false;
    }
    std::size_t unit = scales.size();
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (std::abs(scales[i] - 1.0) < 1e-9) unit = i;
    }
    if (unit == scales.size() || ratio <= 1.0) return false;
    model.s = ratio;
    model.t = static_cast<int>(scales.size()) - 1;
    model.k = static_cast<int>(unit);
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scale-invariant convolution engine and experiment harness"};
    app.require_subcommand(1);

    std::string mnist_dir = sicnn::default_mnist_dir();
    app.add_option("--mnist-dir", mnist_dir, "Directory with raw MNIST IDX files")
        ->capture_default_str();

    // generate-data -----------------------------------------------------
    auto* gen = app.add_subcommand("generate-data", "Render a rescaled-digit dataset");
    std::string gen_variant;
    std::uint64_t gen_seed = 99;
    std::string gen_range, gen_dist, gen_out = "out";
    gen->add_option("--variant", gen_variant,
                    "mnist-scale-28|mnist-scale-40|gaussian-40|uniform-range-40")
        ->required();
    gen->add_option("--seed", gen_seed, "Generation seed")->capture_default_str();
    gen->add_option("--range", gen_range, "a,b for uniform-range-40");
    gen->add_option("--dist", gen_dist, "Override distribution (kind:params)");
    gen->add_option("--out", gen_out, "Output directory")->capture_default_str();

    // train --------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "Train one network from a config file");
    std::string tr_config, tr_out = "out";
    int tr_epochs = -1, tr_threads = -1, tr_fold = 0;
    std::int64_t tr_seed = -1;
    tr->add_option("config", tr_config, "Experiment config file")->required();
    tr->add_option("--epochs", tr_epochs, "Override epochs");
    tr->add_option("--seed", tr_seed, "Override master seed");
    tr->add_option("--threads", tr_threads, "Override worker count");
    tr->add_option("--fold", tr_fold, "Fold index to train")->capture_default_str();
    tr->add_option("--out", tr_out, "Output directory")->capture_default_str();

    // eval ----------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a saved dataset");
    std::string ev_checkpoint, ev_data;
    ev->add_option("--checkpoint", ev_checkpoint, "Checkpoint path")->required();
    ev->add_option("--data", ev_data, "Dataset prefix (as written by generate-data)")
        ->required();

    // gradcheck -------------------------------------------------------------
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks for every layer");
    int gc_seeds = 20;
    double gc_tolerance = 1e-4;
    std::uint64_t gc_master = 1234;
    gc->add_option("--seeds", gc_seeds, "Seed count per layer")->capture_default_str();
    gc->add_option("--tolerance", gc_tolerance, "Relative error bound")->capture_default_str();
    gc->add_option("--master-seed", gc_master, "Master seed")->capture_default_str();

    // repro -----------------------------------------------------------------
    auto* rp = app.add_subcommand("repro", "Reproduce a benchmark artifact end to end");
    std::string rp_experiment, rp_out;
    int rp_folds = -1, rp_epochs = -1, rp_train = -1, rp_test = -1, rp_threads = -1;
    std::int64_t rp_seed = -1, rp_data_seed = -1;
    bool rp_verbose = false;
    rp->add_option("--experiment", rp_experiment, "table1|fig4a|fig4b|fig5a|fig5b")->required();
    rp->add_option("--out", rp_out, "Output directory (default out/<experiment>)");
    rp->add_option("--folds", rp_folds, "Override fold count");
    rp->add_option("--epochs", rp_epochs, "Override epochs");
    rp->add_option("--train-size", rp_train, "Override per-fold training images");
    rp->add_option("--test-size", rp_test, "Override per-fold test images");
    rp->add_option("--seed", rp_seed, "Override master seed");
    rp->add_option("--data-seed", rp_data_seed, "Override dataset seed");
    rp->add_option("--threads", rp_threads, "Override worker count");
    int rp_jobs = 1, rp_pool_limit = 0;
    rp->add_option("--jobs", rp_jobs, "Training cells run in parallel")->capture_default_str();
    rp->add_option("--pool-limit", rp_pool_limit, "Render only this many pool rows (smoke runs)");
    rp->add_flag("--verbose", rp_verbose, "Per-epoch progress on stderr");

    // invariance --------------------------------------------------------------
    auto* iv = app.add_subcommand("invariance", "Score invariance of trained checkpoints");
    std::vector<std::string> iv_checkpoints;
    std::string iv_data, iv_out = "out";
    int iv_limit = 2000;
    iv->add_option("--checkpoint", iv_checkpoints, "Checkpoint path (repeatable)")->required();
    iv->add_option("--data", iv_data, "Dataset prefix for probe images")->required();
    iv->add_option("--limit", iv_limit, "Probe image cap, 0 for all")->capture_default_str();
    iv->add_option("--out", iv_out, "Output directory")->capture_default_str();

    // opcount -----------------------------------------------------------------
    auto* oc = app.add_subcommand("opcount", "Predicted and measured convolution counts");
    std::string oc_config;
    oc->add_option("config", oc_config, "Experiment config file")->required();

    // sweep ---------------------------------------------------------------------
    auto* sw = app.add_subcommand("sweep", "Parameter sweep with paired trainings");
    std::string sw_kind, sw_config, sw_out = "out/sweep";
    int sw_jobs = 1, sw_pool_limit = 0;
    bool sw_verbose = false;
    sw->add_option("--kind", sw_kind, "featmaps|trainsize|gaussian-test-scale|uniform-range")
        ->required();
    sw->add_option("--config", sw_config, "Base experiment config file")->required();
    sw->add_option("--out", sw_out, "Output directory")->capture_default_str();
    sw->add_option("--jobs", sw_jobs, "Training cells run in parallel")->capture_default_str();
    sw->add_option("--pool-limit", sw_pool_limit,
                   "Render only this many pool rows (smoke runs)");
    sw->add_flag("--verbose", sw_verbose, "Per-epoch progress on stderr");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            const VariantInfo info = variant_info(gen_variant);
            std::string dist_text = !gen_dist.empty() ? gen_dist : info.default_dist;
            if (gen_variant == "uniform-range-40" && gen_dist.empty()) {
                if (gen_range.empty()) {
                    throw CLI::ValidationError("--range",
                                               "uniform-range-40 needs --range a,b");
                }
                dist_text = "uniform:" + gen_range;
            }
            const sicnn::ScaleDistribution dist = sicnn::parse_distribution(dist_text);
            sicnn::Dataset ds =
                sicnn::ensure_scaled_pool(gen_out, mnist_dir, dist, info.canvas, gen_seed);
            std::cout << "generated " << ds.count() << " images (" << ds.height() << "x"
                      << ds.width() << ", " << dist.describe() << ", seed " << gen_seed
                      << ") under " << gen_out << "/data\n";
            return 0;
        }

        if (tr->parsed()) {
            sicnn::ExperimentConfig cfg = sicnn::load_config(tr_config);
            if (tr_epochs >= 0) cfg.epochs = tr_epochs;
            if (tr_seed >= 0) cfg.seed = static_cast<std::uint64_t>(tr_seed);
            if (tr_threads >= 0) cfg.threads = tr_threads;
            if (tr_fold < 0 || tr_fold >= cfg.folds) {
                throw CLI::ValidationError("--fold", "fold index out of range");
            }
            sicnn::Dataset pool = sicnn::ensure_scaled_pool(
                tr_out, mnist_dir, sicnn::parse_distribution(cfg.dist), cfg.canvas,
                cfg.data_seed);
            std::vector<sicnn::Fold> folds = sicnn::make_folds(
                pool, cfg.folds, cfg.train_size, cfg.test_size, cfg.data_seed);
            pool = sicnn::Dataset{};
            sicnn::CellResult r = sicnn::run_cell(
                tr_out, cfg, cfg.arch, folds[static_cast<std::size_t>(tr_fold)], tr_fold, true);
            std::cout << "arch " << r.arch << " fold " << r.fold << " test_error "
                      << r.test_error << " train_loss " << r.train_loss << " seconds "
                      << r.wall_seconds << "\ncheckpoint " << r.checkpoint_path << "\n";
            return 0;
        }

        if (ev->parsed()) {
            sicnn::Checkpoint ck = sicnn::load_checkpoint(ev_checkpoint);
            sicnn::Dataset ds = sicnn::load_dataset(ev_data);
            if (ck.network.mean().size()) sicnn::apply_mean(ds, ck.network.mean());
            const double err = sicnn::evaluate(ck.network, ds);
            std::cout << "images " << ds.count() << " error_rate " << err << "\n";
            return 0;
        }

        if (gc->parsed()) {
            bool all_pass = true;
            double worst = 0.0;
            for (int s = 0; s < gc_seeds; ++s) {
                std::vector<sicnn::GradCheckReport> reports = sicnn::run_layer_gradchecks(
                    gc_master, static_cast<std::uint64_t>(s), gc_tolerance);
                for (const sicnn::GradCheckReport& r : reports) {
                    worst = std::max(worst, r.max_relative_error);
                    if (!r.pass) {
                        all_pass = false;
                        std::cout << "FAIL " << r.layer_name << "." << r.param_name << " seed "
                                  << s << " rel_err " << r.max_relative_error << " at coord "
                                  << r.worst_coordinate << "\n";
                    }
                }
            }
            std::cout << (all_pass ? "gradcheck PASS" : "gradcheck FAIL") << " (" << gc_seeds
                      << " seeds, tolerance " << gc_tolerance << ", worst " << worst << ")\n";
            return all_pass ? 0 : 1;
        }

        if (rp->parsed()) {
            if (rp_out.empty()) rp_out = "out/" + rp_experiment;
            if (rp_experiment == "table1") {
                sicnn::ExperimentConfig base;  // defaults are the full 28-canvas protocol
                if (rp_folds >= 0) base.folds = rp_folds;
                if (rp_epochs >= 0) base.epochs = rp_epochs;
                if (rp_train >= 0) base.train_size = rp_train;
                if (rp_test >= 0) base.test_size = rp_test;
                if (rp_seed >= 0) base.seed = static_cast<std::uint64_t>(rp_seed);
                if (rp_data_seed >= 0) base.data_seed = static_cast<std::uint64_t>(rp_data_seed);
                if (rp_threads >= 0) base.threads = rp_threads;
                sicnn::Table1Summary sum =
                    sicnn::run_table1(rp_out, base, mnist_dir, rp_verbose);
                std::cout << "table1 (" << base.folds << " folds x " << base.epochs
                          << " epochs)\n"
                          << "conv   mean_error " << sum.conv_mean << " std " << sum.conv_std
                          << "\n"
                          << "siconv mean_error " << sum.si_mean << " std " << sum.si_std
                          << "\nreports under " << rp_out << "\n";
                return 0;
            }

            std::string kind;
            sicnn::ExperimentConfig base;
            if (rp_experiment == "fig4a") {
                kind = "featmaps";
            } else if (rp_experiment == "fig4b") {
                kind = "trainsize";
            } else if (rp_experiment == "fig5a") {
                kind = "gaussian-test-scale";
                base = canvas40_config();
            } else if (rp_experiment == "fig5b") {
                kind = "uniform-range";
                base = canvas40_config();
                base.dist = "uniform:0.2,1.8";
            } else {
                throw CLI::ValidationError("--experiment",
                                           "unknown experiment '" + rp_experiment + "'");
            }
            if (rp_folds >= 0) base.folds = rp_folds;
            if (rp_epochs >= 0) base.epochs = rp_epochs;
            if (rp_train >= 0) base.train_size = rp_train;
            if (rp_test >= 0) base.test_size = rp_test;
            if (rp_seed >= 0) base.seed = static_cast<std::uint64_t>(rp_seed);
            if (rp_data_seed >= 0) base.data_seed = static_cast<std::uint64_t>(rp_data_seed);
            if (rp_threads >= 0) base.threads = rp_threads;
            sicnn::SweepOptions sopt;
            sopt.out_dir = rp_out;
            sopt.mnist_dir = mnist_dir;
            sopt.jobs = rp_jobs;
            sopt.pool_limit = rp_pool_limit;
            sopt.verbose = rp_verbose;
            const sicnn::SweepReport rep = sicnn::run_sweep(kind, base, sopt);
            std::cout << rp_experiment << " (" << kind << ", " << base.folds << " folds x "
                      << base.epochs << " epochs)\n";
            for (const sicnn::SweepPoint& p : rep.points) {
                for (const auto& [name, value] : p.axis) std::cout << name << " " << value << " ";
                std::cout << "conv " << p.conv_mean << " +- " << p.conv_std << " siconv "
                          << p.siconv_mean << " +- " << p.siconv_std << "\n";
            }
            std::cout << "report " << rep.csv_path << "\n";
            return 0;
        }

        if (iv->parsed()) {
            sicnn::Dataset probe = head_rows(sicnn::load_dataset(iv_data), iv_limit);
            std::vector<std::pair<std::string, std::vector<sicnn::LayerInvariance>>> reports;
            for (const std::string& path : iv_checkpoints) {
                sicnn::Checkpoint ck = sicnn::load_checkpoint(path);
                std::vector<sicnn::LayerInvariance> rep =
                    sicnn::invariance_score(ck.network, probe);
                std::cout << ck.config.arch << " (" << path << ", " << probe.count()
                          << " probes)\n";
                for (const sicnn::LayerInvariance& li : rep) {
                    std::cout << "  " << li.layer << " scored " << li.scored_neurons << "/"
                              << li.total_neurons << " mean_top_score ";
                    if (li.dead) {
                        std::cout << "n/a (dead tap)\n";
                    } else {
                        std::cout << li.mean_top_score << "\n";
                    }
                }
                reports.emplace_back(ck.config.arch, std::move(rep));
            }
            std::filesystem::create_directories(iv_out);
            const std::string csv = iv_out + "/fig3_invariance.csv";
            sicnn::write_invariance_csv(csv, reports);
            std::cout << "report " << csv << "\n";
            return 0;
        }

        if (oc->parsed()) {
            const sicnn::ExperimentConfig cfg = sicnn::load_config(oc_config);
            const std::vector<double> scales = sicnn::parse_scales(cfg.scales);
            const sicnn::NetShapePlan plan = sicnn::plan_shapes(cfg);
            std::cout << "scales";
            for (double s : scales) std::cout << " " << s;
            std::cout << "\n";
            const auto report = [&](const char* name, int n, int k) {
                const std::int64_t measured = sicnn::measured_conv_count(scales, n, k);
                const double ideal = sicnn::idealized_conv_count(scales, n, k);
                std::cout << name << " n " << n << " k " << k << " levels";
                for (double s : scales) std::cout << " " << sicnn::scaled_extent(s, n);
                std::cout << " measured_windows " << measured << " model " << ideal << " gap "
                          << 100.0 * std::abs(measured - ideal) / ideal << "%\n";
            };
            report("conv1", cfg.canvas, cfg.kernel1);
            report("conv2", plan.pool1_out, cfg.kernel2);
            sicnn::OpCountModel model;
            if (geometric_ladder(scales, model)) {
                std::cout << "geometric ladder ratio " << model.s << " cost multiple "
                          << sicnn::predicted_conv_multiple(model)
                          << "x the unscaled convolution\n";
            } else {
                std::cout << "scale set is not one geometric ladder; no closed-form multiple\n";
            }
            return 0;
        }

        if (sw->parsed()) {
            const sicnn::ExperimentConfig base = sicnn::load_config(sw_config);
            sicnn::SweepOptions sopt;
            sopt.out_dir = sw_out;
            sopt.mnist_dir = mnist_dir;
            sopt.jobs = sw_jobs;
            sopt.pool_limit = sw_pool_limit;
            sopt.verbose = sw_verbose;
            const sicnn::SweepReport rep = sicnn::run_sweep(sw_kind, base, sopt);
            for (const sicnn::SweepPoint& p : rep.points) {
                for (const auto& [name, value] : p.axis) std::cout << name << " " << value << " ";
                std::cout << "conv " << p.conv_mean << " +- " << p.conv_std << " siconv "
                          << p.siconv_mean << " +- " << p.siconv_std << "\n";
            }
            std::cout << "report " << rep.csv_path << "\n";
            return 0;
        }
    } catch (const CLI::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
