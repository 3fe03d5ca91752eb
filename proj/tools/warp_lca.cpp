// warp_lca: dictionary learning, state encoding, predictor training and the
// cold vs warm-start LCA experiments from one binary.
//
// Every verb prints a JSON summary on stdout. Failures print
// {"error": {"kind", "message", "command"}} on stderr and exit nonzero
// (2 for usage errors, 1 for everything else).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "warp_lca/warp_lca.hpp"

namespace {

using nlohmann::json;
using namespace warp_lca;
namespace pl = warp_lca::pipeline;

/// Non-negative integer, also written as "1e3" or "2.0".
std::uint64_t parse_count(const std::string& text, const std::string& flag) {
    const auto bad = [&] { return CLI::ValidationError(flag, "expected a non-negative integer, got '" + text + "'"); };
    if (!text.empty() && text.find_first_not_of("0123456789") == std::string::npos) {
        try {
            return std::stoull(text);
        } catch (const std::exception&) {
            throw bad();
        }
    }
    double v = 0.0;
    std::size_t used = 0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        throw bad();
    }
    if (used != text.size() || !std::isfinite(v) || v < 0.0 || v != std::floor(v) || v > 9.007199254740992e15)
        throw bad();
    return static_cast<std::uint64_t>(v);
}

template <typename T>
CLI::Option* add_count(CLI::App* app, const std::string& name, T& target, const std::string& help) {
    const std::string flag = name;
    return app
        ->add_option_function<std::string>(
            name, [&target, flag](const std::string& s) { target = static_cast<T>(parse_count(s, flag)); }, help)
        ->default_str(std::to_string(target));
}

CLI::Option* add_count_list(CLI::App* app, const std::string& name, std::vector<std::size_t>& target,
                            const std::string& help) {
    const std::string flag = name;
    std::string shown;
    for (auto v : target) shown += (shown.empty() ? "" : ",") + std::to_string(v);
    return app
        ->add_option_function<std::vector<std::string>>(
            name,
            [&target, flag](const std::vector<std::string>& items) {
                target.clear();
                for (const auto& s : items) target.push_back(static_cast<std::size_t>(parse_count(s, flag)));
            },
            help)
        ->delimiter(',')
        ->default_str(shown);
}

/// Reads --config JSON. Keys may use '-' or '_'. Flat keys go to the selected
/// verb when it has a matching option and to the top level otherwise; an
/// object keyed by a verb name applies only to that verb.
class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(const CLI::App* root) : root_(root) {}

    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            j = json::parse(input);
        } catch (const json::exception& e) {
            throw CLI::ConfigError(std::string("--config: invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConfigError("--config: top level must be a JSON object");
        const auto selected = root_->get_subcommands();
        const CLI::App* verb = selected.empty() ? nullptr : selected.front();
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            const std::string name = dashed(key);
            if (value.is_object()) {
                if (verb == nullptr || verb->get_name() != name) continue;
                for (const auto& [k2, v2] : value.items()) items.push_back(item({name}, dashed(k2), v2));
                continue;
            }
            std::vector<std::string> parents;
            if (verb != nullptr && verb->get_option_no_throw("--" + name) != nullptr) parents.push_back(verb->get_name());
            items.push_back(item(parents, name, value));
        }
        return items;
    }

private:
    static std::string dashed(std::string s) {
        for (char& c : s)
            if (c == '_') c = '-';
        return s;
    }

    static std::string scalar(const json& v) {
        if (v.is_string()) return v.get<std::string>();
        return v.dump();
    }

    static CLI::ConfigItem item(std::vector<std::string> parents, std::string name, const json& value) {
        CLI::ConfigItem it;
        it.parents = std::move(parents);
        it.name = std::move(name);
        if (value.is_array())
            for (const auto& v : value) it.inputs.push_back(scalar(v));
        else
            it.inputs.push_back(scalar(value));
        return it;
    }

    const CLI::App* root_;
};

/// Solver flags shared by the encoding and evaluation verbs.
struct SolverFlags {
    double tau = 200.0;
    std::size_t n_iters = 1000;
    std::size_t track_every = 10;
    std::string threshold = "hard";
    double lambda = 0.15;
    std::optional<double> mu;
    double alpha = 0.0;
    double gamma_steep = 100.0;
    bool signed_codes = false;
    std::string inhibition = "residual";

    void add(CLI::App* app, bool with_lambda, bool with_iters) {
        app->add_option("--tau", tau, "LCA time constant (step size 1/tau)")->capture_default_str();
        if (with_iters) {
            add_count(app, "--n-iters", n_iters, "LCA iterations");
            add_count(app, "--track-every", track_every, "metrics recorded every k iterations");
        }
        app->add_option("--threshold", threshold, "hard | soft | generalized | half | cel0")
            ->capture_default_str()
            ->check(CLI::IsMember({"hard", "soft", "generalized", "half", "cel0"}));
        if (with_lambda) app->add_option("--lambda", lambda, "sparsity weight (theta for half)")->capture_default_str();
        app->add_option_function<double>("--mu", [this](double v) { mu = v; }, "CEL0 mu (required for cel0)");
        app->add_option("--alpha", alpha, "hard/generalized threshold alpha")->capture_default_str();
        app->add_option("--gamma-steep", gamma_steep, "generalized threshold steepness")->capture_default_str();
        app->add_flag("--signed", signed_codes, "allow negative activations");
        app->add_option("--inhibition", inhibition, "residual | gram")
            ->capture_default_str()
            ->check(CLI::IsMember({"residual", "gram"}));
    }

    LcaConfig build() const {
        LcaConfig c;
        c.tau = tau;
        c.n_iters = n_iters;
        c.track_every = track_every;
        c.threshold = pl::make_threshold(threshold, lambda, mu, alpha, gamma_steep, !signed_codes);
        c.inhibition = inhibition == "gram" ? InhibitionMode::Gram : InhibitionMode::Residual;
        c.validate();
        return c;
    }
};

struct Globals {
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    std::string out = "out";
};

void print_error(const std::string& kind, const std::string& message, const std::string& command) {
    json e{{"error", {{"kind", kind}, {"message", message}, {"command", command}}}};
    std::cerr << e.dump() << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"WARP-LCA: convolutional sparse coding with learned warm starts", "warp_lca"};
    app.require_subcommand(1);
    app.fallthrough();
    app.config_formatter(std::make_shared<JsonConfig>(&app));
    app.set_config("--config", "", "JSON file with option values (command line wins)");

    Globals g;
    add_count(&app, "--seed", g.seed, "random seed");
    add_count(&app, "--threads", g.threads, "worker threads (0 = runtime default)");
    app.add_option("--out", g.out, "output directory")->capture_default_str();

    bool center_crop = false;
    auto policy = [&] { return center_crop ? SizePolicy::CenterCrop : SizePolicy::Strict; };

    // learn-dict
    pl::LearnDictOptions ld;
    ld.config.features = 100;
    ld.config.lambda0 = 2.55;
    std::string ld_data;
    std::size_t kernel = 9, stride = 2;
    bool no_normalize = false, ld_signed = false;
    auto* learn = app.add_subcommand("learn-dict", "learn a convolutional dictionary with ISTA + projected gradient");
    learn->add_option("--data", ld_data, "image directory or WTNS [N,C,H,W] file")->required();
    add_count(learn, "--features", ld.config.features, "number of kernels");
    add_count(learn, "--kernel", kernel, "kernel size");
    add_count(learn, "--stride", stride, "convolution stride");
    add_count(learn, "--epochs", ld.config.epochs, "training epochs")->required();
    add_count(learn, "--ista-steps", ld.config.ista_steps, "ISTA steps per batch")->required();
    learn->add_option("--increase-factor", ld.config.increase_factor, "lambda multiplier per epoch")->required();
    learn->add_option("--lambda0", ld.config.lambda0, "initial sparsity weight")->capture_default_str();
    learn->add_option("--eta", ld.config.eta, "kernel learning rate")->capture_default_str();
    add_count(learn, "--batch-size", ld.config.batch_size, "images per update");
    learn->add_option("--init-std", ld.config.init_std, "std of the random initial kernels")->capture_default_str();
    learn->add_flag("--no-normalize", no_normalize, "keep raw [0,1] pixels instead of per-channel standardisation");
    learn->add_flag("--signed", ld_signed, "allow negative codes during learning");
    learn->add_flag("--center-crop", center_crop, "crop mixed-size images to the smallest size");

    // encode
    pl::EncodeOptions en;
    std::string en_data, en_dict;
    SolverFlags en_solver;
    auto* enc = app.add_subcommand("encode", "run LCA per image and store final membrane states");
    enc->add_option("--data", en_data, "image directory or WTNS file")->required();
    enc->add_option("--dictionary", en_dict, "dictionary .wtns")->required();
    enc->add_option("--lambdas", en.lambdas, "sparsity levels")->delimiter(',')->capture_default_str();
    en_solver.add(enc, false, true);
    enc->add_flag("--center-crop", center_crop, "crop mixed-size images to the smallest size");

    // train-predictor
    pl::TrainPredictorOptions tp;
    std::string tp_states, tp_dict;
    auto* train = app.add_subcommand("train-predictor", "train the state predictor on an encoded dataset");
    train->add_option("--states", tp_states, "encode output directory or manifest")->required();
    train->add_option("--dictionary", tp_dict, "dictionary .wtns used for encoding")->required();
    train->add_option("--lr", tp.config.lr, "Adam learning rate")->capture_default_str();
    add_count(train, "--batch-size", tp.config.batch_size, "batch size");
    add_count(train, "--epochs", tp.config.epochs, "epochs");
    train->add_option("--gamma", tp.config.gamma_loss, "loss weighting gamma")->capture_default_str();
    train->add_option("--epsilon", tp.config.epsilon, "loss weighting epsilon")->capture_default_str();
    train->add_option("--init-sparsity", tp.config.init_sparsity, "fraction of initial weights zeroed")
        ->capture_default_str();
    train->add_option("--init-std", tp.config.init_std, "std of the nonzero initial weights")->capture_default_str();
    train->add_option("--val-fraction", tp.config.val_fraction, "held-out fraction")->capture_default_str();
    add_count_list(train, "--trunk-widths", tp.trunk_widths, "trunk layer widths");
    add_count(train, "--branch-width", tp.branch_width, "hidden width of each branch");

    // evaluation verbs
    struct EvalFlags {
        std::string dictionary, predictor, data;
        std::size_t max_images = 0;
        SolverFlags solver;
    };
    auto add_eval = [&](CLI::App* sub, EvalFlags& f, bool with_lambda, bool with_iters) {
        sub->add_option("--dictionary", f.dictionary, "dictionary .wtns")->required();
        sub->add_option("--data", f.data, "test images (directory or WTNS file)")->required();
        sub->add_option("--predictor", f.predictor, "trained predictor .wtns");
        add_count(sub, "--max-images", f.max_images, "use at most this many images (0 = all)");
        sub->add_flag("--center-crop", center_crop, "crop mixed-size images to the smallest size");
        f.solver.add(sub, with_lambda, with_iters);
    };
    auto experiment = [&](const EvalFlags& f) {
        pl::ExperimentConfig e;
        e.dictionary = f.dictionary;
        e.predictor = f.predictor;
        e.data = f.data;
        e.out = g.out;
        e.seed = g.seed;
        e.solver = f.solver.build();
        e.size_policy = policy();
        e.max_images = f.max_images;
        return e;
    };

    EvalFlags cmp_flags;
    pl::CompareOptions cmp;
    bool cmp_cold = false, cmp_oracle = false;
    auto* compare = app.add_subcommand("compare", "cold-start LCA vs warm-started LCA on a test set");
    add_eval(compare, cmp_flags, true, true);
    compare->add_flag("--cold-only", cmp_cold, "only run the cold-start solver");
    compare->add_flag("--oracle-warm", cmp_oracle, "warm start from the final cold state instead of the predictor");
    add_count(compare, "--recon-images", cmp.recon_images, "reconstruction PNGs to write");

    EvalFlags dn_flags;
    pl::DenoiseOptions dn;
    std::vector<double> sigmas;
    auto* denoise = app.add_subcommand("denoise", "reconstruct noisy images, report PSNR/SSIM against the clean ones");
    add_eval(denoise, dn_flags, false, false);
    denoise->add_option("--sigmas", sigmas, "noise std list in [0,1] pixel units")->delimiter(',')->required();
    denoise->add_option("--lambda", dn.lambda, "sparsity weight")->capture_default_str();
    add_count(denoise, "--cold-iters", dn.cold_iters, "cold-start iterations");
    add_count(denoise, "--warm-iters", dn.warm_iters, "warm-start iterations");
    denoise->add_flag("--cold-only", dn.cold_only, "skip the warm-started run");
    add_count(denoise, "--recon-images", dn.recon_images, "reconstruction PNGs per sigma");

    EvalFlags am_flags;
    pl::ActivationMapOptions am;
    auto* amap = app.add_subcommand("activation-map", "accumulated activation maps, warm vs cold");
    add_eval(amap, am_flags, true, false);
    add_count(amap, "--warm-iters", am.warm_iters, "warm-start iterations");
    add_count(amap, "--cold-iters", am.cold_iters, "cold-start iterations");
    add_count(amap, "--count", am.count, "images rendered");

    EvalFlags sw_flags;
    pl::StepSweepOptions sw;
    bool sw_cold = false, sw_oracle = false;
    auto* sweep = app.add_subcommand("step-sweep", "repeat the comparison over a list of tau values");
    add_eval(sweep, sw_flags, true, true);
    sweep->add_option("--taus", sw.taus, "tau values")->delimiter(',')->required();
    sweep->add_flag("--cold-only", sw_cold, "only run the cold-start solver");
    sweep->add_flag("--oracle-warm", sw_oracle, "warm start from the final cold state at --tau");

    std::string command;
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        const auto subs = app.get_subcommands();
        print_error("usage", std::string(e.get_name()) + ": " + e.what(), subs.empty() ? "" : subs.front()->get_name());
        return 2;
    }
    command = app.get_subcommands().front()->get_name();

    try {
#ifdef _OPENMP
        if (g.threads > 0) omp_set_num_threads(static_cast<int>(g.threads));
#endif
        json summary;
        if (command == "learn-dict") {
            ld.data = ld_data;
            ld.out = g.out;
            ld.config.geom = ConvGeometry::square(kernel, stride);
            ld.config.seed = g.seed;
            ld.config.nonneg = !ld_signed;
            ld.normalize = !no_normalize;
            ld.size_policy = policy();
            summary = pl::learn_dict(ld);
        } else if (command == "encode") {
            en.data = en_data;
            en.dictionary = en_dict;
            en.out = g.out;
            en.solver = en_solver.build();
            en.size_policy = policy();
            summary = pl::encode(en);
        } else if (command == "train-predictor") {
            tp.states = tp_states;
            tp.dictionary = tp_dict;
            tp.out = g.out;
            tp.config.seed = g.seed;
            summary = pl::train_predictor_cmd(tp, [](std::size_t epoch, double train_loss, std::optional<double> val) {
                json line{{"epoch", epoch}, {"train_loss", train_loss}};
                if (val) line["val_loss"] = *val;
                std::cerr << line.dump() << std::endl;
            });
        } else if (command == "compare") {
            if (cmp_cold && cmp_oracle) throw ConfigError("compare: --cold-only and --oracle-warm are exclusive");
            cmp.exp = experiment(cmp_flags);
            cmp.warm = cmp_cold ? pl::WarmMode::None : cmp_oracle ? pl::WarmMode::Oracle : pl::WarmMode::Predictor;
            summary = pl::compare(cmp);
        } else if (command == "denoise") {
            dn.exp = experiment(dn_flags);
            dn.exp.sigmas = sigmas;
            summary = pl::denoise(dn);
        } else if (command == "activation-map") {
            am.exp = experiment(am_flags);
            summary = pl::activation_map(am);
        } else if (command == "step-sweep") {
            if (sw_cold && sw_oracle) throw ConfigError("step-sweep: --cold-only and --oracle-warm are exclusive");
            sw.exp = experiment(sw_flags);
            sw.warm = sw_cold ? pl::WarmMode::None : sw_oracle ? pl::WarmMode::Oracle : pl::WarmMode::Predictor;
            summary = pl::step_sweep(sw);
        }
        std::cout << summary.dump(2) << std::endl;
        return 0;
    } catch (const warp_lca::Error& e) {
        print_error(e.kind(), e.what(), command);
    } catch (const std::filesystem::filesystem_error& e) {
        print_error("io", e.what(), command);
    } catch (const std::exception& e) {
        print_error("internal", e.what(), command);
    }
    return 1;
}
