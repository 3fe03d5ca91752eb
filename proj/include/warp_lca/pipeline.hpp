#pragma once

// End-to-end commands behind the warp_lca tool: dictionary learning, state
// encoding, predictor training, and the cold vs warm-start experiments.
// Every command writes its artefacts under an output directory and returns a
// JSON summary. Results depend only on the inputs and the seed, never on the
// thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "warp_lca/dictionary.hpp"
#include "warp_lca/errors.hpp"
#include "warp_lca/lca.hpp"
#include "warp_lca/metrics.hpp"
#include "warp_lca/predictor.hpp"
#include "warp_lca/storage.hpp"

namespace warp_lca {

inline void to_json(nlohmann::json& j, const LcaConfig& c) {
    j = {{"tau", c.tau},
         {"n_iters", c.n_iters},
         {"threshold", c.threshold},
         {"track_every", c.track_every},
         {"inhibition", c.inhibition == InhibitionMode::Gram ? "gram" : "residual"}};
}

namespace pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

/// Runs body(i) for i in [0, n), spread over OpenMP threads. The first
/// exception thrown by any iteration is rethrown once all have finished.
template <typename F>
void parallel_for(std::size_t n, F&& body) {
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
#pragma omp critical(warp_lca_parallel_for)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
}

inline std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

inline void require_path(const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what + " path is required");
    if (!fs::exists(p)) throw IoError(what + " '" + p.string() + "' does not exist");
}

inline void prepare_out(const fs::path& out) {
    if (out.empty()) throw ConfigError("an output directory is required (--out)");
    fs::create_directories(out);
}

/// Independent stream per (seed, a, b) so per-sample noise does not depend on
/// evaluation order.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
    return std::mt19937_64(seq);
}

inline ThresholdSpec with_lambda(ThresholdSpec spec, double lambda) {
    if (spec.kind == ThresholdKind::Half)
        spec.theta = lambda;
    else
        spec.lambda = lambda;
    spec.validate();
    return spec;
}

} // namespace detail

/// Threshold from CLI-style arguments. `lambda` is theta for the l1/2 operator.
/// CEL0 has no default mu.
inline ThresholdSpec make_threshold(const std::string& kind, double lambda, std::optional<double> mu = std::nullopt,
                                    double alpha = 0.0, double gamma_steep = 100.0, bool nonneg = true) {
    ThresholdSpec s;
    switch (threshold_kind_from_string(kind)) {
    case ThresholdKind::Hard:
        s = ThresholdSpec::hard(lambda, nonneg);
        s.alpha = alpha;
        break;
    case ThresholdKind::Soft: s = ThresholdSpec::soft(lambda, nonneg); break;
    case ThresholdKind::Generalized: s = ThresholdSpec::generalized(lambda, alpha, gamma_steep, nonneg); break;
    case ThresholdKind::Half: s = ThresholdSpec::half(lambda, nonneg); break;
    case ThresholdKind::Cel0:
        if (!mu) throw ConfigError("threshold 'cel0' requires mu (--mu)");
        s = ThresholdSpec::cel0(lambda, *mu, nonneg);
        break;
    }
    s.validate();
    return s;
}

// ---------------------------------------------------------------- learn-dict

struct LearnDictOptions {
    fs::path data;
    fs::path out;
    DictLearnConfig config;
    bool normalize = true; // fit per-channel mean/std on the dataset
    SizePolicy size_policy = SizePolicy::Strict;
};

/// Mean squared reconstruction error of ISTA codes over the dataset.
inline double dataset_loss(std::span<const Tensor4> data, const Dictionary& dict, double lambda,
                           const DictLearnConfig& cfg) {
    if (data.empty()) return 0.0;
    const double step = 1.0 / std::max(estimate_lipschitz(dict, data.front().shape()), 1e-12);
    std::vector<double> losses(data.size());
    detail::parallel_for(data.size(), [&](std::size_t i) {
        const Tensor4 codes = ista_encode(data[i], dict, lambda, cfg.ista_steps, step, cfg.nonneg);
        losses[i] = reconstruction_loss(data[i], codes, dict);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(data.size());
}

inline json learn_dict(const LearnDictOptions& o) {
    detail::require_path(o.data, "learn-dict: dataset");
    detail::prepare_out(o.out);
    const Dataset raw = load_pixels(o.data, o.size_policy);
    if (raw.images.empty()) throw ConfigError("learn-dict: dataset '" + o.data.string() + "' contains no images");
    const Normalization norm = o.normalize ? Normalization::fit(raw.images) : Normalization::identity();
    std::vector<Tensor4> data;
    data.reserve(raw.images.size());
    for (const auto& img : raw.images) data.push_back(norm.apply(img));

    std::ostringstream log;
    log << "epoch,lambda,loss\n";
    double last_loss = std::numeric_limits<double>::quiet_NaN();
    Dictionary dict = learn_dictionary(data, o.config, [&](std::size_t epoch, const Dictionary& d) {
        const double lambda = d.meta.lambda_schedule.back();
        last_loss = dataset_loss(data, d, lambda, o.config);
        log << epoch << ',' << detail::num(lambda) << ',' << detail::num(last_loss) << '\n';
    });
    dict.meta.normalization = norm;

    const fs::path dict_path = o.out / "dictionary.wtns";
    save_dictionary(dict_path, dict);
    write_file_atomic(o.out / "dictionary_loss.csv", log.str());
    return {{"command", "learn-dict"},
            {"dictionary", dict_path.string()},
            {"fingerprint", dictionary_fingerprint(dict)},
            {"features", dict.features()},
            {"channels", dict.channels()},
            {"images", data.size()},
            {"epochs", o.config.epochs},
            {"lambda_schedule", dict.meta.lambda_schedule},
            {"final_loss", last_loss},
            {"warnings", raw.warnings}};
}

// ---------------------------------------------------------------- encode

struct EncodeOptions {
    fs::path data;
    fs::path dictionary;
    fs::path out;
    LcaConfig solver; // threshold kind and parameters; lambda taken from `lambdas`
    std::vector<double> lambdas{0.15};
    SizePolicy size_policy = SizePolicy::Strict;
};

/// Min/max of all states; a constant set (e.g. all-zero codes) gets a unit range.
inline TargetScaling fit_scaling(std::span<const Tensor4> states) {
    TargetScaling s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto& t : states) {
        if (t.size() == 0) continue;
        s.t_min = std::min(s.t_min, t.min());
        s.t_max = std::max(s.t_max, t.max());
    }
    if (!std::isfinite(s.t_min)) return TargetScaling{};
    if (!(s.t_max > s.t_min)) s.t_max = s.t_min + 1.0;
    return s;
}

inline json encode(const EncodeOptions& o) {
    detail::require_path(o.data, "encode: dataset");
    detail::require_path(o.dictionary, "encode: dictionary");
    if (o.lambdas.empty()) throw ConfigError("encode: the lambda list is empty");
    detail::prepare_out(o.out);
    const Dictionary dict = load_dictionary(o.dictionary);
    const Dataset pixels = load_pixels(o.data, o.size_policy);
    if (pixels.images.empty()) throw ConfigError("encode: dataset '" + o.data.string() + "' contains no images");
    const Normalization& norm = dict.meta.normalization;
    const Shape4 img = pixels.images.front().shape();

    std::vector<LcaSolver> solvers;
    for (double lambda : o.lambdas) {
        LcaConfig cfg = o.solver;
        cfg.threshold = detail::with_lambda(cfg.threshold, lambda);
        solvers.emplace_back(dict, cfg, img.h, img.w);
    }

    const std::size_t n_img = pixels.images.size();
    const std::size_t total = n_img * o.lambdas.size();
    StateDataset ds;
    ds.images.resize(total);
    ds.states.resize(total);
    ds.lambdas.resize(total);
    ds.final_l0.resize(total);
    std::vector<MetricsRecord> finals(total);
    Tracking off;
    off.enabled = false;
    Tracking measure;
    measure.normalization = norm;

    detail::parallel_for(total, [&](std::size_t r) {
        const std::size_t k = r / n_img, i = r % n_img;
        const Tensor4 x = norm.apply(pixels.images[i]);
        const LcaResult res = solvers[k].solve(x, std::nullopt, off);
        ds.images[r] = x;
        ds.states[r] = res.state.u;
        ds.lambdas[r] = o.lambdas[k];
        ds.final_l0[r] = l0_count(res.state.a);
        finals[r] = solvers[k].measure(x, res.state, measure);
    });

    ds.scaling = fit_scaling(ds.states);
    ds.dictionary_fingerprint = dictionary_fingerprint(dict);
    ds.extra = {{"solver", o.solver}, {"source", o.data.string()}, {"names", pixels.names}};
    save_state_dataset(o.out, ds);

    std::ostringstream csv;
    csv << "record,name,lambda,final_l0,mse,psnr\n";
    double mean_psnr = 0.0, mean_l0 = 0.0;
    for (std::size_t r = 0; r < total; ++r) {
        csv << r << ',' << pixels.names[r % n_img] << ',' << detail::num(ds.lambdas[r]) << ',' << ds.final_l0[r] << ','
            << detail::num(finals[r].mse) << ',' << detail::num(finals[r].psnr) << '\n';
        mean_psnr += finals[r].psnr / static_cast<double>(total);
        mean_l0 += static_cast<double>(ds.final_l0[r]) / static_cast<double>(total);
    }
    write_file_atomic(o.out / "encode_summary.csv", csv.str());
    return {{"command", "encode"},
            {"states", (o.out / "manifest.json").string()},
            {"count", total},
            {"lambdas", o.lambdas},
            {"scaling", ds.scaling},
            {"dictionary_fingerprint", ds.dictionary_fingerprint},
            {"mean_final_l0", mean_l0},
            {"mean_final_psnr", mean_psnr},
            {"warnings", pixels.warnings}};
}

// ---------------------------------------------------------------- train-predictor

struct TrainPredictorOptions {
    fs::path states;
    fs::path dictionary;
    fs::path out;
    TrainConfig config;
    std::vector<std::size_t> trunk_widths{64, 64, 64};
    std::size_t branch_width = 32;
};

inline json train_predictor_cmd(const TrainPredictorOptions& o, const TrainObserver& observer = {}) {
    detail::require_path(o.states, "train-predictor: state dataset");
    detail::require_path(o.dictionary, "train-predictor: dictionary");
    detail::prepare_out(o.out);
    const Dictionary dict = load_dictionary(o.dictionary);
    const StateDataset ds = load_state_dataset(o.states);
    const std::string fingerprint = dictionary_fingerprint(dict);
    require_fingerprint(fingerprint, ds.dictionary_fingerprint, "train-predictor: state dataset '" + o.states.string() + "'");
    if (ds.images.empty()) throw ConfigError("train-predictor: state dataset is empty");

    PredictorArch arch = PredictorArch::small(ds.images.front().shape().c, dict);
    arch.trunk_widths = o.trunk_widths;
    arch.branch_width = o.branch_width;
    arch.validate();

    std::vector<TrainSample> samples(ds.images.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        samples[i] = TrainSample{ds.images[i], ds.lambdas[i], ds.scaling.scale(ds.states[i])};

    const PredictorModel init =
        sparse_init(make_predictor(arch, ds.scaling), o.config.init_sparsity, o.config.init_std, o.config.seed);
    const TrainResult trained = train_predictor(samples, init, o.config, observer);

    ModelInfo info;
    info.dictionary_fingerprint = fingerprint;
    info.train_config = o.config;
    info.history = trained.history;
    const fs::path model_path = o.out / "predictor.wtns";
    save_model(model_path, trained.model, info);

    std::ostringstream csv;
    csv << "epoch,train_loss,val_loss\n";
    const auto& h = trained.history;
    for (std::size_t e = 0; e < h.train_loss.size(); ++e)
        csv << e << ',' << detail::num(h.train_loss[e]) << ','
            << (e < h.val_loss.size() ? detail::num(h.val_loss[e]) : std::string("nan")) << '\n';
    write_file_atomic(o.out / "train_loss.csv", csv.str());
    return {{"command", "train-predictor"},
            {"predictor", model_path.string()},
            {"parameters", trained.model.parameter_count()},
            {"train_size", h.train_size},
            {"val_size", h.val_size},
            {"best_epoch", h.best_epoch},
            {"best_loss", h.best_loss},
            {"final_train_loss", h.train_loss.empty() ? std::numeric_limits<double>::quiet_NaN() : h.train_loss.back()}};
}

// ---------------------------------------------------------------- shared evaluation

/// Inputs shared by the evaluation commands.
struct ExperimentConfig {
    fs::path dictionary;
    fs::path predictor; // empty when not needed
    fs::path data;
    fs::path out;
    LcaConfig solver;
    std::vector<double> sigmas; // denoise only
    std::uint64_t seed = 0;
    SizePolicy size_policy = SizePolicy::Strict;
    std::size_t max_images = 0; // 0 keeps every image

    void validate(const std::string& command, bool needs_predictor) const {
        detail::require_path(dictionary, command + ": dictionary");
        detail::require_path(data, command + ": dataset");
        if (needs_predictor) detail::require_path(predictor, command + ": predictor");
        if (out.empty()) throw ConfigError(command + ": an output directory is required (--out)");
        solver.validate();
    }
};

struct EvalContext {
    Dictionary dict;
    std::vector<std::string> names;
    std::vector<Tensor4> pixels; // [0, 1] pixel space
    std::vector<Tensor4> inputs; // normalised with the dictionary's statistics
    std::optional<PredictorModel> model;
    std::vector<std::string> warnings;

    const Normalization& normalization() const noexcept { return dict.meta.normalization; }
    std::size_t size() const noexcept { return inputs.size(); }
};

inline EvalContext load_context(const ExperimentConfig& c, const std::string& command, bool needs_predictor) {
    c.validate(command, needs_predictor);
    detail::prepare_out(c.out);
    EvalContext ctx;
    ctx.dict = load_dictionary(c.dictionary);
    Dataset ds = load_pixels(c.data, c.size_policy);
    if (ds.images.empty()) throw ConfigError(command + ": dataset '" + c.data.string() + "' contains no images");
    if (c.max_images > 0 && ds.images.size() > c.max_images) {
        ds.images.resize(c.max_images);
        ds.names.resize(c.max_images);
    }
    ctx.names = std::move(ds.names);
    ctx.pixels = std::move(ds.images);
    ctx.warnings = std::move(ds.warnings);
    for (const auto& p : ctx.pixels) ctx.inputs.push_back(ctx.normalization().apply(p));
    if (needs_predictor && !c.predictor.empty()) {
        auto [model, info] = load_model(c.predictor);
        require_fingerprint(dictionary_fingerprint(ctx.dict), info.dictionary_fingerprint,
                            command + ": predictor '" + c.predictor.string() + "'");
        const Shape4 expect = ctx.dict.code_shape(ctx.inputs.front().shape());
        const Shape4 got = model.output_shape(ctx.inputs.front().shape());
        require_same_shape(expect, got, command + ": predictor output vs code space");
        ctx.model = std::move(model);
    }
    return ctx;
}

/// Trajectory averaged over images (PSNR and SSIM are per-image means).
struct MeanRecord {
    std::size_t iter = 0;
    double mse = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
    double l0 = 0.0;
    double energy = 0.0;
};

inline void to_json(json& j, const MeanRecord& r) {
    j = {{"iter", r.iter}, {"mse", r.mse}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"l0", r.l0}, {"energy", r.energy}};
}

inline std::vector<MeanRecord> mean_trajectory(const std::vector<LcaResult>& runs) {
    std::vector<MeanRecord> out;
    if (runs.empty()) return out;
    const double n = static_cast<double>(runs.size());
    out.resize(runs.front().trajectory.size());
    for (const auto& run : runs)
        for (std::size_t k = 0; k < out.size(); ++k) {
            const auto& r = run.trajectory.at(k);
            out[k].iter = r.iter;
            out[k].mse += r.mse / n;
            out[k].psnr += r.psnr / n;
            out[k].ssim += r.ssim / n;
            out[k].l0 += static_cast<double>(r.l0) / n;
            out[k].energy += r.energy / n;
        }
    return out;
}

inline MeanRecord mean_final(const std::vector<MetricsRecord>& finals) {
    MeanRecord m;
    const double n = static_cast<double>(std::max<std::size_t>(finals.size(), 1));
    for (const auto& r : finals) {
        m.iter = r.iter;
        m.mse += r.mse / n;
        m.psnr += r.psnr / n;
        m.ssim += r.ssim / n;
        m.l0 += static_cast<double>(r.l0) / n;
        m.energy += r.energy / n;
    }
    return m;
}

/// Solves every image with tracking; `inits` is empty for a cold start.
inline std::vector<LcaResult> solve_all(const EvalContext& ctx, const LcaConfig& cfg,
                                        const std::vector<Tensor4>& inits = {}) {
    const Shape4 img = ctx.inputs.front().shape();
    const LcaSolver solver(ctx.dict, cfg, img.h, img.w);
    Tracking tracking;
    tracking.normalization = ctx.normalization();
    std::vector<LcaResult> out(ctx.size());
    detail::parallel_for(ctx.size(), [&](std::size_t i) {
        std::optional<Tensor4> init;
        if (!inits.empty()) init = inits[i];
        out[i] = solver.solve(ctx.inputs[i], init, tracking);
    });
    return out;
}

inline std::vector<Tensor4> predicted_inits(const EvalContext& ctx, double lambda) {
    if (!ctx.model) throw ConfigError("a trained predictor is required for the warm start (--predictor)");
    std::vector<Tensor4> out(ctx.size());
    detail::parallel_for(ctx.size(), [&](std::size_t i) { out[i] = warm_start(*ctx.model, ctx.inputs[i], lambda); });
    return out;
}

inline std::vector<Tensor4> final_states(const std::vector<LcaResult>& runs) {
    std::vector<Tensor4> out;
    for (const auto& r : runs) out.push_back(r.state.u);
    return out;
}

/// First tracked iteration at which the warm run's mean PSNR reaches the cold
/// run's final mean PSNR, and n_iters / max(that iteration, 1).
struct SpeedUp {
    bool reached = false;
    std::size_t iteration = 0;
    double factor = 0.0;
    double target_psnr = 0.0;
};

inline void to_json(json& j, const SpeedUp& s) {
    j = {{"reached", s.reached}, {"iteration", s.iteration}, {"target_psnr", s.target_psnr}};
    j["factor"] = s.reached ? json(s.factor) : json(nullptr);
}

inline SpeedUp speed_up(const std::vector<MeanRecord>& cold, const std::vector<MeanRecord>& warm, std::size_t n_iters) {
    SpeedUp s;
    if (cold.empty()) return s;
    s.target_psnr = cold.back().psnr;
    for (const auto& r : warm)
        if (r.psnr >= s.target_psnr) {
            s.reached = true;
            s.iteration = r.iter;
            s.factor = static_cast<double>(n_iters) / static_cast<double>(std::max<std::size_t>(r.iter, 1));
            break;
        }
    return s;
}

enum class WarmMode { None, Predictor, Oracle };

inline const char* to_string(WarmMode m) {
    switch (m) {
    case WarmMode::None: return "none";
    case WarmMode::Predictor: return "predictor";
    case WarmMode::Oracle: return "oracle";
    }
    return "?";
}

inline const char* warm_label(WarmMode m) { return m == WarmMode::Oracle ? "oracle_warm" : "warp_lca"; }

inline std::string trajectory_csv(const std::vector<MeanRecord>& cold, const std::vector<MeanRecord>& warm,
                                  const std::string& warm_prefix) {
    std::ostringstream os;
    os << "iter,lca_mse,lca_psnr,lca_ssim,lca_l0,lca_energy";
    if (!warm.empty())
        for (const char* m : {"mse", "psnr", "ssim", "l0", "energy"}) os << ',' << warm_prefix << '_' << m;
    os << '\n';
    auto row = [&](const MeanRecord& r) {
        os << ',' << detail::num(r.mse) << ',' << detail::num(r.psnr) << ',' << detail::num(r.ssim) << ','
           << detail::num(r.l0) << ',' << detail::num(r.energy);
    };
    for (std::size_t k = 0; k < cold.size(); ++k) {
        os << cold[k].iter;
        row(cold[k]);
        if (!warm.empty()) row(warm.at(k));
        os << '\n';
    }
    return os.str();
}

inline std::string final_table_csv(const std::vector<std::pair<std::string, MeanRecord>>& rows) {
    std::ostringstream os;
    os << "method,iters,mse,psnr,ssim,l0,energy\n";
    for (const auto& [name, r] : rows)
        os << name << ',' << r.iter << ',' << detail::num(r.mse) << ',' << detail::num(r.psnr) << ','
           << detail::num(r.ssim) << ',' << detail::num(r.l0) << ',' << detail::num(r.energy) << '\n';
    return os.str();
}

inline Tensor4 reconstruction_pixels(const EvalContext& ctx, const Tensor4& a, const Shape4& img) {
    return ctx.normalization().invert(reconstruct(a, ctx.dict, img.h, img.w));
}

// ---------------------------------------------------------------- compare

struct CompareOptions {
    ExperimentConfig exp;
    WarmMode warm = WarmMode::Predictor;
    std::size_t recon_images = 4; // reconstruction PNGs written
};

struct CompareResult {
    std::vector<MeanRecord> cold;
    std::vector<MeanRecord> warm; // empty for a cold-only run
    std::optional<SpeedUp> speedup;
};

/// The comparison itself, without touching the filesystem.
inline CompareResult run_compare(const EvalContext& ctx, const LcaConfig& cfg, WarmMode mode,
                                 std::vector<LcaResult>* cold_runs = nullptr, std::vector<LcaResult>* warm_runs = nullptr) {
    CompareResult out;
    std::vector<LcaResult> cold = solve_all(ctx, cfg);
    out.cold = mean_trajectory(cold);
    if (mode != WarmMode::None) {
        const std::vector<Tensor4> inits = mode == WarmMode::Oracle ? final_states(cold) : predicted_inits(ctx, cfg.lambda());
        std::vector<LcaResult> warm = solve_all(ctx, cfg, inits);
        out.warm = mean_trajectory(warm);
        out.speedup = speed_up(out.cold, out.warm, cfg.n_iters);
        if (warm_runs) *warm_runs = std::move(warm);
    }
    if (cold_runs) *cold_runs = std::move(cold);
    return out;
}

inline json compare(const CompareOptions& o) {
    const EvalContext ctx = load_context(o.exp, "compare", o.warm == WarmMode::Predictor);
    const LcaConfig& cfg = o.exp.solver;
    std::vector<LcaResult> cold_runs, warm_runs;
    const CompareResult res = run_compare(ctx, cfg, o.warm, &cold_runs, &warm_runs);
    const std::string label = warm_label(o.warm);

    write_file_atomic(o.exp.out / "compare_trajectory.csv", trajectory_csv(res.cold, res.warm, label));
    std::vector<std::pair<std::string, MeanRecord>> rows{{"lca", res.cold.back()}};
    if (!res.warm.empty()) rows.emplace_back(label, res.warm.back());
    write_file_atomic(o.exp.out / "compare_final.csv", final_table_csv(rows));

    const Shape4 img = ctx.inputs.front().shape();
    for (std::size_t i = 0; i < std::min(o.recon_images, ctx.size()); ++i) {
        std::vector<Tensor4> tiles{ctx.pixels[i], reconstruction_pixels(ctx, cold_runs[i].state.a, img)};
        if (!warm_runs.empty()) tiles.push_back(reconstruction_pixels(ctx, warm_runs[i].state.a, img));
        save_image(o.exp.out / ("compare_recon_" + std::to_string(i) + ".png"), tile_horizontally(tiles));
    }

    json summary{{"command", "compare"},
                 {"images", ctx.size()},
                 {"solver", cfg},
                 {"warm", to_string(o.warm)},
                 {"trajectory_rows", res.cold.size()},
                 {"final", {{"lca", res.cold.back()}}},
                 {"warnings", ctx.warnings}};
    if (!res.warm.empty()) summary["final"][label] = res.warm.back();
    if (res.speedup) summary["speedup"] = *res.speedup;
    write_json(o.exp.out / "compare_summary.json", summary);
    return summary;
}

// ---------------------------------------------------------------- denoise

struct DenoiseOptions {
    ExperimentConfig exp; // solver supplies tau and the threshold kind
    double lambda = 0.2;
    std::size_t cold_iters = 800;
    std::size_t warm_iters = 200;
    bool cold_only = false;
    std::size_t recon_images = 2;
};

/// Clean pixels plus seeded N(0, sigma^2) noise, unclipped.
inline Tensor4 add_noise(const Tensor4& clean, double sigma, std::uint64_t seed, std::size_t sigma_index,
                         std::size_t image_index) {
    Tensor4 out = clean;
    if (sigma == 0.0) return out;
    auto rng = detail::stream(seed, sigma_index, image_index);
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : out.data()) v += noise(rng);
    return out;
}

inline json denoise(const DenoiseOptions& o) {
    if (o.exp.sigmas.empty()) throw ConfigError("denoise: the sigma list is empty (--sigmas)");
    for (double s : o.exp.sigmas)
        if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("denoise: sigma must be finite and >= 0");
    const EvalContext ctx = load_context(o.exp, "denoise", !o.cold_only);
    const Shape4 img = ctx.inputs.front().shape();

    LcaConfig cold_cfg = o.exp.solver;
    cold_cfg.threshold = detail::with_lambda(cold_cfg.threshold, o.lambda);
    cold_cfg.n_iters = o.cold_iters;
    LcaConfig warm_cfg = cold_cfg;
    warm_cfg.n_iters = o.warm_iters;
    const LcaSolver cold_solver(ctx.dict, cold_cfg, img.h, img.w);
    const LcaSolver warm_solver(ctx.dict, warm_cfg, img.h, img.w);
    Tracking off;
    off.enabled = false;

    std::ostringstream csv;
    csv << "sigma,method,iters,mse,psnr,ssim,l0,noisy_psnr\n";
    json rows = json::array();
    for (std::size_t k = 0; k < o.exp.sigmas.size(); ++k) {
        const double sigma = o.exp.sigmas[k];
        const std::size_t n = ctx.size();
        std::vector<MetricsRecord> cold(n), warm(o.cold_only ? 0 : n);
        std::vector<double> noisy_psnr(n);
        std::vector<Tensor4> noisy(n), cold_px(n), warm_px(o.cold_only ? 0 : n);
        detail::parallel_for(n, [&](std::size_t i) {
            noisy[i] = add_noise(ctx.pixels[i], sigma, o.exp.seed, k, i);
            noisy_psnr[i] = psnr(noisy[i], ctx.pixels[i], 1.0);
            const Tensor4 x = ctx.normalization().apply(noisy[i]);
            Tracking measure;
            measure.normalization = ctx.normalization();
            measure.reference = ctx.pixels[i];
            const LcaResult c = cold_solver.solve(x, std::nullopt, off);
            cold[i] = cold_solver.measure(x, c.state, measure);
            cold_px[i] = reconstruction_pixels(ctx, c.state.a, img);
            if (!o.cold_only) {
                const LcaResult w = warm_solver.solve(x, warm_start(*ctx.model, x, warm_cfg.lambda()), off);
                warm[i] = warm_solver.measure(x, w.state, measure);
                warm_px[i] = reconstruction_pixels(ctx, w.state.a, img);
            }
        });
        double mean_noisy = 0.0;
        for (double p : noisy_psnr) mean_noisy += p / static_cast<double>(n);
        auto emit = [&](const std::string& method, const std::vector<MetricsRecord>& finals) {
            const MeanRecord m = mean_final(finals);
            csv << detail::num(sigma) << ',' << method << ',' << m.iter << ',' << detail::num(m.mse) << ','
                << detail::num(m.psnr) << ',' << detail::num(m.ssim) << ',' << detail::num(m.l0) << ','
                << detail::num(mean_noisy) << '\n';
            json r = m;
            r["sigma"] = sigma;
            r["method"] = method;
            r["noisy_psnr"] = mean_noisy;
            rows.push_back(r);
        };
        emit("lca", cold);
        if (!o.cold_only) emit("warp_lca", warm);

        for (std::size_t i = 0; i < std::min(o.recon_images, n); ++i) {
            std::vector<Tensor4> tiles{ctx.pixels[i], noisy[i], cold_px[i]};
            if (!o.cold_only) tiles.push_back(warm_px[i]);
            save_image(o.exp.out / ("denoise_s" + std::to_string(k) + "_" + std::to_string(i) + ".png"),
                       tile_horizontally(tiles));
        }
    }
    write_file_atomic(o.exp.out / "denoise.csv", csv.str());
    json summary{{"command", "denoise"}, {"images", ctx.size()}, {"lambda", o.lambda}, {"sigmas", o.exp.sigmas},
                 {"rows", rows},         {"warnings", ctx.warnings}};
    write_json(o.exp.out / "denoise_summary.json", summary);
    return summary;
}

// ---------------------------------------------------------------- activation-map

struct ActivationMapOptions {
    ExperimentConfig exp;
    std::size_t warm_iters = 10;
    std::size_t cold_iters = 300;
    std::size_t count = 4; // images rendered
};

inline json activation_map(const ActivationMapOptions& o) {
    ExperimentConfig exp = o.exp;
    if (o.count == 0) throw ConfigError("activation-map: count must be >= 1");
    if (exp.max_images == 0 || exp.max_images > o.count) exp.max_images = o.count;
    const EvalContext ctx = load_context(exp, "activation-map", true);
    const Shape4 img = ctx.inputs.front().shape();
    LcaConfig warm_cfg = exp.solver, cold_cfg = exp.solver;
    warm_cfg.n_iters = o.warm_iters;
    cold_cfg.n_iters = o.cold_iters;
    const LcaSolver warm_solver(ctx.dict, warm_cfg, img.h, img.w);
    const LcaSolver cold_solver(ctx.dict, cold_cfg, img.h, img.w);
    Tracking measure;
    measure.normalization = ctx.normalization();

    std::ostringstream csv;
    csv << "image,name,method,iters,l0,psnr\n";
    json images = json::array();
    for (std::size_t i = 0; i < ctx.size(); ++i) {
        const Tensor4& x = ctx.inputs[i];
        LcaResult warm = warm_solver.solve(x, warm_start(*ctx.model, x, warm_cfg.lambda()), measure);
        LcaResult cold = cold_solver.solve(x, std::nullopt, measure);
        const std::vector<Tensor4> codes{warm.state.a, cold.state.a};
        const std::vector<Tensor4> maps = accumulated_activation_maps(codes);
        const std::string stem = "activation_" + std::to_string(i);
        const std::vector<Tensor4> recon{ctx.pixels[i], reconstruction_pixels(ctx, warm.state.a, img),
                                         reconstruction_pixels(ctx, cold.state.a, img)};
        save_image(o.exp.out / (stem + "_recon.png"), tile_horizontally(recon));
        save_image(o.exp.out / (stem + "_maps.png"), tile_horizontally(maps));
        write_tensors(o.exp.out / (stem + "_maps.wtns"), maps);
        const auto& wf = warm.trajectory.back();
        const auto& cf = cold.trajectory.back();
        csv << i << ',' << ctx.names[i] << ",warp_lca," << o.warm_iters << ',' << wf.l0 << ',' << detail::num(wf.psnr)
            << '\n';
        csv << i << ',' << ctx.names[i] << ",lca," << o.cold_iters << ',' << cf.l0 << ',' << detail::num(cf.psnr) << '\n';
        images.push_back({{"name", ctx.names[i]},
                          {"warp_lca", {{"iters", o.warm_iters}, {"l0", wf.l0}, {"psnr", wf.psnr}}},
                          {"lca", {{"iters", o.cold_iters}, {"l0", cf.l0}, {"psnr", cf.psnr}}}});
    }
    write_file_atomic(o.exp.out / "activation_map.csv", csv.str());
    json summary{{"command", "activation-map"}, {"images", images}, {"warnings", ctx.warnings}};
    write_json(o.exp.out / "activation_map_summary.json", summary);
    return summary;
}

// ---------------------------------------------------------------- step-sweep

struct StepSweepOptions {
    ExperimentConfig exp; // exp.solver.tau is the reference step for the oracle warm start
    std::vector<double> taus;
    WarmMode warm = WarmMode::Predictor;
};

struct SweepOutcome {
    bool finished = true;
    std::size_t diverged_at = 0;
    std::vector<MeanRecord> trajectory;
};

inline SweepOutcome sweep_run(const EvalContext& ctx, const LcaConfig& cfg, const std::vector<Tensor4>& inits) {
    SweepOutcome out;
    try {
        out.trajectory = mean_trajectory(solve_all(ctx, cfg, inits));
    } catch (const DivergenceError& e) {
        out.finished = false;
        out.diverged_at = e.iteration();
    }
    return out;
}

inline json step_sweep(const StepSweepOptions& o) {
    if (o.taus.empty()) throw ConfigError("step-sweep: the tau list is empty (--taus)");
    for (double t : o.taus)
        if (!(t > 0.0)) throw ConfigError("step-sweep: every tau must be > 0");
    const EvalContext ctx = load_context(o.exp, "step-sweep", o.warm == WarmMode::Predictor);
    std::vector<Tensor4> inits;
    if (o.warm == WarmMode::Oracle) inits = final_states(solve_all(ctx, o.exp.solver));
    if (o.warm == WarmMode::Predictor) inits = predicted_inits(ctx, o.exp.solver.lambda());
    const std::string label = warm_label(o.warm);

    std::ostringstream csv;
    csv << "tau,method,status,diverged_at,iters,mse,psnr,ssim,l0,energy\n";
    json rows = json::array();
    auto emit = [&](double tau, const std::string& method, const SweepOutcome& r) {
        json row{{"tau", tau}, {"method", method}, {"finished", r.finished}};
        csv << detail::num(tau) << ',' << method << ',' << (r.finished ? "finished" : "diverged") << ',';
        if (r.finished) {
            const MeanRecord& f = r.trajectory.back();
            csv << ',' << f.iter << ',' << detail::num(f.mse) << ',' << detail::num(f.psnr) << ',' << detail::num(f.ssim)
                << ',' << detail::num(f.l0) << ',' << detail::num(f.energy) << '\n';
            row["final"] = f;
        } else {
            csv << r.diverged_at << ",,,,,,\n";
            row["diverged_at"] = r.diverged_at;
        }
        rows.push_back(row);
    };
    for (std::size_t k = 0; k < o.taus.size(); ++k) {
        LcaConfig cfg = o.exp.solver;
        cfg.tau = o.taus[k];
        const SweepOutcome cold = sweep_run(ctx, cfg, {});
        emit(cfg.tau, "lca", cold);
        SweepOutcome warm;
        if (o.warm != WarmMode::None) {
            warm = sweep_run(ctx, cfg, inits);
            emit(cfg.tau, label, warm);
        }
        if (cold.finished) {
            const std::vector<MeanRecord> w = warm.finished ? warm.trajectory : std::vector<MeanRecord>{};
            write_file_atomic(o.exp.out / ("step_sweep_trajectory_" + std::to_string(k) + ".csv"),
                              trajectory_csv(cold.trajectory, w, label));
        }
    }
    write_file_atomic(o.exp.out / "step_sweep.csv", csv.str());
    json summary{{"command", "step-sweep"}, {"images", ctx.size()},   {"reference_tau", o.exp.solver.tau},
                 {"warm", to_string(o.warm)}, {"taus", o.taus}, {"rows", rows},
                 {"warnings", ctx.warnings}};
    write_json(o.exp.out / "step_sweep_summary.json", summary);
    return summary;
}

} // namespace pipeline
} // namespace warp_lca
