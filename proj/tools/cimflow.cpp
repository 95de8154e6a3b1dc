#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "cim/integer_model.hpp"
#include "cim/mapper.hpp"
#include "cim/pipeline.hpp"
#include "cim/runner.hpp"
#include "cim/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cim;

namespace {

struct Ctx {
    std::string config_path;
    std::string out = ".";
    uint64_t seed = 0;
    double scale = 1.0;
    bool power_of_two = false;

    PipelineConfig cfg;
    std::string config_text;

    std::string path(const std::string& name) const { return out + "/" + name; }

    void load() {
        std::ifstream f(config_path);
        if (!f) throw std::runtime_error("cannot open config: " + config_path);
        std::stringstream ss;
        ss << f.rdbuf();
        config_text = ss.str();
        cfg = load_pipeline_config(config_path);
        cfg.macro.validate();
        scale_epochs(cfg, scale);
        fs::create_directories(out);
    }

    void manifest(const std::string& stage) const {
        std::ofstream f(path(stage + "_manifest.json"));
        f << run_manifest(stage, config_text, seed, scale).dump(2) << "\n";
    }
};

void write_json(const std::string& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << j.dump(2) << "\n";
}

ModelGraph load_stage_checkpoint(const Ctx& ctx, const std::string& file,
                                 const std::string& prior_stage) {
    const std::string p = ctx.path(file);
    if (!fs::exists(p))
        throw std::runtime_error("missing checkpoint " + p + "; run " + prior_stage + " first");
    return load_checkpoint(p);
}

void run_train_seed(Ctx& ctx) {
    ModelGraph m = build_baseline(ctx.cfg);
    std::mt19937_64 rng(ctx.seed);
    init_params(m, rng);
    set_stage_trainability(m, Stage::Seed);
    const Dataset train_d = make_train_dataset(ctx.cfg, ctx.seed);
    const Dataset test_d = make_test_dataset(ctx.cfg, ctx.seed);
    TrainConfig tc;
    tc.epochs = ctx.cfg.seed_epochs;
    tc.batch = ctx.cfg.batch;
    tc.lr = ctx.cfg.seed_lr;
    tc.augment = ctx.cfg.augment;
    const double loss = train(m, train_d, tc, ForwardMode::FloatTrain, rng);
    const double acc = evaluate(m, test_d, ForwardMode::FloatEval);
    save_checkpoint(m, ctx.path("seed.ckpt"));
    write_json(ctx.path("seed_summary.json"),
               {{"stage", "seed"}, {"loss", loss}, {"accuracy", acc},
                {"epochs", ctx.cfg.seed_epochs}, {"params", param_count(m)}});
    ctx.manifest("train-seed");
    std::cout << "seed: accuracy " << acc << "%\n";
}

void run_morph(Ctx& ctx) {
    ModelGraph m = load_stage_checkpoint(ctx, "seed.ckpt", "train-seed");
    const Dataset train_d = make_train_dataset(ctx.cfg, ctx.seed);
    const Dataset test_d = make_test_dataset(ctx.cfg, ctx.seed);
    MorphConfig mc = ctx.cfg.morph;
    if (mc.target_bl <= 0)
        mc.target_bl = std::llround(ctx.cfg.target_frac *
                                    double(used_bitlines(m, ctx.cfg.macro)));
    std::mt19937_64 rng(ctx.seed);
    MorphReport rep;
    ModelGraph morphed = morph_iterate(
        m, mc, train_d, test_d, ctx.cfg.macro, rng, &rep,
        [&](int it, const ModelGraph& snap) {
            save_checkpoint(snap, ctx.path("morph_iter" + std::to_string(it) + ".ckpt"));
        });
    save_checkpoint(morphed, ctx.path("morph.ckpt"));
    json rj = rep.to_json();
    rj["target_bl"] = mc.target_bl;
    write_json(ctx.path("morph_report.json"), rj);
    const double acc =
        rep.iterations.empty() ? evaluate(morphed, test_d, ForwardMode::FloatEval)
                               : rep.iterations.back().accuracy;
    write_json(ctx.path("morph_summary.json"),
               {{"stage", "morph"}, {"accuracy", acc}, {"target_bl", mc.target_bl},
                {"params", param_count(morphed)}});
    ctx.manifest("morph");
    std::cout << "morph: accuracy " << acc << "%, target_bl " << mc.target_bl << "\n";
}

void run_phase1(Ctx& ctx) {
    ModelGraph m = load_stage_checkpoint(ctx, "morph.ckpt", "morph");
    const Dataset train_d = make_train_dataset(ctx.cfg, ctx.seed);
    const Dataset test_d = make_test_dataset(ctx.cfg, ctx.seed);
    std::mt19937_64 rng(ctx.seed);
    const double loss = phase1_train(m, train_d, ctx.cfg.qat, ctx.cfg.macro, rng);
    const double acc = evaluate(m, test_d, ForwardMode::Phase1Eval, &ctx.cfg.macro);
    save_checkpoint(m, ctx.path("phase1.ckpt"));
    write_json(ctx.path("phase1_summary.json"),
               {{"stage", "phase1"}, {"loss", loss}, {"accuracy", acc}});
    ctx.manifest("qat-phase1");
    std::cout << "phase1: accuracy " << acc << "%\n";
}

void run_phase2(Ctx& ctx) {
    ModelGraph m = load_stage_checkpoint(ctx, "phase1.ckpt", "qat-phase1");
    const Dataset train_d = make_train_dataset(ctx.cfg, ctx.seed);
    const Dataset test_d = make_test_dataset(ctx.cfg, ctx.seed);
    calibrate_adc_step(m, train_d, ctx.cfg.qat, ctx.cfg.macro);
    const double acc_start = evaluate(m, test_d, ForwardMode::Phase2Eval, &ctx.cfg.macro);
    std::mt19937_64 rng(ctx.seed);
    const double loss = phase2_train(m, train_d, ctx.cfg.qat, ctx.cfg.macro, rng);
    const double acc = evaluate(m, test_d, ForwardMode::Phase2Eval, &ctx.cfg.macro);
    save_checkpoint(m, ctx.path("phase2.ckpt"));
    const IntegerModel im = export_integer_model(m, ctx.cfg.macro, ctx.power_of_two);
    save_integer_model(im, ctx.path("int_model.bin"));
    json scale_errors = json::array();
    for (size_t i = 0; i < im.layers.size(); ++i)
        if (im.layers[i].kind == LayerKind::Conv)
            scale_errors.push_back({{"layer", i}, {"scale_error", im.layers[i].scale_error}});
    write_json(ctx.path("phase2_summary.json"),
               {{"stage", "phase2"}, {"loss", loss}, {"accuracy", acc},
                {"accuracy_at_start", acc_start}, {"power_of_two", ctx.power_of_two},
                {"scale_errors", scale_errors}});
    ctx.manifest("qat-phase2");
    std::cout << "phase2: accuracy " << acc_start << "% -> " << acc << "%\n";
}

void run_map(Ctx& ctx, const std::string& ckpt) {
    ModelGraph m =
        ckpt.empty() ? build_baseline(ctx.cfg) : load_checkpoint(ckpt);
    const MappingPlan plan = build_plan(m, ctx.cfg.macro);
    json j = plan_report(plan, ctx.cfg.macro);
    write_json(ctx.path("mapping.json"), j);
    render_mapping(plan, ctx.cfg.macro, ctx.path("mapping"));
    ctx.manifest("map");
    std::cout << j.dump(2) << "\n";
}

void run_simulate(Ctx& ctx, const std::string& model_path, const std::string& image_path) {
    std::string mp = model_path.empty() ? ctx.path("int_model.bin") : model_path;
    if (!fs::exists(mp))
        throw std::runtime_error("missing integer model " + mp + "; run qat-phase2 first");
    const IntegerModel im = load_integer_model(mp);
    Tensor x({1, im.input_channels, im.input_size, im.input_size});
    if (!image_path.empty()) {
        std::ifstream f(image_path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open image tensor: " + image_path);
        f.read(reinterpret_cast<char*>(x.v.data()),
               static_cast<std::streamsize>(x.v.size() * sizeof(double)));
        if (!f) throw std::runtime_error("image tensor too small: expected " +
                                         std::to_string(x.v.size()) + " doubles");
    } else {
        const Dataset test_d = make_test_dataset(ctx.cfg, ctx.seed);
        Batch b = make_batch(test_d, {0});
        x = b.x;
    }
    const SimResult r = simulate_inference(im, x);
    json lj = json::array();
    for (double v : r.logits.v) lj.push_back(v);
    write_json(ctx.path("sim_logits.json"), {{"logits", lj}});
    write_json(ctx.path("sim_trace.json"), r.trace.to_json());
    ctx.manifest("simulate");
    std::cout << "simulate: wrote logits and trace\n";
}

void run_report(Ctx& ctx) {
    ModelGraph base = build_baseline(ctx.cfg);
    const MappingPlan pb = build_plan(base, ctx.cfg.macro);
    ModelGraph adapted = load_stage_checkpoint(ctx, "morph.ckpt", "morph");
    const MappingPlan pa = build_plan(adapted, ctx.cfg.macro);

    json j;
    j["baseline"] = plan_report(pb, ctx.cfg.macro);
    j["baseline"]["Param"] = param_count(base);
    j["adapted"] = plan_report(pa, ctx.cfg.macro);
    j["adapted"]["Param"] = param_count(adapted);

    int64_t target_bl = pb.used_bls;
    if (fs::exists(ctx.path("morph_report.json"))) {
        std::ifstream f(ctx.path("morph_report.json"));
        json mr;
        f >> mr;
        target_bl = mr.value("target_bl", target_bl);
    }
    // raw fraction: a report on an over-budget model is still a report
    const double usage =
        double(occupied_cells(pa)) / (double(target_bl) * ctx.cfg.macro.wordlines);
    j["adapted"]["Macro Usage"] = usage;
    if (usage > 1.0) j["adapted"]["Over Budget"] = true;

    json delta;
    delta["Param"] = format_delta(double(param_count(base)), double(param_count(adapted)));
    delta["BLs"] = format_delta(double(pb.used_bls), double(pa.used_bls));
    delta["MACs"] = format_delta(double(pb.adc_activations), double(pa.adc_activations));
    delta["Load Weight Latency"] =
        format_delta(double(pb.load_weight_latency), double(pa.load_weight_latency));
    delta["Computing Latency"] =
        format_delta(double(pb.computing_latency), double(pa.computing_latency));
    if (pb.partial_sum_storage > 0)
        delta["Partial sum Storage"] =
            format_delta(double(pb.partial_sum_storage), double(pa.partial_sum_storage));
    j["delta"] = delta;

    json acc;
    for (const char* s : {"seed", "morph", "phase1", "phase2"}) {
        const std::string p = ctx.path(std::string(s) + "_summary.json");
        if (fs::exists(p)) {
            std::ifstream f(p);
            json sj;
            f >> sj;
            acc[s] = sj.value("accuracy", 0.0);
        }
    }
    j["accuracy"] = acc;
    write_json(ctx.path("report.json"), j);
    ctx.manifest("report");
    std::cout << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CIM model adaptation toolkit"};
    app.require_subcommand(1);

    Ctx ctx;
    app.add_option("--config", ctx.config_path, "JSON config file")->required();
    app.add_option("--seed", ctx.seed, "RNG seed")->required();
    app.add_option("--out", ctx.out, "output directory");
    app.add_option("--scale", ctx.scale, "epoch scale factor for short runs");
    app.add_flag("--power-of-two", ctx.power_of_two, "round export scales to powers of two");

    std::string map_ckpt, sim_model, sim_image;
    auto* c_seed = app.add_subcommand("train-seed", "train the float seed model");
    auto* c_morph = app.add_subcommand("morph", "CIM-aware shrink/expand morphing");
    auto* c_p1 = app.add_subcommand("qat-phase1", "weight quantization training");
    auto* c_p2 = app.add_subcommand("qat-phase2", "partial-sum quantization training + export");
    auto* c_map = app.add_subcommand("map", "map a model onto the macro and report");
    c_map->add_option("--ckpt", map_ckpt, "checkpoint to map (default: baseline from config)");
    auto* c_sim = app.add_subcommand("simulate", "bit-exact integer inference");
    c_sim->add_option("--model", sim_model, "integer model file");
    c_sim->add_option("--image", sim_image, "raw little-endian double tensor [C,H,W]");
    auto* c_rep = app.add_subcommand("report", "baseline-vs-adapted comparison table");
    auto* c_pipe = app.add_subcommand("pipeline", "run every stage in order");

    CLI11_PARSE(app, argc, argv);

    try {
        ctx.load();
        if (c_seed->parsed()) run_train_seed(ctx);
        if (c_morph->parsed()) run_morph(ctx);
        if (c_p1->parsed()) run_phase1(ctx);
        if (c_p2->parsed()) run_phase2(ctx);
        if (c_map->parsed()) run_map(ctx, map_ckpt);
        if (c_sim->parsed()) run_simulate(ctx, sim_model, sim_image);
        if (c_rep->parsed()) run_report(ctx);
        if (c_pipe->parsed()) {
            run_train_seed(ctx);
            run_morph(ctx);
            run_phase1(ctx);
            run_phase2(ctx);
            run_map(ctx, ctx.path("morph.ckpt"));
            run_simulate(ctx, "", "");
            run_report(ctx);
        }
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
