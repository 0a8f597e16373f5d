#include <CLI11.hpp>
#include <iostream>

#include "jemb/cli.hpp"
#include "jemb/error.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Joint appearance/structure embeddings from paired RGB and depth images"};
    app.set_version_flag("--version", jemb::kToolVersion);
    app.require_subcommand(1);

    jemb::GenerateOptions gen;
    auto* generate = app.add_subcommand("generate", "Write a synthetic paired RGB/depth dataset (MMD1)");
    generate->add_option("--out", gen.out, "Dataset file")->required();
    generate->add_option("--n", gen.n, "Sample count")->capture_default_str();
    generate->add_option("--palettes", gen.palettes, "Appearance classes")->capture_default_str()->check(CLI::PositiveNumber);
    generate->add_option("--layouts", gen.layouts, "Structure classes")->capture_default_str()->check(CLI::PositiveNumber);
    generate->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
    generate->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

    jemb::TrainOptions tr;
    std::string mode;
    auto* train = app.add_subcommand("train", "Train a model; writes model.ckpt, history.csv and manifest.json");
    train->add_option("--data", tr.data, "Dataset file (optional with --manifest)");
    auto* config_opt = train->add_option("--config", tr.config, "JSON config")->check(CLI::ExistingFile);
    train->add_option("--manifest", tr.manifest, "Rerun from an earlier manifest.json")
        ->check(CLI::ExistingFile)
        ->excludes(config_opt);
    train->add_option("--mode", mode, "joint | baseline | ablate-contrastive")
        ->check(CLI::IsMember({"joint", "baseline", "ablate-contrastive"}));
    train->add_option("--out", tr.out, "Output directory (optional with --manifest)");
    train->callback([&] {
        if (tr.data.empty() && tr.manifest.empty()) throw CLI::RequiredError("--data");
        if (tr.out.empty() && tr.manifest.empty()) throw CLI::RequiredError("--out");
    });

    jemb::EvalOptions ev;
    auto* eval = app.add_subcommand("eval", "Metrics, PCA tables and scatter plots on the validation split");
    eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--data", ev.data, "Dataset the model was trained on")->required()->check(CLI::ExistingFile);
    eval->add_option("--out", ev.out, "Output directory")->required();

    jemb::ModifyOptions mod;
    auto* modify = app.add_subcommand("modify", "Give source-class images the target class's mean appearance");
    modify->add_option("--ckpt", mod.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    modify->add_option("--data", mod.data, "Dataset the model was trained on")->required()->check(CLI::ExistingFile);
    modify->add_option("--source-class", mod.source_class, "Appearance class to edit")->required();
    modify->add_option("--target-class", mod.target_class, "Appearance class to copy")->required();
    modify->add_option("--out", mod.out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*generate) jemb::cmd_generate(gen, std::cout);
        if (*train) {
            if (!mode.empty()) tr.mode = jemb::parse_train_mode(mode);
            jemb::cmd_train(tr, std::cout);
        }
        if (*eval) jemb::cmd_eval(ev, std::cout);
        if (*modify) jemb::cmd_modify(mod, std::cout);
    } catch (const jemb::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
