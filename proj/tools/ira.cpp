// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver for the pipeline stages.
//
//   ira <stage> --config <path> [overrides]
//   ira probe --mode original|all|random|best --config <path>
//
// Exit status: 0 success, 2 configuration error, 3 stage failure.

#include <CLI11.hpp>
#include <iostream>

#include "ira/ira.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Inquire, refine, answer: knowledge-based VQA pipeline"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::size_t> k, shots, ensemble;
    std::optional<std::string> variant, filter_mode, output_dir;
    std::optional<std::uint64_t> seed;
    bool stub = false;
    std::string probe_mode = "original";

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "pipeline configuration (JSON)")->required();
        sub->add_option("--k", k, "sub-questions per instance");
        sub->add_option("--shots", shots, "in-context examples per answer prompt");
        sub->add_option("--ensemble", ensemble, "prompt ensemble size T");
        sub->add_option("--variant", variant, "pica | promptcap | prophet");
        sub->add_option("--filter-mode", filter_mode, "q | a | qa | s | ensemble");
        sub->add_option("--seed", seed, "run seed");
        sub->add_option("--output-dir", output_dir, "artifact directory");
        sub->add_flag("--stub", stub, "use the offline deterministic backend for every endpoint");
    };

    std::vector<std::pair<CLI::App*, std::string>> stage_cmds;
    for (auto st : ira::kStageOrder) {
        std::string name(ira::to_string(st));
        stage_cmds.emplace_back(app.add_subcommand(name, "run the " + name + " stage"), name);
    }
    stage_cmds.emplace_back(app.add_subcommand("all", "run every stage in order"), "all");
    for (auto& [cmd, name] : stage_cmds) add_common(cmd);
    CLI::App* probe = app.add_subcommand("probe", "answer with fixed QA-pair context policies");
    add_common(probe);
    probe->add_option("--mode", probe_mode, "original | all | random | best");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    ira::PipelineConfig config;
    std::optional<ira::ProbeMode> probe_choice;
    try {
        ira::ConfigOverrides ov;
        ov.k = k;
        ov.shots = shots;
        ov.ensemble = ensemble;
        if (variant) ov.variant = ira::parse_variant(*variant);
        if (filter_mode) ov.filter_mode = ira::parse_filter_mode(*filter_mode);
        ov.seed = seed;
        if (output_dir) ov.output_dir = ira::fs::absolute(*output_dir);
        ov.stub = stub;
        config = ira::load_config(config_path, ov);
        if (probe->parsed()) probe_choice = ira::parse_probe_mode(probe_mode);
    } catch (const ira::Error& e) {
        std::cerr << "ira: configuration error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        auto gw = ira::GatewayOptions::from_env();
        gw.transport_factory = ira::http_transport_factory();
        ira::Pipeline pipeline(config, std::move(gw));

        if (probe_choice) {
            auto report = pipeline.probe_qa_modes(*probe_choice);
            report.erase("per_question");
            std::cout << report.dump() << "\n";
            return 0;
        }

        ira::Stage stage = ira::Stage::All;
        for (auto& [cmd, name] : stage_cmds) {
            if (cmd->parsed()) stage = ira::parse_stage(name);
        }
        bool all_failed = false;
        for (const auto& r : pipeline.run(stage)) {
            std::cout << r.to_json().dump() << "\n";
            if (!r.up_to_date && r.instances_processed == 0 && r.failures > 0) all_failed = true;
        }
        return all_failed ? kExitStage : 0;
    } catch (const ira::Error& e) {
        std::cerr << "ira: " << e.what() << "\n";
        return e.code() == ira::ErrorCode::ConfigInvalid ? kExitConfig : kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "ira: " << e.what() << "\n";
        return kExitStage;
    }
}
