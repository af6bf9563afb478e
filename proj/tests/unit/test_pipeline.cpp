#include <gtest/gtest.h>

#include <fstream>

#include "ira/pipeline.hpp"
#include "support.hpp"

using namespace ira;

namespace {

PipelineConfig e2e_config(const fs::path& out, ConfigOverrides o = {}) {
    o.output_dir = out;
    return load_config(test::fixture("e2e/config.json"), o);
}

Pipeline make_pipeline(const fs::path& out, ConfigOverrides o = {}) { return Pipeline(e2e_config(out, o), GatewayOptions{}); }

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::Io;
}

}  // namespace

TEST(Config, LoadsFixtureAndAppliesOverrides) {
    test::TempDir dir;
    const auto c = e2e_config(dir.path());
    EXPECT_EQ(c.k, 3u);
    EXPECT_EQ(c.effective_shots(), 2u);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.endpoint("reasoning").base_url, c.endpoint("completion").base_url);
    EXPECT_TRUE(c.dataset.path.is_absolute());
    EXPECT_EQ(c.endpoint("embed_text").dim, 16u);

    ConfigOverrides o;
    o.k = 5;
    o.seed = 11;
    o.stub = true;
    o.variant = Variant::Prophet;
    const auto d = e2e_config(dir.path(), o);
    EXPECT_EQ(d.k, 5u);
    EXPECT_EQ(d.endpoint("vqa").base_url, "stub:11");
    EXPECT_EQ(d.variant, Variant::Prophet);

    PipelineConfig defaults;
    EXPECT_EQ(defaults.effective_shots(), 16u);
    defaults.variant = Variant::Prophet;
    EXPECT_EQ(defaults.effective_shots(), 20u);
}

TEST(Config, InvalidConfigsRejected) {
    test::TempDir dir;
    auto write = [&](const std::string& text) {
        std::ofstream(dir / "c.json") << text;
        return dir / "c.json";
    };
    EXPECT_EQ(code_of([&] { (void)load_config(write("{not json")); }), ErrorCode::ConfigInvalid);
    EXPECT_EQ(code_of([&] { (void)load_config(dir / "missing.json"); }), ErrorCode::ConfigInvalid);

    json j = parse_json_file(test::fixture("e2e/config.json"));
    j["dataset"]["path"] = (test::fixture("e2e") / "data").string();
    j["dataset"]["image_root"] = (test::fixture("e2e") / "images").string();
    j["endpoints"]["vqa"]["fixture"] = (test::fixture("e2e") / "stub_fixtures.json").string();
    for (auto& [name, ep] : j["endpoints"].items()) {
        if (ep.contains("fixture")) ep["fixture"] = (test::fixture("e2e") / "stub_fixtures.json").string();
    }
    EXPECT_NO_THROW((void)load_config(write(j.dump())));

    for (const auto& [field, value] : std::vector<std::pair<json::json_pointer, json>>{
             {json::json_pointer("/k"), 0},
             {json::json_pointer("/ensemble"), 0},
             {json::json_pointer("/variant"), "llava"},
             {json::json_pointer("/dataset/path"), "/nonexistent"},
             {json::json_pointer("/endpoints/vqa/timeout"), -1},
             {json::json_pointer("/endpoints/vqa/base_url"), "stub:x"}}) {
        json bad = j;
        bad[field] = value;
        EXPECT_EQ(code_of([&] { (void)load_config(write(bad.dump())); }), ErrorCode::ConfigInvalid) << field.to_string();
    }
    json no_vqa = j;
    no_vqa["endpoints"].erase("vqa");
    EXPECT_EQ(code_of([&] { (void)load_config(write(no_vqa.dump())); }), ErrorCode::ConfigInvalid);
}

TEST(Stages, ParseNames) {
    for (auto s : kStageOrder) EXPECT_EQ(parse_stage(to_string(s)), s);
    EXPECT_EQ(parse_stage("all"), Stage::All);
    EXPECT_THROW((void)parse_stage("train"), Error);
}

TEST(Pipeline, EndToEndIsDeterministicAndIncremental) {
    test::TempDir a, b;
    auto pa = make_pipeline(a.path());
    const auto reports = pa.run(Stage::All);
    ASSERT_EQ(reports.size(), kStageOrder.size());
    for (const auto& r : reports) {
        EXPECT_FALSE(r.up_to_date) << to_string(r.stage);
        EXPECT_EQ(r.failures, 0u) << to_string(r.stage);
    }
    make_pipeline(b.path()).run(Stage::All);
    const auto digest = test::tree_digest(a.path());
    EXPECT_EQ(digest, test::tree_digest(b.path()));
    for (auto name : {"captions.jsonl", "inquiry.jsonl", "summaries.jsonl", "supervision.jsonl", "selected.jsonl",
                      "predictions.jsonl", "report.json", "filters/filter_s.json", "manifests/evaluate.json"}) {
        EXPECT_TRUE(digest.count(name)) << name;
    }
    EXPECT_FALSE(digest.count(".ira.lock"));

    for (const auto& r : make_pipeline(a.path()).run(Stage::All)) EXPECT_TRUE(r.up_to_date) << to_string(r.stage);
    EXPECT_EQ(test::tree_digest(a.path()), digest);

    const json report = parse_json_file(a / "report.json");
    EXPECT_EQ(report.at("evaluated"), 2);
    EXPECT_DOUBLE_EQ(report.at("overall_accuracy").get<double>(), 1.0);
}

TEST(Pipeline, ChangedSettingReRunsDownstreamOnly) {
    test::TempDir dir;
    make_pipeline(dir.path()).run(Stage::All);
    ConfigOverrides o;
    o.shots = 1;
    const auto reports = make_pipeline(dir.path(), o).run(Stage::All);
    for (const auto& r : reports) {
        const bool expect_rerun = r.stage != Stage::Caption && r.stage != Stage::Inquire && r.stage != Stage::Summarize;
        EXPECT_EQ(r.up_to_date, !expect_rerun) << to_string(r.stage);
    }
}

TEST(Pipeline, ResumesPartialArtifact) {
    test::TempDir dir;
    make_pipeline(dir.path()).run(Stage::Caption);
    const auto full = read_file(dir / "captions.jsonl");
    auto lines = split(full, "\n");
    std::string partial = lines[0] + "\n" + lines[1] + "\n";
    write_file_atomic(dir / "captions.jsonl", partial);
    const auto r = make_pipeline(dir.path()).run_stage(Stage::Caption);
    EXPECT_EQ(r.details.at("resumed_from"), 1);
    EXPECT_EQ(r.instances_processed, 4u);
    EXPECT_EQ(read_file(dir / "captions.jsonl"), full);
}

TEST(Pipeline, MissingUpstreamArtifact) {
    test::TempDir dir;
    auto p = make_pipeline(dir.path());
    for (auto s : {Stage::Caption, Stage::Inquire, Stage::Summarize, Stage::Supervise, Stage::TrainFilter}) p.run_stage(s);
    try {
        p.run_stage(Stage::Answer);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingArtifact);
        EXPECT_EQ(e.detail(), "select");
    }
    test::TempDir fresh;
    EXPECT_EQ(code_of([&] { make_pipeline(fresh.path()).run_stage(Stage::Evaluate); }), ErrorCode::MissingArtifact);
}

TEST(Pipeline, OutputDirectoryLock) {
    test::TempDir dir;
    DirectoryLock held(dir.path());
    EXPECT_EQ(code_of([&] { make_pipeline(dir.path()).run(Stage::Caption); }), ErrorCode::Io);
    EXPECT_THROW(DirectoryLock again(dir.path()), Error);
}

TEST(Pipeline, ProbeModesRespectBestBound) {
    test::TempDir dir;
    auto p = make_pipeline(dir.path());
    p.run(Stage::All);
    std::map<std::string, std::map<std::string, double>> acc;
    for (auto mode : {ProbeMode::Original, ProbeMode::All, ProbeMode::Random, ProbeMode::Best}) {
        const auto report = p.probe_qa_modes(mode);
        EXPECT_TRUE(fs::exists(dir / ("probe_" + std::string(to_string(mode)) + ".json")));
        EXPECT_EQ(report.at("evaluated"), 2);
        for (const auto& q : report.at("per_question")) {
            acc[std::string(to_string(mode))][q.at("question_id")] = q.at("accuracy").get<double>();
        }
    }
    for (const auto& [qid, best] : acc["best"]) {
        for (auto mode : {"original", "all", "random"}) EXPECT_GE(best, acc[mode].at(qid)) << mode << " " << qid;
    }
    EXPECT_EQ(p.probe_qa_modes(ProbeMode::Random), parse_json_file(dir / "probe_random.json"));
}
