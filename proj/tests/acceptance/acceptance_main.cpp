// Acceptance checks for the ira library and CLI. Prints one PASS/FAIL line
// per criterion and exits non-zero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <bit>
#include <functional>
#include <iostream>
#include <sstream>

#include "ira/ira.hpp"
#include "support.hpp"
#include "template_cases.hpp"

using namespace ira;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kFiniteDiffStep = 1e-6;
constexpr double kMinHeldOutAuc = 0.95;
constexpr std::size_t kLearnDim = 64;
constexpr std::size_t kLearnTrain = 2000;
constexpr std::size_t kLearnHeldOut = 1000;
constexpr int kLearnSeeds = 5;

struct Verdict {
    bool pass = true;
    std::string detail;

    void check(bool ok, const std::string& what) {
        if (!ok && pass) detail = what;
        pass = pass && ok;
    }
};

struct Criterion {
    std::string name;
    double budget_s;
    std::function<Verdict()> run;
};

// -- 1. soft accuracy ------------------------------------------------------

/// Enumerates the 10 nine-annotator subsets directly; answers come from an
/// alphabet that is already in normal form, so plain equality is the match.
double subset_enumeration(const std::string& pred, const std::vector<std::string>& golds) {
    int thirds = 0;
    for (std::size_t mask = 0; mask < (1u << golds.size()); ++mask) {
        if (std::popcount(mask) != static_cast<int>(golds.size()) - 1) continue;
        int hits = 0;
        for (std::size_t i = 0; i < golds.size(); ++i) {
            if ((mask >> i) & 1u) hits += golds[i] == pred ? 1 : 0;
        }
        thirds += std::min(hits, 3);
    }
    return thirds / (3.0 * static_cast<double>(golds.size()));
}

Verdict soft_accuracy_oracle() {
    Verdict o;
    Rng rng(20240917);
    const std::vector<std::string> alphabet = {"ski", "snow", "water", "ice", "cross country", "2"};
    for (int c = 0; c < 1000; ++c) {
        std::vector<std::string> golds;
        const std::size_t used = 1 + rng.below(alphabet.size());
        for (int i = 0; i < 10; ++i) golds.push_back(alphabet[rng.below(used)]);
        const auto& pred = alphabet[rng.below(alphabet.size())];
        const double got = soft_accuracy(pred, golds);
        const double want = subset_enumeration(pred, golds);
        o.check(got == want, "case " + std::to_string(c) + ": " + std::to_string(got) + " vs " + std::to_string(want));
    }
    std::vector<std::string> one = {"ham"};
    one.resize(10, "turkey");
    o.check(soft_accuracy("ham", one) == 0.3, "1-of-10 case is not 0.3");
    return o;
}

// -- 2. templates ----------------------------------------------------------

Verdict templates_exact() {
    Verdict o;
    const auto cases = test::template_cases();
    o.check(cases.size() == 5, "expected 5 template cases");
    for (const auto& c : cases) {
        if (c.rendered == c.expected) continue;
        std::size_t at = 0;
        while (at < c.rendered.size() && at < c.expected.size() && c.rendered[at] == c.expected[at]) ++at;
        o.check(false, c.name + " differs at byte " + std::to_string(at));
    }
    return o;
}

// -- 3. gradient check -----------------------------------------------------

Verdict gradient_check() {
    Verdict o;
    double worst = 0.0;
    for (std::size_t d : {4, 8}) {
        for (int label : {0, 1}) {
            Rng rng(7 * d + label);
            auto model = FilterModel::initialize(d, FilterInputMode::Summary, 1000 + d + label);
            std::vector<double> x(2 * d);
            for (auto& v : x) v = rng.uniform(-1.0, 1.0);
            std::vector<double> grad(model.parameter_count(), 0.0);
            (void)model.accumulate_gradient(x, label, grad);
            const auto params = model.parameters();
            auto loss_at = [&](const std::vector<double>& p) {
                FilterModel m = model;
                m.set_parameters(p);
                const double prob = 1.0 / (1.0 + std::exp(-m.logit(x)));
                return label == 1 ? -std::log(prob) : -std::log(1.0 - prob);
            };
            for (std::size_t k = 0; k < params.size(); ++k) {
                auto up = params;
                auto down = params;
                up[k] += kFiniteDiffStep;
                down[k] -= kFiniteDiffStep;
                const double numeric = (loss_at(up) - loss_at(down)) / (2 * kFiniteDiffStep);
                const double denom = std::max(1e-8, std::abs(numeric) + std::abs(grad[k]));
                worst = std::max(worst, std::abs(numeric - grad[k]) / denom);
            }
        }
    }
    std::ostringstream s;
    s << "max relative error " << worst;
    o.check(worst < kGradRelTol, s.str());
    if (o.pass) o.detail = s.str();
    return o;
}

// -- 4. learnability -------------------------------------------------------

/// Fraction of (positive, negative) pairs ranked correctly; ties count half.
double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double good = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            total += 1.0;
            good += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
        }
    }
    return good / total;
}

std::vector<FusedSample> separable_set(Rng& rng, std::size_t n) {
    std::vector<FusedSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        FusedSample s;
        s.fused.resize(2 * kLearnDim);
        for (auto& v : s.fused) v = rng.uniform(-1.0, 1.0);
        s.label = s.fused[0] > 0.0 ? 1 : 0;
        out.push_back(std::move(s));
    }
    return out;
}

Verdict learnability() {
    Verdict o;
    const FilterHyperparams defaults;
    double lowest = 1.0;
    for (int seed = 1; seed <= kLearnSeeds; ++seed) {
        Rng data(static_cast<std::uint64_t>(seed) * 7919);
        const auto train = separable_set(data, kLearnTrain);
        const auto held = separable_set(data, kLearnHeldOut);
        const auto r = train_filter(train, kLearnDim, FilterInputMode::Summary, defaults, static_cast<std::uint64_t>(seed));
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& s : held) {
            scores.push_back(r.model.score(s.fused));
            labels.push_back(s.label);
        }
        const double auc = pairwise_auc(scores, labels);
        lowest = std::min(lowest, auc);
        o.check(auc > kMinHeldOutAuc, "seed " + std::to_string(seed) + " held-out AUC " + std::to_string(auc));
        if (seed == 1) {
            const auto again = train_filter(train, kLearnDim, FilterInputMode::Summary, defaults, 1);
            o.check(again.model.to_json().dump() == r.model.to_json().dump(), "same seed gave different checkpoints");
        }
    }
    if (o.pass) o.detail = "min held-out AUC " + std::to_string(lowest);
    return o;
}

// -- 5. selection ----------------------------------------------------------

std::vector<double> unit(Rng& rng, std::size_t d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return normalized(std::move(v)).values;
}

Verdict selection_invariants() {
    Verdict o;
    Rng rng(77);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t d = 4 + rng.below(9);
        FilterSet filters = [&] {
            if (trial % 2) return FilterSet::single(FilterModel::initialize(d, FilterInputMode::Summary, rng.next()));
            std::vector<FilterModel> ms;
            for (auto m : kSingleModes) ms.push_back(FilterModel::initialize(d, m, rng.next()));
            return FilterSet::ensemble(std::move(ms));
        }();
        const auto q = unit(rng, d), v = unit(rng, d);
        o.check(select_information(filters, q, v, {}).selected.empty(), "empty input selected something");

        std::vector<SelectionCandidate> cands;
        const std::size_t n = rng.below(7);
        for (std::size_t i = 0; i < n; ++i) {
            SelectionCandidate c;
            c.summary = {"s" + std::to_string(i), i + 1, "q"};
            for (auto m : filters.input_modes()) c.info_embeds[m] = unit(rng, d);
            cands.push_back(std::move(c));
        }
        SelectionCandidate echo;  // scores exactly the baseline
        echo.summary = {"echo", n + 1, "q"};
        for (auto m : filters.input_modes()) echo.info_embeds[m] = q;
        cands.push_back(echo);

        const auto sel = select_information(filters, q, v, cands);
        std::set<std::size_t> chosen;
        for (std::size_t i = 0; i < sel.selected.size(); ++i) {
            chosen.insert(sel.selected[i].summary.source_index);
            o.check(sel.selected[i].score >= sel.baseline, "selected item below baseline");
            if (i) o.check(sel.selected[i - 1].score >= sel.selected[i].score, "selection not ordered");
        }
        o.check(chosen.size() == sel.selected.size(), "duplicate selection");
        o.check(chosen.count(n + 1) == 1, "baseline-equal item not selected");
        for (const auto& c : cands) {
            const bool above = filters.score(q, v, c.info_embeds) >= sel.baseline;
            o.check(above == (chosen.count(c.summary.source_index) == 1), "selection disagrees with threshold");
        }
    }
    return o;
}

// -- 6. end-to-end ---------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + IRA_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
}

Verdict end_to_end() {
    Verdict o;
    test::TempDir tmp("ira-accept");
    const std::string config = (test::fixture("e2e") / "config.json").string();
    const auto instances = load_dataset(test::fixture("e2e/data"), DatasetFormat::OkVqa, Split::Train).size() +
                           load_dataset(test::fixture("e2e/data"), DatasetFormat::OkVqa, Split::Test).size();
    o.check(instances == 5, "fixture has " + std::to_string(instances) + " instances");

    std::vector<std::map<std::string, std::string>> digests;
    for (const std::string run : {"a", "b"}) {
        const auto out = tmp / run;
        const std::string common = " --config \"" + config + "\" --stub --output-dir \"" + out.string() + "\"";
        o.check(run_cli("all" + common, tmp / (run + ".log")) == 0, "ira all failed in run " + run);
        for (const std::string mode : {"original", "all", "random", "best"}) {
            o.check(run_cli("probe --mode " + mode + common, tmp / (run + "-" + mode + ".log")) == 0,
                    "probe " + mode + " failed in run " + run);
        }
        digests.push_back(test::tree_digest(out));
    }
    o.check(!digests[0].empty() && digests[0] == digests[1], "output directories differ between runs");

    std::map<std::string, std::map<std::string, double>> acc;
    for (const std::string mode : {"original", "all", "random", "best"}) {
        const auto p = tmp / "a" / ("probe_" + mode + ".json");
        if (!fs::exists(p)) continue;
        const json report = parse_json_file(p);
        for (const auto& q : report.at("per_question")) acc[mode][q.at("question_id")] = q.at("accuracy");
    }
    o.check(!acc["best"].empty(), "best probe has no questions");
    for (const auto& [qid, best] : acc["best"]) {
        for (const std::string mode : {"original", "all", "random"}) {
            o.check(acc[mode].count(qid) && best >= acc[mode][qid], "best < " + mode + " for question " + qid);
        }
    }
    if (o.pass) o.detail = std::to_string(digests[0].size()) + " files identical";
    return o;
}

// -- 7. ensemble -----------------------------------------------------------

Verdict ensemble_reduction() {
    Verdict o;
    using P = std::vector<std::optional<std::string>>;
    o.check(majority_vote(P{"ski", "ski", "snow", "ski", "cross country"}) == 0u, "majority example");
    o.check(majority_vote(P{"a", "b"}) == 0u, "two-way tie goes to first query");
    o.check(majority_vote(P{"snow", "ski", "ski", "snow"}) == 0u, "tie goes to lowest offset");

    Rng rng(555);
    ExamplePool pool;
    for (int i = 0; i < 40; ++i) {
        PoolEntry e;
        e.instance.question_id = "train" + std::to_string(i);
        e.instance.question = "What is shown in picture " + std::to_string(i) + "?";
        e.instance.caption = "A photo numbered " + std::to_string(i) + ".";
        e.instance.tags = std::vector<std::string>{"photo"};
        e.key = unit(rng, 16);
        e.answer = "answer " + std::to_string(i % 5);
        e.refined_info = {"Refined fact " + std::to_string(i) + "."};
        pool.entries.push_back(std::move(e));
    }
    Gateway gw;
    ServiceEndpointConfig completion;
    completion.base_url = "stub:3";
    for (int i = 0; i < 100; ++i) {
        VQAInstance inst;
        inst.question_id = "eval" + std::to_string(i);
        inst.question = "What is happening in scene " + std::to_string(i) + "?";
        inst.caption = "Scene " + std::to_string(i) + ".";
        inst.tags = std::vector<std::string>{"scene"};
        const EnsembleRequest req{make_context(inst, {"Fact " + std::to_string(i) + "."}), unit(rng, 16), {}};
        const std::size_t shots = 1 + rng.below(8);
        const auto ens = ensemble_predict(gw, completion, pool, req, {1, shots, true}, Variant::Pica, ExampleInfo::Refined);

        std::vector<AnswerContext> examples;
        for (auto idx : select_examples(pool, req.query_key, shots, 0)) {
            examples.push_back(make_context(pool.entries[idx].instance, pool.entries[idx].refined_info,
                                            pool.entries[idx].answer));
        }
        const auto single = predict_answer(gw, completion, build_answer_prompt(req.query, examples, Variant::Pica));
        o.check(ens.answer == single, "instance " + std::to_string(i) + ": '" + ens.answer + "' vs '" + single + "'");
    }
    return o;
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"soft-accuracy oracle equivalence", 5.0, soft_accuracy_oracle},
        {"template byte-exactness", 1.0, templates_exact},
        {"filter gradient check", 10.0, gradient_check},
        {"filter learnability", 60.0, learnability},
        {"selection-rule invariants", 10.0, selection_invariants},
        {"end-to-end determinism", 30.0, end_to_end},
        {"ensemble reduction", 10.0, ensemble_reduction},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Verdict o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (o.pass && secs >= c.budget_s) {
            o.pass = false;
            o.detail = "over time budget";
        }
        std::printf("%s  %-34s %7.3fs / %4.0fs  %s\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), secs, c.budget_s,
                    o.detail.c_str());
        failed += o.pass ? 0 : 1;
    }
    std::fflush(stdout);
    return failed == 0 ? 0 : 1;
}
