#include <gtest/gtest.h>

#include <algorithm>

#include "ira/dataset.hpp"
#include "support.hpp"

using namespace ira;

namespace {

// Explicit enumeration of the ten 9-annotator subsets.
double subset_oracle(const std::string& pred, const std::vector<std::string>& golds) {
    const std::string p = normalize_answer(pred);
    int thirds = 0;  // sum of min(m, 3) over subsets, in units of 1/3
    for (std::size_t drop = 0; drop < golds.size(); ++drop) {
        int m = 0;
        for (std::size_t i = 0; i < golds.size(); ++i) {
            if (i != drop && normalize_answer(golds[i]) == p) ++m;
        }
        thirds += std::min(m, 3);
    }
    return thirds / (3.0 * static_cast<double>(golds.size()));
}

std::vector<std::string> tens(const std::string& a, int n_a, const std::string& b) {
    std::vector<std::string> out(static_cast<std::size_t>(n_a), a);
    out.resize(10, b);
    return out;
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump()); }

json annotations_for(const std::vector<std::string>& ids) {
    json anns = json::array();
    for (const auto& id : ids) {
        json answers = json::array();
        for (int i = 0; i < 10; ++i) answers.push_back({{"answer", "ans" + id}});
        anns.push_back({{"question_id", id}, {"answers", answers}});
    }
    return {{"annotations", anns}};
}

}  // namespace

TEST(NormalizeAnswer, Examples) {
    EXPECT_EQ(normalize_answer("The Ham."), "ham");
    EXPECT_EQ(normalize_answer("cross country ski"), "cross country ski");
    EXPECT_EQ(normalize_answer("  Frosted   Glass "), "frosted glass");
    EXPECT_EQ(normalize_answer("an apple a day"), "apple day");
    EXPECT_EQ(normalize_answer("man's hat"), "man's hat");
    EXPECT_EQ(normalize_answer("'quoted'"), "quoted");
    EXPECT_EQ(normalize_answer("theater"), "theater");
    EXPECT_EQ(normalize_answer(""), "");
}

TEST(NormalizeAnswer, OfficialTablesAreOptIn) {
    EXPECT_EQ(normalize_answer("two"), "two");
    EXPECT_EQ(normalize_answer("two", {true}), "2");
    EXPECT_EQ(normalize_answer("dont", {true}), "don't");
}

TEST(NormalizeAnswer, Idempotent) {
    Rng rng(11);
    const std::string alphabet = "aAbT .,'!?-  he";
    for (int i = 0; i < 2000; ++i) {
        std::string s;
        const auto len = rng.below(14);
        for (std::size_t j = 0; j < len; ++j) s += alphabet[rng.below(alphabet.size())];
        const auto once = normalize_answer(s);
        EXPECT_EQ(normalize_answer(once), once) << "input: [" << s << "]";
    }
}

TEST(SoftAccuracy, ClosedFormCases) {
    EXPECT_DOUBLE_EQ(soft_accuracy("ham", tens("ham", 0, "x")), 0.0);
    EXPECT_DOUBLE_EQ(soft_accuracy("ham", tens("ham", 10, "x")), 1.0);
    EXPECT_NEAR(soft_accuracy("ham", tens("ham", 1, "x")), 0.3, 1e-15);
    EXPECT_NEAR(soft_accuracy("ham", tens("ham", 2, "x")), 0.6, 1e-15);
    EXPECT_NEAR(soft_accuracy("ham", tens("ham", 3, "x")), 0.9, 1e-15);
    EXPECT_DOUBLE_EQ(soft_accuracy("ham", tens("ham", 4, "x")), 1.0);
    EXPECT_DOUBLE_EQ(soft_accuracy("The Ham.", tens("ham", 4, "x")), 1.0);
}

TEST(SoftAccuracy, WrongAnnotationCount) {
    try {
        (void)soft_accuracy("a", {"a", "b"});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::WrongAnnotationCount);
    }
}

TEST(SoftAccuracy, MatchesSubsetOracleOnRandomAlphabets) {
    Rng rng(5);
    const std::vector<std::string> alphabet = {"ski", "Ski.", "snow", "the snow", "water", "ice"};
    for (int c = 0; c < 1000; ++c) {
        std::vector<std::string> golds;
        for (int i = 0; i < 10; ++i) golds.push_back(alphabet[rng.below(alphabet.size())]);
        const auto& pred = alphabet[rng.below(alphabet.size())];
        EXPECT_EQ(soft_accuracy(pred, golds), subset_oracle(pred, golds));
    }
}

TEST(SoftAccuracy, PermutationInvariantAndMonotone) {
    Rng rng(9);
    for (int c = 0; c < 200; ++c) {
        const int m = static_cast<int>(rng.below(10));
        auto golds = tens("ham", m, "other");
        const double base = soft_accuracy("ham", golds);
        auto shuffled = golds;
        rng.shuffle(shuffled);
        EXPECT_EQ(soft_accuracy("ham", shuffled), base);
        auto more = tens("ham", m + 1, "other");
        EXPECT_GE(soft_accuracy("ham", more), base);
    }
}

TEST(DirectMatch, NonTenListsUseDirectCounting) {
    EXPECT_NEAR(instance_accuracy("ham", {"ham", "x", "y"}), 1.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(instance_accuracy("ham", {"ham", "ham", "ham", "x"}), 1.0);
    EXPECT_NEAR(instance_accuracy("ham", tens("ham", 1, "x")), 0.3, 1e-15);
}

TEST(MostCommonAnswer, FirstOccurrenceWinsTies) {
    EXPECT_EQ(most_common_answer({"b", "a", "a", "b"}), "b");
    EXPECT_EQ(most_common_answer({"x", "y", "y"}), "y");
}

TEST(LoadDataset, ThreeRecordFixture) {
    test::TempDir dir;
    write_json(dir / "train_questions.json",
               {{"questions",
                 {{{"question_id", 1}, {"image_id", 42}, {"question", "q1?"}},
                  {{"question_id", "2"}, {"image", "img2.jpg"}, {"question", "q2?"}, {"caption", "c"}},
                  {{"question_id", 3},
                   {"image_id", 7},
                   {"question", "q3?"},
                   {"tags", {"a", "b"}},
                   {"candidates", {{{"answer", "x"}, {"confidence", 0.5}}}}}}}});
    write_json(dir / "train_annotations.json", annotations_for({"1", "2", "3"}));
    auto insts = load_dataset(dir.path(), DatasetFormat::OkVqa, Split::Train);
    ASSERT_EQ(insts.size(), 3u);
    for (const auto& i : insts) EXPECT_EQ(i.gold_answers.size(), 10u);
    EXPECT_EQ(insts[0].image_ref, "COCO_train2014_000000000042.jpg");
    EXPECT_EQ(insts[1].image_ref, "img2.jpg");
    EXPECT_EQ(insts[1].caption.value(), "c");
    EXPECT_EQ(insts[2].tags->size(), 2u);
    EXPECT_DOUBLE_EQ(insts[2].candidates->front().confidence, 0.5);
}

TEST(LoadDataset, EmptyQuestionsFile) {
    test::TempDir dir;
    write_json(dir / "train_questions.json", {{"questions", json::array()}});
    write_json(dir / "train_annotations.json", {{"annotations", json::array()}});
    EXPECT_TRUE(load_dataset(dir.path(), DatasetFormat::OkVqa, Split::Train).empty());
}

TEST(LoadDataset, Errors) {
    test::TempDir dir;
    auto code_of = [&](Split split) {
        try {
            (void)load_dataset(dir.path(), DatasetFormat::OkVqa, split);
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::Io;
    };
    EXPECT_EQ(code_of(Split::Train), ErrorCode::MissingFile);

    write_json(dir / "train_questions.json", {{"questions", {{{"question_id", 5}, {"image_id", 1}, {"question", "q"}}}}});
    write_json(dir / "train_annotations.json", annotations_for({"6"}));
    EXPECT_EQ(code_of(Split::Train), ErrorCode::AnnotationMismatch);

    write_json(dir / "val_questions.json", {{"questions", {{{"question_id", 9}, {"image_id", 1}}}}});
    write_json(dir / "val_annotations.json", annotations_for({"9"}));
    try {
        (void)load_dataset(dir.path(), DatasetFormat::OkVqa, Split::Val);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MalformedRecord);
        EXPECT_EQ(e.detail(), "9");
    }

    write_json(dir / "test_questions.json",
               {{"questions", {{{"question_id", 1}, {"image_id", 1}, {"question", "q"},
                                {"candidates", {{{"answer", "x"}, {"confidence", 1.5}}}}}}}});
    EXPECT_EQ(code_of(Split::Test), ErrorCode::MalformedRecord);
}

TEST(LoadDataset, TestSplitWithoutAnnotations) {
    test::TempDir dir;
    write_json(dir / "test_questions.json", {{"questions", {{{"question_id", 1}, {"image_id", 3}, {"question", "q"}}}}});
    auto insts = load_dataset(dir.path(), DatasetFormat::OkVqa, Split::Test);
    ASSERT_EQ(insts.size(), 1u);
    EXPECT_TRUE(insts[0].gold_answers.empty());
    EXPECT_EQ(insts[0].image_ref, "COCO_val2014_000000000003.jpg");
}

TEST(LoadDataset, AOkVqaNativeFile) {
    test::TempDir dir;
    write_json(dir / "aokvqa_v1p0_val.json",
               json::array({{{"question_id", "abc"},
                             {"image_id", 12},
                             {"question", "What is it?"},
                             {"direct_answers", {"dog", "dog", "cat", "dog", "dog"}}}}));
    auto insts = load_dataset(dir.path(), DatasetFormat::AOkVqa, Split::Val);
    ASSERT_EQ(insts.size(), 1u);
    EXPECT_EQ(insts[0].gold_answers.size(), 5u);
    EXPECT_EQ(insts[0].image_ref, "val2017/000000000012.jpg");
    EXPECT_DOUBLE_EQ(instance_accuracy("dog", insts[0].gold_answers), 1.0);
}

TEST(LoadDataset, EndToEndFixtureParses) {
    auto train = load_dataset(test::fixture("e2e/data"), DatasetFormat::OkVqa, Split::Train);
    auto eval = load_dataset(test::fixture("e2e/data"), DatasetFormat::OkVqa, Split::Test);
    EXPECT_EQ(train.size() + eval.size(), 5u);
}
