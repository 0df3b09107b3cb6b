#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <map>

#include "foodcl/metrics.hpp"

using namespace foodcl;

namespace {

const Tokenizer& tok() {
    static Tokenizer t = Tokenizer::unifood_mini();
    return t;
}

// memoized recursive LCS, independent of the DP implementation
int lcs_recursive(std::span<const int> a, std::span<const int> b, size_t i, size_t j,
                  std::map<std::pair<size_t, size_t>, int>& memo) {
    if (i == a.size() || j == b.size()) return 0;
    const auto key = std::make_pair(i, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    int r;
    if (a[i] == b[j])
        r = 1 + lcs_recursive(a, b, i + 1, j + 1, memo);
    else
        r = std::max(lcs_recursive(a, b, i + 1, j, memo), lcs_recursive(a, b, i, j + 1, memo));
    memo[key] = r;
    return r;
}

double rouge_oracle(std::span<const int> pred, std::span<const int> ref) {
    std::map<std::pair<size_t, size_t>, int> memo;
    const int lcs = lcs_recursive(pred, ref, 0, 0, memo);
    if (lcs == 0) return 0.0;
    const double p = static_cast<double>(lcs) / pred.size();
    const double r = static_cast<double>(lcs) / ref.size();
    return 100.0 * 2.0 * p * r / (p + r);
}

}  // namespace

TEST_CASE("iou examples and counting oracle") {
    CHECK(iou({"a", "b"}, {"a", "b"}) == 1.0);
    CHECK(iou({"a"}, {"b"}) == 0.0);
    CHECK(iou({"a", "b", "c"}, {"b", "c", "d"}) == Catch::Approx(0.5));
    CHECK(iou({}, {"x"}) == 0.0);
    CHECK_THROWS_AS(iou({"a"}, {}), std::invalid_argument);

    Rng rng(10);
    const std::vector<std::string> pool = {"a", "b", "c", "d", "e", "f", "g", "h"};
    for (int trial = 0; trial < 1000; ++trial) {
        std::set<std::string> p, t;
        for (const auto& w : pool) {
            if (rng.uniform() < 0.4) p.insert(w);
            if (rng.uniform() < 0.4) t.insert(w);
        }
        if (t.empty()) t.insert("z");
        size_t inter = 0;
        for (const auto& w : p)
            if (t.contains(w)) ++inter;
        const double expect = p.empty() ? 0.0
                                        : static_cast<double>(inter) /
                                              static_cast<double>(p.size() + t.size() - inter);
        CHECK(iou(p, t) == Catch::Approx(expect).margin(1e-15));
        CHECK(iou(p, t) == iou(t.empty() ? p : p, t));
        if (!p.empty()) CHECK(iou(p, t) == Catch::Approx(iou(t, p)).margin(1e-15));  // symmetry
    }
}

TEST_CASE("bleu closed forms") {
    const std::vector<int> abc{10, 11, 12};
    const std::vector<int> abcd{10, 11, 12, 13};
    // p1..p3 = 1, p4 floored to 1/(2*3), BP = exp(1 - 4/3)
    const double expect = 100.0 * std::pow(1.0 / 6.0, 0.25) * std::exp(1.0 - 4.0 / 3.0);
    CHECK(bleu(abc, abcd) == Catch::Approx(expect).margin(1e-6));

    const std::vector<int> ref{4, 5, 6, 7, 8};
    CHECK(bleu(ref, ref) == Catch::Approx(100.0).margin(1e-12));
    CHECK(bleu(std::vector<int>{}, ref) == 0.0);
    CHECK_THROWS_AS(bleu(ref, std::vector<int>{}), std::invalid_argument);

    // 100 iff pred == ref for |ref| >= 4 under floor smoothing
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(4, 10));
        std::vector<int> r2(static_cast<size_t>(n));
        for (auto& x : r2) x = static_cast<int>(rng.uniform_int(0, 5));
        CHECK(bleu(r2, r2) == Catch::Approx(100.0).margin(1e-9));
        auto p2 = r2;
        const auto idx = static_cast<size_t>(rng.uniform_int(0, n - 1));
        p2[idx] = (p2[idx] + 1) % 7;
        CHECK(bleu(p2, r2) < 100.0 - 1e-9);
    }
}

TEST_CASE("rouge_l examples and exhaustive oracle") {
    const std::vector<int> p{1, 9, 2};
    const std::vector<int> r{1, 2, 3};
    CHECK(rouge_l(p, r) == Catch::Approx(100.0 * 2.0 / 3.0).margin(0.01));  // LCS=2, P=R=2/3
    CHECK(rouge_l(r, r) == Catch::Approx(100.0).margin(1e-12));
    CHECK(rouge_l(std::vector<int>{5, 6}, std::vector<int>{7, 8}) == 0.0);
    CHECK(rouge_l(std::vector<int>{}, r) == 0.0);
    CHECK_THROWS_AS(rouge_l(r, std::vector<int>{}), std::invalid_argument);

    // exhaustive: all pairs over a 3-symbol alphabet with 1 <= |a|,|b| <= 5
    std::vector<std::vector<int>> seqs;
    std::function<void(std::vector<int>&)> gen = [&](std::vector<int>& cur) {
        if (!cur.empty()) seqs.push_back(cur);
        if (cur.size() == 5) return;
        for (int s = 0; s < 3; ++s) {
            cur.push_back(s);
            gen(cur);
            cur.pop_back();
        }
    };
    std::vector<int> cur;
    gen(cur);
    REQUIRE(seqs.size() == 3 + 9 + 27 + 81 + 243);
    for (const auto& a : seqs)
        for (const auto& b : seqs) {
            // LCS values must agree exactly; the F-measure arithmetic is
            // checked to float-association tolerance
            if (std::abs(rouge_l(a, b) - rouge_oracle(a, b)) > 1e-9) {
                CAPTURE(a, b);
                REQUIRE(rouge_l(a, b) == Catch::Approx(rouge_oracle(a, b)).margin(1e-9));
            }
        }
}

TEST_CASE("relative_drop") {
    CHECK(relative_drop(36.95, 12.73) == Catch::Approx(65.55).margin(0.01));
    CHECK(relative_drop(5.0, 5.0) == 0.0);
    CHECK(relative_drop(36.56, 35.24) == Catch::Approx(3.61).margin(0.01));
    CHECK(relative_drop(38.54, 37.29) == Catch::Approx(3.24).margin(0.01));
    CHECK_THROWS_AS(relative_drop(0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(relative_drop(-1.0, 0.5), std::invalid_argument);
}

TEST_CASE("nutrition kv set and answer item sets") {
    CHECK(nutrition_kv_set("calories : 5 2 0 , fat : 3 8 , protein : 4 1") ==
          std::set<std::string>{"calories:520", "fat:38", "protein:41"});
    CHECK(nutrition_kv_set("garbage text").empty());
    CHECK(nutrition_kv_set("calories : , fat : 1").size() == 1);

    CHECK(answer_item_set(TaskKind::kIngredient, "beef , onion") == std::set<std::string>{"beef", "onion"});
    CHECK(answer_item_set(TaskKind::kNutrition, "fat : 7") == std::set<std::string>{"fat:7"});
    CHECK(answer_item_set(TaskKind::kRecipe, "fry the beef . serve") ==
          std::set<std::string>{"fry", "the", "beef", "serve"});
}

TEST_CASE("build_report grid, drops and round trip") {
    ReportInputs in;
    in.method = "dual-lora";
    in.seed = 1;
    in.config_hash = 11;
    in.dataset_hash = 22;
    in.task_names = {"ingredient", "recipe"};
    in.task_kinds = {TaskKind::kIngredient, TaskKind::kRecipe};
    in.expected_counts = {2, 2};

    const auto ing_answer = tok().encode("beef , onion , salt");
    const auto rec_answer = tok().encode("fry the beef . serve warm .");

    auto perfect = [&](const std::vector<int>& ans, int64_t id) {
        PredRecord r;
        r.sample_id = id;
        r.pred_tokens = ans;
        r.truth_tokens = ans;
        return r;
    };
    // stage 1: task 1 perfect
    in.predictions.push_back({{perfect(ing_answer, 1), perfect(ing_answer, 2)}});
    // stage 2: task 1 collapsed (wrong-format predictions), task 2 perfect
    PredRecord bad;
    bad.sample_id = 3;
    bad.pred_tokens = tok().encode("fat : 7");
    bad.truth_tokens = ing_answer;
    in.predictions.push_back({{bad, bad}, {perfect(rec_answer, 4), perfect(rec_answer, 5)}});

    const MetricsReport rep = build_report(tok(), in);
    CHECK(rep.cell(1, 1).iou == Catch::Approx(1.0));
    CHECK(rep.cell(1, 1).bleu == Catch::Approx(100.0).margin(1e-9));
    CHECK(rep.cell(1, 1).rouge_l == Catch::Approx(100.0).margin(1e-9));
    CHECK(rep.cell(2, 1).iou == Catch::Approx(0.0));
    CHECK(rep.cell(2, 2).iou == Catch::Approx(1.0));

    bool found_drop = false;
    for (const auto& d : rep.drops)
        if (d.task_index == 1 && d.metric == "iou") {
            found_drop = true;
            CHECK(d.drop_pct == Catch::Approx(100.0));
        }
    CHECK(found_drop);

    // json round trip reproduces the grid exactly
    const auto j = rep.to_json();
    const MetricsReport back = MetricsReport::from_json(j);
    CHECK(back.to_json().dump() == j.dump());
    CHECK(back.cell(2, 2).bleu == rep.cell(2, 2).bleu);

    // determinism: rebuilding from the same inputs gives identical output
    const MetricsReport rep2 = build_report(tok(), in);
    CHECK(rep2.to_json().dump() == j.dump());
    CHECK(!rep.to_tsv().empty());
    CHECK(!rep.to_text().empty());

    // incomplete coverage is an error
    ReportInputs broken = in;
    broken.predictions[1][0].pop_back();
    CHECK_THROWS_WITH(build_report(tok(), broken), Catch::Matchers::ContainsSubstring("incomplete"));
}
