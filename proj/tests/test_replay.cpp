#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>

#include "foodcl/backbone.hpp"
#include "foodcl/replay.hpp"

using namespace foodcl;

namespace {

const Tokenizer& tok() {
    static Tokenizer t = Tokenizer::unifood_mini();
    return t;
}

std::set<std::string> random_item_set(Rng& rng, int max_items = 6) {
    static const std::vector<std::string> pool = {"beef", "onion",  "salt",  "pepper", "rice",
                                                  "tofu", "garlic", "sugar", "milk",   "corn"};
    std::set<std::string> s;
    const int k = static_cast<int>(rng.uniform_int(0, max_items));
    for (int i = 0; i < k; ++i) s.insert(pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))]);
    return s;
}

// independent counting oracle for the voting rule
std::set<std::string> counting_oracle(const std::vector<std::set<std::string>>& candidates, int threshold,
                                      bool strict) {
    std::set<std::string> universe;
    for (const auto& c : candidates) universe.insert(c.begin(), c.end());
    std::set<std::string> kept;
    for (const auto& item : universe) {
        int count = 0;
        for (const auto& c : candidates)
            if (c.contains(item)) ++count;
        if (strict ? count > threshold : count >= threshold) kept.insert(item);
    }
    return kept;
}

// independent O(n^2) consensus recomputation
int consensus_oracle(const std::vector<std::string>& texts) {
    const size_t n = texts.size();
    std::vector<std::vector<double>> emb;
    for (const auto& t : texts) emb.push_back(embed_text(t));
    double best = -2.0;
    int best_i = -1;
    for (size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < n; ++j)
            if (i != j) s += cosine_similarity(emb[i], emb[j]);
        const double conf = s / static_cast<double>(n - 1);
        if (conf > best) {
            best = conf;
            best_i = static_cast<int>(i);
        }
    }
    return best_i;
}

std::string random_phrase(Rng& rng) {
    static const std::vector<std::string> words = {"chop", "fry",  "beef",  "onion", "serve", "warm",
                                                   "boil", "rice", "salt",  "mix",   "the"};
    std::string s;
    const int k = static_cast<int>(rng.uniform_int(1, 6));
    for (int i = 0; i < k; ++i) {
        if (i) s += ' ';
        s += words[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(words.size()) - 1))];
    }
    return s;
}

}  // namespace

TEST_CASE("parse_set_answer normalization") {
    CHECK(parse_set_answer("beef, onion, onion, ") == std::set<std::string>{"beef", "onion"});
    CHECK(parse_set_answer("").empty());
    CHECK(parse_set_answer("   ").empty());
    CHECK(parse_set_answer("Salt,PEPPER") == std::set<std::string>{"salt", "pepper"});
    CHECK(parse_set_answer("a  b , c") == std::set<std::string>{"a b", "c"});
}

TEST_CASE("enhance_set matches the counting oracle exactly") {
    Rng rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(1, 7));
        const int t = static_cast<int>(rng.uniform_int(1, n));
        const bool strict = rng.uniform() < 0.3;
        std::vector<std::set<std::string>> cands;
        for (int i = 0; i < n; ++i) cands.push_back(random_item_set(rng));
        CHECK(enhance_set(cands, t, strict).items == counting_oracle(cands, t, strict));
    }
}

TEST_CASE("enhance_set threshold edge cases and properties") {
    Rng rng(7);
    // n=5, t=4: an item in 4 of 5 sets is kept, one in 3 of 5 is dropped
    std::vector<std::set<std::string>> cands = {{"beef", "salt"}, {"beef", "salt"}, {"beef", "salt"},
                                                {"beef"},        {"onion"}};
    const auto e = enhance_set(cands, 4);
    CHECK(e.items == std::set<std::string>{"beef"});
    CHECK(e.confidence == Catch::Approx(0.8));

    for (int trial = 0; trial < 50; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(2, 7));
        std::vector<std::set<std::string>> cs;
        std::set<std::string> uni;
        std::set<std::string> inter;
        for (int i = 0; i < n; ++i) cs.push_back(random_item_set(rng));
        for (const auto& c : cs) uni.insert(c.begin(), c.end());
        inter = cs[0];
        for (const auto& c : cs) {
            std::set<std::string> tmp;
            std::set_intersection(inter.begin(), inter.end(), c.begin(), c.end(), std::inserter(tmp, tmp.begin()));
            inter = tmp;
        }
        CHECK(enhance_set(cs, 1).items == uni);   // threshold floor: union
        CHECK(enhance_set(cs, n).items == inter); // threshold ceiling: intersection

        // monotone in t
        std::set<std::string> prev = enhance_set(cs, 1).items;
        for (int t = 2; t <= n; ++t) {
            const auto cur = enhance_set(cs, t).items;
            for (const auto& item : cur) CHECK(prev.contains(item));
            prev = cur;
        }

        // order invariance
        auto shuffled = cs;
        rng.shuffle(shuffled);
        CHECK(enhance_set(shuffled, std::max(1, n / 2)).items == enhance_set(cs, std::max(1, n / 2)).items);
    }

    CHECK_THROWS_AS(enhance_set(cands, 6), std::invalid_argument);
    CHECK_THROWS_AS(enhance_set(cands, 0), std::invalid_argument);
}

TEST_CASE("embed_text determinism and discrimination") {
    const auto a = embed_text("step 1 fry beef");
    const auto b = embed_text("step 1 fry beef");
    CHECK(a == b);  // bit-identical
    CHECK(a.size() == 256);
    double norm = 0.0;
    for (double x : a) norm += x * x;
    CHECK(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-12));

    const auto near = embed_text("step 1 fry pork");
    const auto far = embed_text("preheat the oven to 200");
    CHECK(cosine_similarity(a, near) > cosine_similarity(a, far));
    CHECK(cosine_similarity(a, embed_text("  step 1   fry beef ")) == Catch::Approx(1.0).margin(1e-12));

    CHECK_THROWS_AS(embed_text(""), std::invalid_argument);
    CHECK_THROWS_AS(embed_text("   \t "), std::invalid_argument);
}

TEST_CASE("consensus_select matches the brute-force oracle on 1000 bundles") {
    Rng rng(2025);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(2, 6));
        std::vector<std::string> cands;
        for (int i = 0; i < n; ++i) cands.push_back(random_phrase(rng));
        const auto got = consensus_select(cands);
        CHECK(got.index == consensus_oracle(cands));
    }
}

TEST_CASE("consensus_select edge cases and invariances") {
    // all identical -> index 0, confidence 1
    const auto same = consensus_select({"fry beef", "fry beef", "fry beef"});
    CHECK(same.index == 0);
    CHECK(same.confidence == Catch::Approx(1.0).margin(1e-9));

    // {X, X, Y} with dissimilar Y -> an X wins, tie to the lower index
    const auto xxy = consensus_select({"fry beef with onion", "fry beef with onion", "preheat oven"});
    CHECK(xxy.index == 0);

    // n=2: symmetric matrix, tie-break returns 0
    const auto two = consensus_select({"fry beef", "boil rice"});
    CHECK(two.index == 0);

    // n=1 degenerate
    const auto one = consensus_select({"anything"});
    CHECK(one.index == 0);
    CHECK(one.confidence == 1.0);

    // unembeddable candidates are excluded from rows and columns
    const auto withempty = consensus_select({"", "fry beef", "fry beef with salt", " "});
    CHECK(withempty.index >= 1);
    CHECK_THROWS_AS(consensus_select({"", "fry beef", " "}), std::invalid_argument);
    CHECK_THROWS_AS(consensus_select({}), std::invalid_argument);

    // selected confidence invariant under permutation of the other candidates
    Rng rng(5);
    std::vector<std::string> cands = {"fry beef", "fry beef with onion", "boil rice", "fry beef", "serve warm"};
    const auto base = consensus_select(cands);
    const std::string winner = cands[static_cast<size_t>(base.index)];
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::string> others;
        for (size_t i = 0; i < cands.size(); ++i)
            if (static_cast<int>(i) != base.index) others.push_back(cands[i]);
        rng.shuffle(others);
        std::vector<std::string> permuted{winner};
        permuted.insert(permuted.end(), others.begin(), others.end());
        const auto again = consensus_select(permuted);
        CHECK(again.confidence == Catch::Approx(base.confidence).margin(1e-12));
    }
}

TEST_CASE("replay quota arithmetic") {
    CHECK(replay_quota(0.05, 2000, 2) == std::vector<int>{50, 50});
    CHECK(replay_quota(0.05, 2000, 1) == std::vector<int>{100});
    CHECK(replay_quota(0.0, 2000, 2) == std::vector<int>{0, 0});
    CHECK(replay_quota(0.05, 2010, 2) == std::vector<int>{51, 50});  // remainder to earliest
    CHECK(replay_quota(0.05, 2000, 0).empty());
}

TEST_CASE("enhance_bundle rules") {
    ReplayConfig cfg;
    cfg.n = 5;
    cfg.vote_threshold = 4;

    GenerationBundle bundle;
    bundle.kind = TaskKind::kIngredient;
    bundle.bundle_id = 7;
    bundle.candidates = {"beef , onion", "beef , onion", "beef", "beef , salt", "beef , onion"};

    const PseudoSample voted = enhance_bundle(tok(), bundle, cfg);
    CHECK(voted.selection_rule == "vote");
    CHECK(voted.enhanced_text == "beef");
    CHECK(voted.confidence == Catch::Approx(1.0));
    CHECK(voted.answer_tokens.back() == tok().eos());

    ReplayConfig off = cfg;
    off.quality_enhance = false;
    const PseudoSample raw = enhance_bundle(tok(), bundle, off);
    CHECK(raw.selection_rule == "raw");
    CHECK(raw.enhanced_text == bundle.candidates[0]);

    GenerationBundle textb;
    textb.kind = TaskKind::kRecipe;
    textb.candidates = {"fry the beef . serve warm .", "fry the beef . serve warm .", "boil rice .",
                        "fry the beef . serve warm .", "mix well ."};
    const PseudoSample cons = enhance_bundle(tok(), textb, cfg);
    CHECK(cons.selection_rule == "consensus");
    CHECK(cons.enhanced_text == "fry the beef . serve warm .");

    // empty-threshold fallback keeps the top-voted items
    GenerationBundle thin;
    thin.kind = TaskKind::kIngredient;
    thin.candidates = {"beef", "onion", "salt", "rice", "corn"};
    const PseudoSample fb = enhance_bundle(tok(), thin, cfg);
    CHECK(fb.selection_rule == "vote");
    // every item has one vote; the fallback keeps all top-voted items
    CHECK(parse_set_answer(fb.enhanced_text) == std::set<std::string>{"beef", "corn", "onion", "rice", "salt"});
    CHECK(fb.confidence == Catch::Approx(0.2));
}

TEST_CASE("build_replay_buffer counts, determinism and persistence") {
    Rng rng(3);
    BackboneConfig cfg;
    cfg.vocab_size = tok().vocab_size();
    cfg.model_dim = 16;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.mlp_dim = 16;
    cfg.max_seq_len = 96;
    const BackboneWeights w = BackboneWeights::init(cfg, rng);
    InferenceModel model(w, {});

    DatasetParams dp;
    dp.num_dishes = 60;
    dp.seed = 4;
    dp.pool_dishes = 30;
    const TaskStream stream = generate_dataset(tok(), dp);

    ReplayConfig rc;
    rc.n = 3;
    rc.vote_threshold = 2;
    rc.proportion = 0.10;
    rc.max_new_tokens = 12;

    // stage 1: no history
    CHECK(build_replay_buffer(tok(), stream, 1, 60, model, rc, 9).empty());

    // stage 3: quota split across the two previous tasks
    const auto buf = build_replay_buffer(tok(), stream, 3, 60, model, rc, 9);
    REQUIRE(buf.size() == 6);
    int task1 = 0, task2 = 0;
    for (const auto& ps : buf) {
        if (ps.task == TaskKind::kIngredient) ++task1;
        if (ps.task == TaskKind::kRecipe) ++task2;
        CHECK(ps.raw_candidates.size() == 3);
        CHECK(ps.prompt_tokens.front() == tok().bos());
        CHECK(ps.prompt_tokens.back() == tok().assistant());
        CHECK(ps.answer_tokens.back() == tok().eos());
    }
    CHECK(task1 == 3);
    CHECK(task2 == 3);

    // deterministic for a fixed seed
    const auto buf2 = build_replay_buffer(tok(), stream, 3, 60, model, rc, 9);
    REQUIRE(buf2.size() == buf.size());
    for (size_t i = 0; i < buf.size(); ++i) {
        CHECK(buf2[i].raw_candidates == buf[i].raw_candidates);
        CHECK(buf2[i].answer_tokens == buf[i].answer_tokens);
    }

    // proportion 0 -> empty buffer
    ReplayConfig zero = rc;
    zero.proportion = 0.0;
    CHECK(build_replay_buffer(tok(), stream, 3, 60, model, zero, 9).empty());

    // persistence round trip
    const auto path = std::filesystem::temp_directory_path() / "foodcl_replay_test" / "replay.jsonl";
    save_replay_buffer(buf, path);
    const auto loaded = load_replay_buffer(path);
    REQUIRE(loaded.size() == buf.size());
    for (size_t i = 0; i < buf.size(); ++i) {
        CHECK(loaded[i].answer_tokens == buf[i].answer_tokens);
        CHECK(loaded[i].enhanced_text == buf[i].enhanced_text);
        CHECK(loaded[i].selection_rule == buf[i].selection_rule);
    }
    std::filesystem::remove_all(path.parent_path());
}
