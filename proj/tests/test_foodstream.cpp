#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "foodcl/foodstream.hpp"
#include "foodcl/tokenizer.hpp"

using namespace foodcl;

namespace {
const Tokenizer& tok() {
    static Tokenizer t = Tokenizer::unifood_mini();
    return t;
}
}  // namespace

TEST_CASE("tokenizer bijectivity and closed vocabulary") {
    const auto& t = tok();
    CHECK(t.vocab_size() == 224);
    for (int id = 0; id < t.vocab_size(); ++id) CHECK(t.id(t.token(id)) == id);
    CHECK_THROWS_AS(t.id("pizza"), std::out_of_range);
    CHECK_THROWS_AS(t.token(-1), std::out_of_range);
    CHECK_THROWS_AS(t.token(t.vocab_size()), std::out_of_range);

    const auto ids = t.encode("beef , onion");
    CHECK(t.decode(ids) == "beef , onion");
    CHECK(t.token(t.visual_id(0)) == "v_" + vocab::ingredients()[0]);
    CHECK(t.token(t.ingredient_id(3)) == vocab::ingredients()[3]);
    CHECK(t.token(t.digit(7)) == "7");
}

TEST_CASE("serialize_sample layout and masks") {
    Rng rng(5);
    Dish d = make_dish(tok(), 17, 0.0, rng);
    const Sample s = serialize_sample(tok(), d, TaskKind::kIngredient, 99);

    CHECK(s.prompt_tokens.front() == tok().bos());
    CHECK(s.prompt_tokens[1] == tok().user());
    CHECK(s.prompt_tokens.back() == tok().assistant());
    CHECK(s.answer_tokens.back() == tok().eos());

    // canonical sorted comma-joined ingredient answer
    std::vector<std::string> words;
    for (int id : s.answer_tokens)
        if (id != tok().comma() && id != tok().eos()) words.push_back(tok().token(id));
    auto sorted = words;
    std::sort(sorted.begin(), sorted.end());
    CHECK(words == sorted);
    CHECK(words.size() == d.ingredients.size());

    // mask covers exactly the answer-predicting positions
    const auto full = full_sequence(s);
    const auto mask = answer_mask_positions(s);
    const auto targets = shifted_targets(full);
    CHECK(mask.size() == s.answer_tokens.size());
    std::set<int> answer_target_positions;
    for (size_t j = 0; j + 1 < full.size(); ++j)
        if (j + 1 >= s.prompt_tokens.size()) answer_target_positions.insert(static_cast<int>(j));
    CHECK(std::set<int>(mask.begin(), mask.end()) == answer_target_positions);
    for (int pos : mask) CHECK(targets[pos] == full[pos + 1]);

    // nutrition answer mirrors the additive table
    const Sample ns = serialize_sample(tok(), d, TaskKind::kNutrition, 100);
    Nutrition expect = dish_nutrition(d.ingredients);
    const std::string text = tok().decode(ns.answer_tokens);
    auto squash = [](std::string s) {
        std::string out;
        for (char c : s)
            if (c != ' ') out += c;
        return out;
    };
    CHECK(squash(text) == squash("calories : " + std::to_string(expect.calories) + " , fat : " +
                                 std::to_string(expect.fat) + " , protein : " + std::to_string(expect.protein) +
                                 " <eos>"));

    // recipe mentions every ingredient at least once
    const Sample rs = serialize_sample(tok(), d, TaskKind::kRecipe, 101);
    for (int ing : d.ingredients) {
        CHECK(std::find(rs.answer_tokens.begin(), rs.answer_tokens.end(), tok().ingredient_id(ing)) !=
              rs.answer_tokens.end());
    }
    CHECK_THROWS_AS(serialize_sample(tok(), d, TaskKind::kRecipe, 102, 5), std::invalid_argument);
}

TEST_CASE("generate_dataset determinism, splits and noise") {
    DatasetParams p;
    p.num_dishes = 60;
    p.noise_level = 0.0;
    p.seed = 11;
    p.pool_dishes = 20;
    const TaskStream a = generate_dataset(tok(), p);
    const TaskStream b = generate_dataset(tok(), p);

    REQUIRE(a.tasks.size() == 3);
    CHECK(a.tasks[0].kind == TaskKind::kIngredient);
    CHECK(a.tasks[1].kind == TaskKind::kRecipe);
    CHECK(a.tasks[2].kind == TaskKind::kNutrition);
    CHECK(a.tasks[0].train.size() == 60);
    CHECK(a.tasks[0].test.size() == 6);
    CHECK(a.pool.size() == 20);
    CHECK(a.dataset_hash() == b.dataset_hash());

    // pure function of (num_dishes, noise, seed)
    for (size_t ti = 0; ti < a.tasks.size(); ++ti)
        for (size_t i = 0; i < a.tasks[ti].train.size(); ++i) {
            CHECK(a.tasks[ti].train[i].prompt_tokens == b.tasks[ti].train[i].prompt_tokens);
            CHECK(a.tasks[ti].train[i].answer_tokens == b.tasks[ti].train[i].answer_tokens);
        }

    // disjoint dish ids between splits
    for (const auto& task : a.tasks) {
        std::set<int> train_ids, test_ids;
        for (const auto& s : task.train) train_ids.insert(s.dish_id);
        for (const auto& s : task.test) test_ids.insert(s.dish_id);
        for (int id : test_ids) CHECK(!train_ids.contains(id));
    }

    // noiseless image blocks expose exactly the true ingredient set
    for (const auto& s : a.tasks[0].train) {
        std::set<std::string> visual_words, answer_words;
        bool in_img = false;
        for (int id : s.prompt_tokens) {
            if (id == tok().img_open()) {
                in_img = true;
                continue;
            }
            if (id == tok().img_close()) break;
            if (in_img) visual_words.insert(tok().token(id).substr(2));  // strip "v_"
        }
        for (int id : s.answer_tokens)
            if (id != tok().comma() && id != tok().eos()) answer_words.insert(tok().token(id));
        // distractors may add visuals, but every true ingredient is visible at noise 0
        for (const auto& w : answer_words) CHECK(visual_words.contains(w));
    }

    CHECK_THROWS_AS(generate_dataset(tok(), {.num_dishes = 10}), std::invalid_argument);
    CHECK_THROWS_AS(generate_dataset(tok(), {.num_dishes = 100, .noise_level = 0.6}), std::invalid_argument);
    CHECK_THROWS_AS(generate_dataset(tok(), {.num_dishes = 100, .noise_level = -0.1}), std::invalid_argument);
}

TEST_CASE("stream save/load round trip and validation") {
    DatasetParams p;
    p.num_dishes = 55;
    p.noise_level = 0.12;
    p.seed = 3;
    p.pool_dishes = 10;
    const TaskStream s = generate_dataset(tok(), p);
    const auto dir = std::filesystem::temp_directory_path() / "foodcl_stream_test";
    std::filesystem::remove_all(dir);
    save_stream(s, dir);
    const TaskStream r = load_stream(tok(), dir);

    CHECK(r.dataset_hash() == s.dataset_hash());
    REQUIRE(r.tasks.size() == s.tasks.size());
    for (size_t ti = 0; ti < s.tasks.size(); ++ti) {
        REQUIRE(r.tasks[ti].train.size() == s.tasks[ti].train.size());
        for (size_t i = 0; i < s.tasks[ti].train.size(); ++i) {
            CHECK(r.tasks[ti].train[i].prompt_tokens == s.tasks[ti].train[i].prompt_tokens);
            CHECK(r.tasks[ti].train[i].answer_tokens == s.tasks[ti].train[i].answer_tokens);
        }
    }
    CHECK(r.pool.size() == s.pool.size());

    // corrupted line reported with its line number
    {
        auto path = dir / "task1.train.jsonl";
        std::ofstream app(path, std::ios::app);
        app << "{not json\n";
    }
    try {
        load_stream(tok(), dir);
        FAIL("expected parse error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("task1.train.jsonl:56") != std::string::npos);
    }

    // missing task file
    save_stream(s, dir);
    std::filesystem::remove(dir / "task2.test.jsonl");
    CHECK_THROWS_WITH(load_stream(tok(), dir), Catch::Matchers::ContainsSubstring("missing"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("pretrain corpus avoids task formats") {
    Rng rng(8);
    const auto corpus = make_pretrain_corpus(tok(), 200, rng);
    CHECK(corpus.size() == 200);
    for (const auto& seq : corpus) {
        CHECK(seq.front() == tok().bos());
        CHECK(seq.back() == tok().eos());
        for (int id : seq) {
            CHECK(id != tok().user());
            CHECK(id != tok().assistant());
            CHECK(id != tok().img_open());
            CHECK(id != tok().img_close());
        }
    }
    CHECK_THROWS_AS(make_pretrain_corpus(tok(), 0, rng), std::invalid_argument);
}
