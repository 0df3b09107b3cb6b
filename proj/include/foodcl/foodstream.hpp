#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <cstring>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "foodcl/rng.hpp"
#include "foodcl/tokenizer.hpp"

namespace foodcl {

enum class TaskKind { kIngredient, kRecipe, kNutrition };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::kIngredient: return "ingredient";
        case TaskKind::kRecipe: return "recipe";
        case TaskKind::kNutrition: return "nutrition";
    }
    return "?";
}

inline TaskKind task_kind_from_name(const std::string& s) {
    if (s == "ingredient") return TaskKind::kIngredient;
    if (s == "recipe") return TaskKind::kRecipe;
    if (s == "nutrition") return TaskKind::kNutrition;
    throw std::invalid_argument("unknown task kind '" + s + "'");
}

// Set-valued answers are voted item-wise during replay enhancement; text
// answers (recipes, rendered nutrition) go through consensus selection.
inline bool task_uses_set_answers(TaskKind k) { return k == TaskKind::kIngredient; }

struct Nutrition {
    int calories{0};
    int fat{0};
    int protein{0};
};

struct Dish {
    int id{0};
    std::vector<int> ingredients;   // ingredient indices, sorted by word
    std::vector<int> image_tokens;  // <img> ... </img> block, noise applied
    Nutrition nutrition;            // exact table sum over ingredients
    std::vector<int> recipe_tokens; // deterministic template rendering
};

struct Sample {
    int64_t id{0};
    TaskKind task{TaskKind::kIngredient};
    int dish_id{0};
    std::vector<int> prompt_tokens;  // <bos> ... <assistant>
    std::vector<int> answer_tokens;  // answer ... <eos>
};

struct PoolEntry {
    int dish_id{0};
    std::vector<int> image_tokens;
};

struct TaskData {
    TaskKind kind{TaskKind::kIngredient};
    std::string name;
    std::vector<Sample> train;
    std::vector<Sample> test;
};

struct TaskStream {
    std::vector<TaskData> tasks;   // reference order: ingredient, recipe, nutrition
    std::vector<PoolEntry> pool;   // reserved unlabeled image pool (no answers)
    uint64_t seed{0};
    double noise_level{0.0};
    int num_train_dishes{0};
    int num_test_dishes{0};
    uint64_t vocab_hash{0};

    uint64_t dataset_hash() const {
        uint64_t h = hash_combine(seed, vocab_hash);
        h = hash_combine(h, static_cast<uint64_t>(num_train_dishes));
        h = hash_combine(h, static_cast<uint64_t>(num_test_dishes));
        uint64_t noise_bits;
        static_assert(sizeof(noise_bits) == sizeof(noise_level));
        std::memcpy(&noise_bits, &noise_level, sizeof(noise_bits));
        return hash_combine(h, noise_bits);
    }
};

namespace detail {

inline std::vector<int> sorted_ingredients_by_word(std::vector<int> idx) {
    std::sort(idx.begin(), idx.end(),
              [](int a, int b) { return vocab::ingredients()[a] < vocab::ingredients()[b]; });
    return idx;
}

inline std::vector<int> digits_of(int value) {
    std::vector<int> ds;
    if (value == 0) return {0};
    while (value > 0) {
        ds.push_back(value % 10);
        value /= 10;
    }
    std::reverse(ds.begin(), ds.end());
    return ds;
}

}  // namespace detail

inline Nutrition dish_nutrition(const std::vector<int>& ingredient_indices) {
    Nutrition n;
    for (int i : ingredient_indices) {
        const auto e = vocab::ingredient_nutrition(i);
        n.calories += e.calories;
        n.fat += e.fat;
        n.protein += e.protein;
    }
    return n;
}

// Answer renderings -----------------------------------------------------

inline std::vector<int> ingredient_answer_tokens(const Tokenizer& tok, const std::vector<int>& sorted_ingredients) {
    std::vector<int> out;
    for (size_t i = 0; i < sorted_ingredients.size(); ++i) {
        if (i) out.push_back(tok.comma());
        out.push_back(tok.ingredient_id(sorted_ingredients[i]));
    }
    return out;
}

inline std::vector<int> recipe_answer_tokens(const Tokenizer& tok, const std::vector<int>& sorted_ingredients) {
    std::vector<int> out;
    int sum = 0;
    for (int i : sorted_ingredients) sum += i;
    for (int i : sorted_ingredients) {
        const auto& verb = vocab::prep_verbs()[static_cast<size_t>(i) % vocab::prep_verbs().size()];
        out.push_back(tok.id(verb));
        out.push_back(tok.id("the"));
        out.push_back(tok.ingredient_id(i));
        out.push_back(tok.period());
    }
    out.push_back(tok.id("combine"));
    out.push_back(tok.id("and"));
    out.push_back(tok.id(vocab::cook_verbs()[static_cast<size_t>(sum) % vocab::cook_verbs().size()]));
    out.push_back(tok.id("until"));
    out.push_back(tok.id(vocab::finish_words()[static_cast<size_t>(sum) % vocab::finish_words().size()]));
    out.push_back(tok.period());
    out.push_back(tok.id("serve"));
    out.push_back(tok.id(vocab::style_words()[static_cast<size_t>(sum / 4) % vocab::style_words().size()]));
    out.push_back(tok.period());
    return out;
}

inline std::vector<int> nutrition_answer_tokens(const Tokenizer& tok, const Nutrition& n) {
    std::vector<int> out;
    auto put_field = [&](const char* key, int value) {
        out.push_back(tok.id(key));
        out.push_back(tok.colon());
        for (int d : detail::digits_of(value)) out.push_back(tok.digit(d));
    };
    put_field("calories", n.calories);
    out.push_back(tok.comma());
    put_field("fat", n.fat);
    out.push_back(tok.comma());
    put_field("protein", n.protein);
    return out;
}

inline std::vector<int> question_tokens(const Tokenizer& tok, TaskKind kind, int template_id = 0) {
    if (template_id != 0)
        throw std::invalid_argument("question template " + std::to_string(template_id) + " not defined for task " +
                                    task_kind_name(kind));
    switch (kind) {
        case TaskKind::kIngredient: return tok.encode("list the ingredients in this dish");
        case TaskKind::kRecipe: return tok.encode("describe the cooking steps for this dish");
        case TaskKind::kNutrition: return tok.encode("estimate the nutrition facts of this dish");
    }
    throw std::invalid_argument("bad task kind");
}

// Conversational VQA layout: <bos> <user> <img>..</img> question <assistant> answer <eos>
inline Sample serialize_sample(const Tokenizer& tok, const Dish& dish, TaskKind kind, int64_t sample_id,
                               int template_id = 0) {
    Sample s;
    s.id = sample_id;
    s.task = kind;
    s.dish_id = dish.id;
    s.prompt_tokens.push_back(tok.bos());
    s.prompt_tokens.push_back(tok.user());
    s.prompt_tokens.insert(s.prompt_tokens.end(), dish.image_tokens.begin(), dish.image_tokens.end());
    const auto q = question_tokens(tok, kind, template_id);
    s.prompt_tokens.insert(s.prompt_tokens.end(), q.begin(), q.end());
    s.prompt_tokens.push_back(tok.assistant());
    switch (kind) {
        case TaskKind::kIngredient: s.answer_tokens = ingredient_answer_tokens(tok, dish.ingredients); break;
        case TaskKind::kRecipe: s.answer_tokens = dish.recipe_tokens; break;
        case TaskKind::kNutrition: s.answer_tokens = nutrition_answer_tokens(tok, dish.nutrition); break;
    }
    s.answer_tokens.push_back(tok.eos());
    return s;
}

inline std::vector<int> full_sequence(const Sample& s) {
    std::vector<int> seq = s.prompt_tokens;
    seq.insert(seq.end(), s.answer_tokens.begin(), s.answer_tokens.end());
    return seq;
}

// Position j predicts token j+1. The mask covers exactly the positions whose
// next token is part of the answer region (including <eos>).
inline std::vector<int> answer_mask_positions(const Sample& s) {
    std::vector<int> mask;
    const int prompt_len = static_cast<int>(s.prompt_tokens.size());
    const int total = prompt_len + static_cast<int>(s.answer_tokens.size());
    for (int j = prompt_len - 1; j < total - 1; ++j) mask.push_back(j);
    return mask;
}

inline std::vector<int> shifted_targets(const std::vector<int>& full) {
    std::vector<int> t(full.size(), 0);
    for (size_t j = 0; j + 1 < full.size(); ++j) t[j] = full[j + 1];
    return t;
}

// Dish generation --------------------------------------------------------

inline Dish make_dish(const Tokenizer& tok, int dish_id, double noise_level, Rng& rng) {
    Dish d;
    d.id = dish_id;
    const int num_ing = static_cast<int>(rng.uniform_int(3, 7));
    std::vector<int> all(vocab::ingredients().size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    rng.shuffle(all);
    d.ingredients.assign(all.begin(), all.begin() + num_ing);
    d.ingredients = detail::sorted_ingredients_by_word(d.ingredients);
    d.nutrition = dish_nutrition(d.ingredients);
    d.recipe_tokens = recipe_answer_tokens(tok, d.ingredients);

    std::vector<int> visuals;
    for (int i : d.ingredients)
        if (rng.uniform() >= noise_level) visuals.push_back(tok.visual_id(i));
    const int distractors = static_cast<int>(rng.uniform_int(0, 2));
    for (int k = 0; k < distractors; ++k) {
        int cand;
        do {
            cand = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(vocab::ingredients().size()) - 1));
        } while (std::find(d.ingredients.begin(), d.ingredients.end(), cand) != d.ingredients.end());
        visuals.push_back(tok.visual_id(cand));
    }
    rng.shuffle(visuals);
    d.image_tokens.push_back(tok.img_open());
    d.image_tokens.insert(d.image_tokens.end(), visuals.begin(), visuals.end());
    d.image_tokens.push_back(tok.img_close());
    return d;
}

struct DatasetParams {
    int num_dishes{2000};       // training dishes; test split is one tenth
    double noise_level{0.1};
    uint64_t seed{1};
    int pool_dishes{400};       // reserved unlabeled pool for replay prompts
};

inline TaskStream generate_dataset(const Tokenizer& tok, const DatasetParams& params) {
    if (params.num_dishes < 50) throw std::invalid_argument("generate_dataset: need at least 50 dishes");
    if (!(params.noise_level >= 0.0 && params.noise_level < 0.5))
        throw std::invalid_argument("generate_dataset: noise_level must be in [0, 0.5)");

    TaskStream stream;
    stream.seed = params.seed;
    stream.noise_level = params.noise_level;
    stream.num_train_dishes = params.num_dishes;
    stream.num_test_dishes = params.num_dishes / 10;
    stream.vocab_hash = tok.vocab_hash();

    Rng root(params.seed);
    Rng dish_rng = root.derive("dishes");
    std::vector<Dish> train_dishes, test_dishes;
    int next_id = 0;
    for (int i = 0; i < stream.num_train_dishes; ++i)
        train_dishes.push_back(make_dish(tok, next_id++, params.noise_level, dish_rng));
    for (int i = 0; i < stream.num_test_dishes; ++i)
        test_dishes.push_back(make_dish(tok, next_id++, params.noise_level, dish_rng));

    const TaskKind order[3] = {TaskKind::kIngredient, TaskKind::kRecipe, TaskKind::kNutrition};
    int64_t sample_id = 0;
    for (TaskKind kind : order) {
        TaskData task;
        task.kind = kind;
        task.name = task_kind_name(kind);
        for (const Dish& d : train_dishes) task.train.push_back(serialize_sample(tok, d, kind, sample_id++));
        for (const Dish& d : test_dishes) task.test.push_back(serialize_sample(tok, d, kind, sample_id++));
        stream.tasks.push_back(std::move(task));
    }

    Rng pool_rng = root.derive("pool");
    for (int i = 0; i < params.pool_dishes; ++i) {
        Dish d = make_dish(tok, next_id++, params.noise_level, pool_rng);
        stream.pool.push_back({d.id, std::move(d.image_tokens)});
    }
    return stream;
}

// Max serialized length across all splits; the backbone context must cover it.
inline int max_sequence_length(const TaskStream& stream) {
    size_t mx = 0;
    for (const auto& task : stream.tasks) {
        for (const auto* split : {&task.train, &task.test})
            for (const auto& s : *split) mx = std::max(mx, s.prompt_tokens.size() + s.answer_tokens.size());
    }
    return static_cast<int>(mx);
}

// Persistence ------------------------------------------------------------

namespace detail {

inline nlohmann::json sample_to_json(const Sample& s) {
    return nlohmann::json{{"sample_id", s.id},
                          {"task", task_kind_name(s.task)},
                          {"dish_id", s.dish_id},
                          {"prompt", s.prompt_tokens},
                          {"answer", s.answer_tokens}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    s.id = j.at("sample_id").get<int64_t>();
    s.task = task_kind_from_name(j.at("task").get<std::string>());
    s.dish_id = j.at("dish_id").get<int>();
    s.prompt_tokens = j.at("prompt").get<std::vector<int>>();
    s.answer_tokens = j.at("answer").get<std::vector<int>>();
    return s;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    for (const auto& l : lines) out << l << '\n';
}

}  // namespace detail

inline void save_stream(const TaskStream& stream, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest{{"format_version", 1},
                            {"seed", stream.seed},
                            {"noise_level", stream.noise_level},
                            {"num_train_dishes", stream.num_train_dishes},
                            {"num_test_dishes", stream.num_test_dishes},
                            {"vocab_hash", stream.vocab_hash},
                            {"dataset_hash", stream.dataset_hash()},
                            {"tasks", nlohmann::json::array()}};
    for (size_t ti = 0; ti < stream.tasks.size(); ++ti) {
        const auto& task = stream.tasks[ti];
        manifest["tasks"].push_back({{"index", ti + 1},
                                     {"kind", task.name},
                                     {"train_count", task.train.size()},
                                     {"test_count", task.test.size()}});
        for (const char* split : {"train", "test"}) {
            const auto& samples = split == std::string("train") ? task.train : task.test;
            std::vector<std::string> lines;
            lines.reserve(samples.size());
            for (const auto& s : samples) lines.push_back(detail::sample_to_json(s).dump());
            detail::write_lines(dir / ("task" + std::to_string(ti + 1) + "." + split + ".jsonl"), lines);
        }
    }
    std::vector<std::string> pool_lines;
    for (const auto& p : stream.pool)
        pool_lines.push_back(nlohmann::json{{"dish_id", p.dish_id}, {"image", p.image_tokens}}.dump());
    detail::write_lines(dir / "pool.jsonl", pool_lines);
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << '\n';
}

inline TaskStream load_stream(const Tokenizer& tok, const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("stream incomplete: missing " + manifest_path.string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }

    TaskStream stream;
    stream.seed = manifest.at("seed").get<uint64_t>();
    stream.noise_level = manifest.at("noise_level").get<double>();
    stream.num_train_dishes = manifest.at("num_train_dishes").get<int>();
    stream.num_test_dishes = manifest.at("num_test_dishes").get<int>();
    stream.vocab_hash = manifest.at("vocab_hash").get<uint64_t>();
    if (stream.vocab_hash != tok.vocab_hash())
        throw std::runtime_error("dataset was generated with a different vocabulary");

    auto parse_jsonl = [](const std::filesystem::path& path, auto&& per_line) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("stream incomplete: missing " + path.string());
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                per_line(nlohmann::json::parse(line));
            } catch (const nlohmann::json::exception& e) {
                throw std::runtime_error("parse error at " + path.string() + ":" + std::to_string(lineno) + ": " +
                                        e.what());
            }
        }
    };

    const auto& tasks_meta = manifest.at("tasks");
    for (size_t ti = 0; ti < tasks_meta.size(); ++ti) {
        TaskData task;
        task.name = tasks_meta[ti].at("kind").get<std::string>();
        task.kind = task_kind_from_name(task.name);
        for (const char* split : {"train", "test"}) {
            auto& dst = split == std::string("train") ? task.train : task.test;
            parse_jsonl(dir / ("task" + std::to_string(ti + 1) + "." + split + ".jsonl"),
                        [&](const nlohmann::json& j) { dst.push_back(detail::sample_from_json(j)); });
        }
        stream.tasks.push_back(std::move(task));
    }
    parse_jsonl(dir / "pool.jsonl", [&](const nlohmann::json& j) {
        stream.pool.push_back({j.at("dish_id").get<int>(), j.at("image").get<std::vector<int>>()});
    });

    // invariant checks: closed vocabulary, disjoint splits
    const int vs = tok.vocab_size();
    for (const auto& task : stream.tasks) {
        std::set<int> train_ids, test_ids;
        for (const auto& s : task.train) train_ids.insert(s.dish_id);
        for (const auto& s : task.test) test_ids.insert(s.dish_id);
        for (int id : test_ids)
            if (train_ids.contains(id))
                throw std::runtime_error("train/test dish overlap in task " + task.name + ": dish " +
                                        std::to_string(id));
        for (const auto* split : {&task.train, &task.test})
            for (const auto& s : *split)
                for (const auto* v : {&s.prompt_tokens, &s.answer_tokens})
                    for (int id : *v)
                        if (id < 0 || id >= vs)
                            throw std::runtime_error("token id " + std::to_string(id) + " outside vocabulary in task " +
                                                    task.name);
    }
    if (stream.tasks.size() != tasks_meta.size() || stream.tasks.empty())
        throw std::runtime_error("stream incomplete: no tasks loaded");
    return stream;
}

// Pretraining corpus -------------------------------------------------------
//
// Mixed-domain token sequences: visual/word alignment pairs in canonical
// sorted order, comma-joined ingredient lists, recipe-style phrases and
// rendered nutrition patterns, plus plain word salads. No role markers,
// question words or image delimiters appear, so the corpus teaches the
// lexicon and the cross-modal alignment but none of the task formats.
inline std::vector<std::vector<int>> make_pretrain_corpus(const Tokenizer& tok, int num_sequences, Rng& rng) {
    if (num_sequences <= 0) throw std::invalid_argument("make_pretrain_corpus: empty corpus requested");
    std::vector<std::vector<int>> corpus;
    corpus.reserve(static_cast<size_t>(num_sequences));
    const int num_ing_words = static_cast<int>(vocab::ingredients().size());
    for (int i = 0; i < num_sequences; ++i) {
        std::vector<int> seq{tok.bos()};
        const auto kind = rng.uniform_int(0, 9);
        if (kind <= 5) {
            // dish-like construct: shuffled visual tokens then an aligned answer body
            const int n = static_cast<int>(rng.uniform_int(3, 7));
            std::vector<int> all(num_ing_words);
            for (int k = 0; k < num_ing_words; ++k) all[k] = k;
            rng.shuffle(all);
            std::vector<int> ing(all.begin(), all.begin() + n);
            ing = detail::sorted_ingredients_by_word(ing);
            std::vector<int> visuals;
            for (int k : ing) visuals.push_back(tok.visual_id(k));
            rng.shuffle(visuals);
            seq.insert(seq.end(), visuals.begin(), visuals.end());
            if (kind <= 2) {
                const auto body = ingredient_answer_tokens(tok, ing);
                seq.insert(seq.end(), body.begin(), body.end());
            } else if (kind <= 4) {
                const auto body = recipe_answer_tokens(tok, ing);
                seq.insert(seq.end(), body.begin(), body.end());
            } else {
                const auto body = nutrition_answer_tokens(tok, dish_nutrition(ing));
                seq.insert(seq.end(), body.begin(), body.end());
            }
        } else if (kind <= 7) {
            // sorted comma list without visuals
            const int n = static_cast<int>(rng.uniform_int(2, 6));
            std::vector<int> all(num_ing_words);
            for (int k = 0; k < num_ing_words; ++k) all[k] = k;
            rng.shuffle(all);
            std::vector<int> ing(all.begin(), all.begin() + n);
            ing = detail::sorted_ingredients_by_word(ing);
            const auto body = ingredient_answer_tokens(tok, ing);
            seq.insert(seq.end(), body.begin(), body.end());
        } else {
            // word salad over verbs, fillers and digits
            const int n = static_cast<int>(rng.uniform_int(6, 14));
            for (int k = 0; k < n; ++k) {
                const auto pick = rng.uniform_int(0, 3);
                if (pick == 0)
                    seq.push_back(tok.id(vocab::prep_verbs()[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int64_t>(vocab::prep_verbs().size()) - 1))]));
                else if (pick == 1)
                    seq.push_back(tok.id(vocab::filler_words()[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int64_t>(vocab::filler_words().size()) - 1))]));
                else if (pick == 2)
                    seq.push_back(tok.digit(static_cast<int>(rng.uniform_int(0, 9))));
                else
                    seq.push_back(tok.ingredient_id(static_cast<int>(rng.uniform_int(0, num_ing_words - 1))));
            }
        }
        seq.push_back(tok.eos());
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

}  // namespace foodcl
