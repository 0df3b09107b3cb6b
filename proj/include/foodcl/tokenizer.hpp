#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "foodcl/rng.hpp"

namespace foodcl {

namespace vocab {

inline const std::vector<std::string>& ingredients() {
    static const std::vector<std::string> kList = {
        "beef",     "pork",    "chicken",  "salmon",  "shrimp",  "tofu",     "egg",      "rice",
        "noodle",   "potato",  "tomato",   "onion",   "garlic",  "ginger",   "carrot",   "pepper",
        "broccoli", "spinach", "mushroom", "corn",    "bean",    "pea",      "cabbage",  "lettuce",
        "cucumber", "zucchini", "eggplant", "pumpkin", "apple",   "lemon",    "butter",   "cheese",
        "milk",     "cream",   "flour",    "sugar",   "salt",    "honey",    "basil",    "cilantro"};
    return kList;
}

inline const std::vector<std::string>& prep_verbs() {
    static const std::vector<std::string> kList = {"chop",  "slice", "dice",  "rinse", "crush", "grate",
                                                   "peel",  "trim",  "whisk", "cube",  "shred", "mince"};
    return kList;
}

inline const std::vector<std::string>& cook_verbs() {
    static const std::vector<std::string> kList = {"fry", "boil", "grill", "roast", "steam", "saute", "simmer", "bake"};
    return kList;
}

inline const std::vector<std::string>& finish_words() {
    static const std::vector<std::string> kList = {"golden", "tender", "fragrant", "soft"};
    return kList;
}

inline const std::vector<std::string>& style_words() {
    static const std::vector<std::string> kList = {"warm", "fresh", "hot", "chilled"};
    return kList;
}

inline const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> kList = {
        "pan",    "pot",    "oven",   "bowl",   "heat",   "stir",     "mix",    "season", "taste",  "add",
        "then",   "well",   "minutes", "plate",  "table",  "meal",     "flavor", "aroma",  "sauce",  "garnish",
        "knife",  "board",  "wash",   "cool",   "rest",   "blend",    "fold",   "pour",   "drain",  "toss",
        "sprinkle", "squeeze", "marinate", "grain", "spice", "herb",   "oil",    "water",  "broth",  "stock"};
    return kList;
}

// Per-ingredient nutrition contributions; dish totals are exact sums over
// the ingredient set, so the mapping is a fixed linear function.
struct NutritionEntry {
    int calories;
    int fat;
    int protein;
};

inline NutritionEntry ingredient_nutrition(int ingredient_index) {
    const int i = ingredient_index;
    return {30 + (i * 37) % 140, 1 + (i * 17) % 19, 2 + (i * 23) % 24};
}

}  // namespace vocab

// Closed-vocabulary word tokenizer with a bijective id<->token map. The
// vocabulary is fixed at construction; encoding an unknown word is an error
// rather than an <unk> fallback.
class Tokenizer {
public:
    static Tokenizer unifood_mini() {
        Tokenizer t;
        auto put = [&t](const std::string& w) {
            if (!t.token_to_id_.contains(w)) {
                t.token_to_id_.emplace(w, static_cast<int>(t.id_to_token_.size()));
                t.id_to_token_.push_back(w);
            }
        };
        for (const char* c : {"<bos>", "<eos>", "<user>", "<assistant>", "<img>", "</img>"}) put(c);
        for (const char* c : {",", ".", ":"}) put(c);
        for (int d = 0; d <= 9; ++d) put(std::string(1, static_cast<char>('0' + d)));
        for (const auto& w : vocab::ingredients()) put(w);
        for (const auto& w : vocab::ingredients()) put("v_" + w);
        for (const char* c : {"calories", "fat", "protein"}) put(c);
        for (const char* c : {"list", "the", "ingredients", "in", "this", "dish", "describe", "cooking", "steps",
                              "for", "estimate", "nutrition", "facts", "of"})
            put(c);
        for (const auto& w : vocab::prep_verbs()) put(w);
        for (const auto& w : vocab::cook_verbs()) put(w);
        for (const auto& w : vocab::finish_words()) put(w);
        for (const auto& w : vocab::style_words()) put(w);
        for (const auto& w : vocab::filler_words()) put(w);
        for (const char* c : {"combine", "and", "until", "serve", "first", "prepare"}) put(c);
        // round the vocabulary up with explicit reserved slots
        while (t.id_to_token_.size() < 224) {
            put("<reserved_" + std::to_string(t.id_to_token_.size()) + ">");
        }
        return t;
    }

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }

    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        if (it == token_to_id_.end()) throw std::out_of_range("tokenizer: unknown token '" + token + "'");
        return it->second;
    }

    bool contains(const std::string& token) const { return token_to_id_.contains(token); }

    const std::string& token(int id) const {
        if (id < 0 || id >= vocab_size())
            throw std::out_of_range("tokenizer: id " + std::to_string(id) + " outside vocabulary");
        return id_to_token_[static_cast<size_t>(id)];
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) out.push_back(id(w));
        return out;
    }

    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

    uint64_t vocab_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& w : id_to_token_) {
            h = fnv1a64(w.data(), w.size(), h);
            const char sep = '\x1f';
            h = fnv1a64(&sep, 1, h);
        }
        return h;
    }

    // control ids, resolved once
    int bos() const { return 0; }
    int eos() const { return 1; }
    int user() const { return 2; }
    int assistant() const { return 3; }
    int img_open() const { return 4; }
    int img_close() const { return 5; }
    int comma() const { return 6; }
    int period() const { return 7; }
    int colon() const { return 8; }
    int digit(int d) const { return 9 + d; }
    int ingredient_id(int ingredient_index) const { return 19 + ingredient_index; }
    int visual_id(int ingredient_index) const { return 19 + static_cast<int>(vocab::ingredients().size()) + ingredient_index; }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace foodcl
