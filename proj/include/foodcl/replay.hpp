#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "foodcl/backbone.hpp"
#include "foodcl/foodstream.hpp"
#include "foodcl/matrix.hpp"
#include "foodcl/rng.hpp"
#include "foodcl/tokenizer.hpp"

namespace foodcl {

struct ReplayConfig {
    int n{5};                    // generations per prompt
    int vote_threshold{4};       // t in the voting rule
    bool strict_majority{false}; // count > t instead of >= t
    double proportion{0.05};     // replay fraction of the current task size
    double temperature{0.8};
    bool quality_enhance{true};  // off: take raw candidate 0, no voting/consensus
    int max_new_tokens{48};

    void validate() const {
        if (n < 1) throw std::invalid_argument("replay: n must be >= 1");
        if (vote_threshold < 1 || vote_threshold > n)
            throw std::invalid_argument("replay: need 1 <= t <= n, got t=" + std::to_string(vote_threshold) +
                                        " n=" + std::to_string(n));
        if (proportion < 0.0 || proportion > 1.0)
            throw std::invalid_argument("replay: proportion must be in [0, 1]");
        if (!(temperature > 0.0)) throw std::invalid_argument("replay: temperature must be > 0");
    }
};

// ---- set answers ---------------------------------------------------------

// Comma-separated items: split, trim, lowercase, drop empties, deduplicate.
inline std::set<std::string> parse_set_answer(const std::string& text) {
    std::set<std::string> items;
    std::string current;
    auto flush = [&]() {
        size_t b = current.find_first_not_of(" \t");
        size_t e = current.find_last_not_of(" \t");
        if (b != std::string::npos) {
            std::string item = current.substr(b, e - b + 1);
            for (auto& c : item) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            // collapse interior whitespace runs
            std::string clean;
            bool prev_space = false;
            for (char c : item) {
                const bool sp = c == ' ' || c == '\t';
                if (sp && prev_space) continue;
                clean += sp ? ' ' : c;
                prev_space = sp;
            }
            items.insert(clean);
        }
        current.clear();
    };
    for (char c : text) {
        if (c == ',')
            flush();
        else
            current += c;
    }
    flush();
    return items;
}

struct EnhancedSet {
    std::set<std::string> items;
    double confidence{0.0};  // min vote fraction over kept items; 0 when empty
};

// Threshold majority voting: keep items whose vote count reaches the
// threshold (>= t; strict mode uses > t).
inline EnhancedSet enhance_set(const std::vector<std::set<std::string>>& candidates, int threshold,
                               bool strict = false) {
    const int n = static_cast<int>(candidates.size());
    if (n < 1) throw std::invalid_argument("enhance_set: no candidates");
    if (threshold < 1 || threshold > n)
        throw std::invalid_argument("enhance_set: need 1 <= t <= n, got t=" + std::to_string(threshold) +
                                    " n=" + std::to_string(n));
    std::map<std::string, int> votes;
    for (const auto& cand : candidates)
        for (const auto& item : cand) ++votes[item];
    EnhancedSet out;
    out.confidence = 1.0;
    for (const auto& [item, count] : votes) {
        const bool keep = strict ? count > threshold : count >= threshold;
        if (keep) {
            out.items.insert(item);
            out.confidence = std::min(out.confidence, static_cast<double>(count) / n);
        }
    }
    if (out.items.empty()) out.confidence = 0.0;
    return out;
}

// ---- text answers --------------------------------------------------------

inline constexpr int kEmbedDim = 256;

// Deterministic hashed character-trigram + word-unigram frequency embedding,
// L2-normalized. Stands in for a learned sentence embedder: near-duplicate
// texts score higher cosine than unrelated texts, which is all the
// consensus rule needs.
inline std::vector<double> embed_text(const std::string& text) {
    std::string norm;
    bool prev_space = true;
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        const bool sp = std::isspace(c) != 0;
        if (sp && prev_space) continue;
        norm += sp ? ' ' : static_cast<char>(std::tolower(c));
        prev_space = sp;
    }
    while (!norm.empty() && norm.back() == ' ') norm.pop_back();
    if (norm.empty()) throw std::invalid_argument("embed_text: empty text");

    std::vector<double> v(kEmbedDim, 0.0);
    for (size_t i = 0; i + 3 <= norm.size(); ++i) {
        uint64_t h = fnv1a64("t:");
        h = fnv1a64(norm.data() + i, 3, h);
        v[h % kEmbedDim] += 1.0;
    }
    std::string word;
    auto flush_word = [&]() {
        if (!word.empty()) {
            uint64_t h = fnv1a64("w:");
            h = fnv1a64(word.data(), word.size(), h);
            v[h % kEmbedDim] += 1.0;
            word.clear();
        }
    };
    for (char c : norm) {
        if (c == ' ')
            flush_word();
        else
            word += c;
    }
    flush_word();

    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

struct ConsensusResult {
    int index{0};
    double confidence{1.0};
};

// Pairwise-cosine consensus: per-row mean similarity to all other
// candidates (diagonal excluded); the highest-confidence row wins, ties
// break to the lowest index. Unembeddable candidates are dropped from both
// rows and columns.
inline ConsensusResult consensus_select(const std::vector<std::string>& candidates) {
    if (candidates.empty()) throw std::invalid_argument("consensus_select: no candidates");
    if (candidates.size() == 1) return {0, 1.0};  // degenerate bundle

    std::vector<int> valid;
    std::vector<std::vector<double>> embeddings;
    for (size_t i = 0; i < candidates.size(); ++i) {
        try {
            embeddings.push_back(embed_text(candidates[i]));
            valid.push_back(static_cast<int>(i));
        } catch (const std::invalid_argument&) {
            // excluded
        }
    }
    if (valid.size() < 2)
        throw std::invalid_argument("consensus_select: fewer than 2 embeddable candidates");

    const size_t m = valid.size();
    int best_original = -1;
    double best_conf = -2.0;
    for (size_t i = 0; i < m; ++i) {
        double sum = 0.0;
        for (size_t j = 0; j < m; ++j) {
            if (j == i) continue;
            sum += cosine_similarity(embeddings[i], embeddings[j]);
        }
        const double conf = sum / static_cast<double>(m - 1);
        if (conf > best_conf) {
            best_conf = conf;
            best_original = valid[i];
        }
    }
    return {best_original, best_conf};
}

// ---- buffer construction ---------------------------------------------------

struct GenerationBundle {
    int64_t bundle_id{0};
    TaskKind kind{TaskKind::kIngredient};
    std::vector<int> prompt_tokens;
    std::vector<std::string> candidates;  // exactly n, in generation order
    uint64_t seed{0};
};

struct PseudoSample {
    int64_t bundle_id{0};
    TaskKind task{TaskKind::kIngredient};
    int dish_id{0};
    std::vector<int> prompt_tokens;
    std::vector<int> answer_tokens;  // enhanced answer, <eos>-terminated
    std::string enhanced_text;
    double confidence{0.0};
    std::string selection_rule;            // "vote" | "consensus" | "raw"
    std::vector<std::string> raw_candidates;  // retained for audit and QE-off ablation
};

namespace detail {

inline std::vector<int> encode_answer_text(const Tokenizer& tok, const std::string& text) {
    std::vector<int> out = tok.encode(text);
    out.push_back(tok.eos());
    return out;
}

inline std::string strip_eos_text(const Tokenizer& tok, std::vector<int> tokens) {
    while (!tokens.empty() && tokens.back() == tok.eos()) tokens.pop_back();
    return tok.decode(tokens);
}

}  // namespace detail

// Quality enhancement for one bundle. Set-type answers go through threshold
// voting (falling back to the top-voted items when nothing clears the
// threshold); text answers go through embedding consensus, falling back to
// the first candidate when fewer than two are embeddable.
inline PseudoSample enhance_bundle(const Tokenizer& tok, const GenerationBundle& bundle, const ReplayConfig& cfg) {
    PseudoSample ps;
    ps.bundle_id = bundle.bundle_id;
    ps.task = bundle.kind;
    ps.prompt_tokens = bundle.prompt_tokens;
    ps.raw_candidates = bundle.candidates;

    if (!cfg.quality_enhance) {
        ps.selection_rule = "raw";
        ps.enhanced_text = bundle.candidates.at(0);
        ps.confidence = 0.0;
        ps.answer_tokens = detail::encode_answer_text(tok, ps.enhanced_text);
        return ps;
    }

    if (task_uses_set_answers(bundle.kind)) {
        std::vector<std::set<std::string>> sets;
        for (const auto& c : bundle.candidates) sets.push_back(parse_set_answer(c));
        EnhancedSet enhanced = enhance_set(sets, cfg.vote_threshold, cfg.strict_majority);
        if (enhanced.items.empty()) {
            // nothing cleared the threshold; keep the top-voted items so the
            // buffer quota stays exact
            std::map<std::string, int> votes;
            for (const auto& s : sets)
                for (const auto& item : s) ++votes[item];
            int best = 0;
            for (const auto& [item, count] : votes) best = std::max(best, count);
            for (const auto& [item, count] : votes)
                if (count == best) enhanced.items.insert(item);
            enhanced.confidence = votes.empty() ? 0.0 : static_cast<double>(best) / cfg.n;
        }
        ps.selection_rule = "vote";
        ps.confidence = enhanced.confidence;
        std::string joined;
        for (const auto& item : enhanced.items) {
            if (!joined.empty()) joined += " , ";
            joined += item;
        }
        ps.enhanced_text = joined;
        ps.answer_tokens = detail::encode_answer_text(tok, joined);
        return ps;
    }

    ps.selection_rule = "consensus";
    try {
        const ConsensusResult sel = consensus_select(bundle.candidates);
        ps.enhanced_text = bundle.candidates.at(static_cast<size_t>(sel.index));
        ps.confidence = std::clamp(sel.confidence, 0.0, 1.0);
    } catch (const std::invalid_argument&) {
        ps.enhanced_text = bundle.candidates.at(0);
        ps.confidence = 0.0;
        ps.selection_rule = "raw";
    }
    ps.answer_tokens = detail::encode_answer_text(tok, ps.enhanced_text);
    return ps;
}

// Pseudo-sample quota per previous task: round(proportion * current task
// size) in total, split evenly with the remainder going to the earliest
// tasks.
inline std::vector<int> replay_quota(double proportion, size_t current_task_size, int num_previous_tasks) {
    if (num_previous_tasks <= 0) return {};
    const auto total = static_cast<long long>(std::llround(proportion * static_cast<double>(current_task_size)));
    std::vector<int> counts(static_cast<size_t>(num_previous_tasks), 0);
    for (int i = 0; i < num_previous_tasks; ++i) {
        counts[static_cast<size_t>(i)] = static_cast<int>(total / num_previous_tasks);
        if (i < total % num_previous_tasks) ++counts[static_cast<size_t>(i)];
    }
    return counts;
}

// Builds the quality-enhanced replay buffer for stage `stage` (1-based):
// prompts are drawn from the reserved unlabeled image pool of each previous
// task, answered n times by the current composed model, then enhanced.
// Ground-truth answers of previous tasks are never touched.
inline std::vector<PseudoSample> build_replay_buffer(const Tokenizer& tok, const TaskStream& stream, int stage,
                                                     size_t current_task_size, const InferenceModel& model_view,
                                                     const ReplayConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (stage < 1 || stage > static_cast<int>(stream.tasks.size()))
        throw std::invalid_argument("build_replay_buffer: bad stage " + std::to_string(stage));
    std::vector<PseudoSample> buffer;
    if (stage == 1) return buffer;
    if (stream.pool.empty()) throw std::runtime_error("build_replay_buffer: dataset has no reserved image pool");

    const auto counts = replay_quota(cfg.proportion, current_task_size, stage - 1);
    Rng root = Rng(seed).derive("replay", static_cast<uint64_t>(stage));
    int64_t bundle_id = static_cast<int64_t>(stage) * 1000000;

    for (int prev = 0; prev < stage - 1; ++prev) {
        const TaskKind kind = stream.tasks[static_cast<size_t>(prev)].kind;
        const int count = counts[static_cast<size_t>(prev)];
        std::vector<size_t> pool_order(stream.pool.size());
        for (size_t i = 0; i < pool_order.size(); ++i) pool_order[i] = i;
        Rng pick = root.derive("pool", static_cast<uint64_t>(prev));
        pick.shuffle(pool_order);

        for (int j = 0; j < count; ++j) {
            const PoolEntry& entry = stream.pool[pool_order[static_cast<size_t>(j) % pool_order.size()]];
            GenerationBundle bundle;
            bundle.bundle_id = bundle_id++;
            bundle.kind = kind;
            bundle.prompt_tokens.push_back(tok.bos());
            bundle.prompt_tokens.push_back(tok.user());
            bundle.prompt_tokens.insert(bundle.prompt_tokens.end(), entry.image_tokens.begin(),
                                        entry.image_tokens.end());
            const auto q = question_tokens(tok, kind);
            bundle.prompt_tokens.insert(bundle.prompt_tokens.end(), q.begin(), q.end());
            bundle.prompt_tokens.push_back(tok.assistant());

            GenOptions gopts;
            gopts.temperature = cfg.temperature;
            gopts.max_new_tokens = cfg.max_new_tokens;
            gopts.eos_id = tok.eos();
            for (int i = 0; i < cfg.n; ++i) {
                gopts.seed = root.derive("gen", static_cast<uint64_t>(prev),
                                         static_cast<uint64_t>(j) * 131 + static_cast<uint64_t>(i))
                                 .seed();
                const GenResult gen = model_view.generate(bundle.prompt_tokens, gopts);
                bundle.candidates.push_back(detail::strip_eos_text(tok, gen.tokens));
            }
            PseudoSample ps = enhance_bundle(tok, bundle, cfg);
            ps.dish_id = entry.dish_id;
            buffer.push_back(std::move(ps));
        }
    }
    return buffer;
}

// Line-delimited persistence; raw candidates are retained for audit and the
// QE-off ablation.
inline void save_replay_buffer(const std::vector<PseudoSample>& buffer, const std::filesystem::path& path) {
    std::vector<nlohmann::json> records;
    records.reserve(buffer.size());
    for (const auto& ps : buffer) {
        records.push_back({{"bundle_id", ps.bundle_id},
                           {"task", task_kind_name(ps.task)},
                           {"dish_id", ps.dish_id},
                           {"prompt", ps.prompt_tokens},
                           {"raw_candidates", ps.raw_candidates},
                           {"enhanced", ps.enhanced_text},
                           {"answer", ps.answer_tokens},
                           {"confidence", ps.confidence},
                           {"rule", ps.selection_rule}});
    }
    save_jsonl(records, path);
}

inline std::vector<PseudoSample> load_replay_buffer(const std::filesystem::path& path) {
    std::vector<PseudoSample> buffer;
    for (const auto& j : load_jsonl(path)) {
        PseudoSample ps;
        ps.bundle_id = j.at("bundle_id").get<int64_t>();
        ps.task = task_kind_from_name(j.at("task").get<std::string>());
        ps.dish_id = j.at("dish_id").get<int>();
        ps.prompt_tokens = j.at("prompt").get<std::vector<int>>();
        ps.raw_candidates = j.at("raw_candidates").get<std::vector<std::string>>();
        ps.enhanced_text = j.at("enhanced").get<std::string>();
        ps.answer_tokens = j.at("answer").get<std::vector<int>>();
        ps.confidence = j.at("confidence").get<double>();
        ps.selection_rule = j.at("rule").get<std::string>();
        buffer.push_back(std::move(ps));
    }
    return buffer;
}

}  // namespace foodcl
