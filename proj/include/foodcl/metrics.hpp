#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "foodcl/foodstream.hpp"
#include "foodcl/replay.hpp"
#include "foodcl/tokenizer.hpp"

namespace foodcl {

// |pred n truth| / |pred u truth|; an empty truth set is an evaluation bug.
inline double iou(const std::set<std::string>& pred, const std::set<std::string>& truth) {
    if (truth.empty()) throw std::invalid_argument("iou: empty truth set");
    if (pred.empty()) return 0.0;
    size_t inter = 0;
    for (const auto& p : pred)
        if (truth.contains(p)) ++inter;
    const size_t uni = pred.size() + truth.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

// n-grams packed into uint64 keys (16 bits per token id, n <= 4)
inline uint64_t ngram_key(std::span<const int> toks, size_t start, int n) {
    uint64_t key = static_cast<uint64_t>(n);
    for (int i = 0; i < n; ++i) key = (key << 16) | (static_cast<uint64_t>(toks[start + static_cast<size_t>(i)]) + 1);
    return key;
}

}  // namespace detail

// Sentence BLEU over token ids: clipped n-gram precisions n=1..4 under floor
// smoothing (zero precisions become 1/(2|pred|)), geometric mean, brevity
// penalty exp(1-|ref|/|pred|) when the candidate is shorter, scaled to 100.
inline double bleu(std::span<const int> pred, std::span<const int> ref) {
    if (ref.empty()) throw std::invalid_argument("bleu: empty reference");
    if (pred.empty()) return 0.0;
    for (int id : pred)
        if (id < 0 || id > 0xfffe) throw std::invalid_argument("bleu: token id out of range");

    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        double precision;
        if (static_cast<int>(pred.size()) < n) {
            precision = 1.0 / (2.0 * static_cast<double>(pred.size()));
        } else {
            std::map<uint64_t, int> ref_counts;
            if (static_cast<int>(ref.size()) >= n)
                for (size_t i = 0; i + static_cast<size_t>(n) <= ref.size(); ++i) ++ref_counts[detail::ngram_key(ref, i, n)];
            std::map<uint64_t, int> pred_counts;
            for (size_t i = 0; i + static_cast<size_t>(n) <= pred.size(); ++i) ++pred_counts[detail::ngram_key(pred, i, n)];
            int matched = 0, total = 0;
            for (const auto& [key, count] : pred_counts) {
                total += count;
                auto it = ref_counts.find(key);
                if (it != ref_counts.end()) matched += std::min(count, it->second);
            }
            precision = matched > 0 ? static_cast<double>(matched) / total : 1.0 / (2.0 * static_cast<double>(pred.size()));
        }
        log_sum += std::log(precision);
    }
    const double geo = std::exp(0.25 * log_sum);
    const double bp = pred.size() < ref.size()
                          ? std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(pred.size()))
                          : 1.0;
    return 100.0 * geo * bp;
}

// Rouge-L: LCS-based F-measure (beta = 1), scaled to 100.
inline double rouge_l(std::span<const int> pred, std::span<const int> ref) {
    if (ref.empty()) throw std::invalid_argument("rouge_l: empty reference");
    if (pred.empty()) return 0.0;
    const size_t n = pred.size(), m = ref.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (pred[i - 1] == ref[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const int lcs = prev[m];
    if (lcs == 0) return 0.0;
    const double p = static_cast<double>(lcs) / static_cast<double>(n);
    const double r = static_cast<double>(lcs) / static_cast<double>(m);
    return 100.0 * (2.0 * p * r) / (p + r);
}

// 100 * (before - after) / before
inline double relative_drop(double before, double after) {
    if (!(before > 0.0)) throw std::invalid_argument("relative_drop: before must be > 0");
    return 100.0 * (before - after) / before;
}

// ---- answer parsing for the IoU column -------------------------------------

// "calories : 5 2 0 , fat : 3 8 , ..." -> {"calories:520", "fat:38", ...}
inline std::set<std::string> nutrition_kv_set(const std::string& text) {
    std::set<std::string> out;
    std::istringstream ss(text);
    std::string w;
    std::string key, digits;
    int state = 0;  // 0: want key, 1: want colon, 2: reading digits
    auto flush = [&]() {
        if (!key.empty() && !digits.empty()) out.insert(key + ":" + digits);
        key.clear();
        digits.clear();
    };
    while (ss >> w) {
        const bool is_key = w == "calories" || w == "fat" || w == "protein";
        const bool is_digit = w.size() == 1 && w[0] >= '0' && w[0] <= '9';
        if (is_key) {
            flush();
            key = w;
            state = 1;
        } else if (w == ":" && state == 1) {
            state = 2;
        } else if (is_digit && state == 2) {
            digits += w;
        } else {
            flush();
            state = 0;
        }
    }
    flush();
    return out;
}

// Task-appropriate item set for the IoU column: voted items for set-type
// answers, key-value pairs for nutrition, distinct content words for
// recipes.
inline std::set<std::string> answer_item_set(TaskKind kind, const std::string& answer_text) {
    switch (kind) {
        case TaskKind::kIngredient: return parse_set_answer(answer_text);
        case TaskKind::kNutrition: return nutrition_kv_set(answer_text);
        case TaskKind::kRecipe: {
            std::set<std::string> items;
            std::istringstream ss(answer_text);
            std::string w;
            while (ss >> w)
                if (w != "," && w != "." && w != ":") items.insert(w);
            return items;
        }
    }
    throw std::invalid_argument("answer_item_set: bad task kind");
}

// ---- report -----------------------------------------------------------------

struct PredRecord {
    int64_t sample_id{0};
    int dish_id{0};
    std::vector<int> pred_tokens;   // without <eos>
    std::vector<int> truth_tokens;  // without <eos>
};

struct CellMetrics {
    double iou{0.0};
    double bleu{0.0};
    double rouge_l{0.0};
    int count{0};
};

struct MetricsReport {
    std::string method;
    uint64_t seed{0};
    uint64_t config_hash{0};
    uint64_t dataset_hash{0};
    std::vector<std::string> task_names;
    // grid[s][t]: metrics of task t+1 measured after stage s+1; valid for t <= s
    std::vector<std::vector<CellMetrics>> grid;

    struct Drop {
        int task_index{0};       // 1-based
        std::string metric;
        double first_value{0.0};  // at the stage the task was learned
        double final_value{0.0};  // at the last stage
        double drop_pct{0.0};
        bool defined{true};       // false when first_value <= 0
    };
    std::vector<Drop> drops;

    const CellMetrics& cell(int stage, int task) const {
        if (stage < 1 || stage > static_cast<int>(grid.size()) || task < 1 || task > stage)
            throw std::out_of_range("report: no cell for stage " + std::to_string(stage) + " task " +
                                    std::to_string(task));
        return grid[static_cast<size_t>(stage) - 1][static_cast<size_t>(task) - 1];
    }

    nlohmann::json to_json() const {
        nlohmann::json cells = nlohmann::json::array();
        for (size_t s = 0; s < grid.size(); ++s)
            for (size_t t = 0; t < grid[s].size(); ++t)
                for (const auto& [metric, value] : std::initializer_list<std::pair<const char*, double>>{
                         {"iou", grid[s][t].iou}, {"bleu", grid[s][t].bleu}, {"rouge_l", grid[s][t].rouge_l}})
                    cells.push_back({{"stage", s + 1},
                                     {"task", t + 1},
                                     {"task_name", task_names.at(t)},
                                     {"metric", metric},
                                     {"value", value},
                                     {"count", grid[s][t].count}});
        nlohmann::json jd = nlohmann::json::array();
        for (const auto& d : drops)
            jd.push_back({{"task", d.task_index},
                          {"metric", d.metric},
                          {"first", d.first_value},
                          {"final", d.final_value},
                          {"drop_pct", d.drop_pct},
                          {"defined", d.defined}});
        return {{"method", method},   {"seed", seed},       {"config_hash", config_hash},
                {"dataset_hash", dataset_hash}, {"task_names", task_names}, {"cells", cells},
                {"drops", jd}};
    }

    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport r;
        r.method = j.at("method").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        r.config_hash = j.at("config_hash").get<uint64_t>();
        r.dataset_hash = j.at("dataset_hash").get<uint64_t>();
        r.task_names = j.at("task_names").get<std::vector<std::string>>();
        const size_t stages = r.task_names.size();
        r.grid.resize(stages);
        for (size_t s = 0; s < stages; ++s) r.grid[s].resize(std::min(s + 1, r.task_names.size()));
        for (const auto& c : j.at("cells")) {
            const size_t s = c.at("stage").get<size_t>() - 1;
            const size_t t = c.at("task").get<size_t>() - 1;
            auto& cell = r.grid.at(s).at(t);
            const auto metric = c.at("metric").get<std::string>();
            const double v = c.at("value").get<double>();
            if (metric == "iou")
                cell.iou = v;
            else if (metric == "bleu")
                cell.bleu = v;
            else if (metric == "rouge_l")
                cell.rouge_l = v;
            cell.count = c.at("count").get<int>();
        }
        for (const auto& d : j.at("drops")) {
            MetricsReport::Drop drop;
            drop.task_index = d.at("task").get<int>();
            drop.metric = d.at("metric").get<std::string>();
            drop.first_value = d.at("first").get<double>();
            drop.final_value = d.at("final").get<double>();
            drop.drop_pct = d.at("drop_pct").get<double>();
            drop.defined = d.at("defined").get<bool>();
            r.drops.push_back(drop);
        }
        return r;
    }

    // Delimiter-separated rows, one line per stage, metric columns per task
    // learned so far — the comparison-table layout.
    std::string to_tsv() const {
        std::ostringstream os;
        os << "method\tseed\tstage";
        for (size_t t = 0; t < task_names.size(); ++t)
            os << "\t" << task_names[t] << ".iou\t" << task_names[t] << ".bleu\t" << task_names[t] << ".rouge_l";
        os << "\n";
        os.setf(std::ios::fixed);
        os.precision(4);
        for (size_t s = 0; s < grid.size(); ++s) {
            os << method << "\t" << seed << "\t" << (s + 1);
            for (size_t t = 0; t < task_names.size(); ++t) {
                if (t < grid[s].size())
                    os << "\t" << grid[s][t].iou * 100.0 << "\t" << grid[s][t].bleu << "\t" << grid[s][t].rouge_l;
                else
                    os << "\t-\t-\t-";
            }
            os << "\n";
        }
        return os.str();
    }

    std::string to_text() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(2);
        os << "== " << method << " (seed " << seed << ") ==\n";
        for (size_t s = 0; s < grid.size(); ++s) {
            os << "after stage " << (s + 1) << " [" << task_names.at(s) << "]:\n";
            for (size_t t = 0; t < grid[s].size(); ++t) {
                const auto& c = grid[s][t];
                os << "  task " << (t + 1) << " (" << task_names[t] << "): IoU " << c.iou * 100.0 << "  BLEU "
                   << c.bleu << "  Rouge-L " << c.rouge_l << "  (n=" << c.count << ")\n";
            }
        }
        if (!drops.empty()) {
            os << "relative drops (first stage -> final stage):\n";
            for (const auto& d : drops) {
                os << "  task " << d.task_index << " " << d.metric << ": " << d.first_value << " -> " << d.final_value;
                if (d.defined)
                    os << "  (drop " << d.drop_pct << "%)\n";
                else
                    os << "  (drop undefined)\n";
            }
        }
        return os.str();
    }
};

struct ReportInputs {
    std::string method;
    uint64_t seed{0};
    uint64_t config_hash{0};
    uint64_t dataset_hash{0};
    std::vector<std::string> task_names;
    std::vector<TaskKind> task_kinds;
    // predictions[stage-1][task-1], valid for task <= stage
    std::vector<std::vector<std::vector<PredRecord>>> predictions;
    std::vector<size_t> expected_counts;  // test-set size per task
};

// Populates the stage x task grid (macro-averaged sentence metrics) plus the
// relative-drop table.
inline MetricsReport build_report(const Tokenizer& tok, const ReportInputs& in) {
    MetricsReport rep;
    rep.method = in.method;
    rep.seed = in.seed;
    rep.config_hash = in.config_hash;
    rep.dataset_hash = in.dataset_hash;
    rep.task_names = in.task_names;
    const size_t stages = in.predictions.size();
    for (size_t s = 0; s < stages; ++s) {
        if (in.predictions[s].size() != s + 1)
            throw std::invalid_argument("build_report: stage " + std::to_string(s + 1) + " must cover tasks 1.." +
                                        std::to_string(s + 1));
        std::vector<CellMetrics> row;
        for (size_t t = 0; t <= s; ++t) {
            const auto& records = in.predictions[s][t];
            if (t < in.expected_counts.size() && records.size() != in.expected_counts[t])
                throw std::invalid_argument("build_report: incomplete predictions for stage " + std::to_string(s + 1) +
                                            " task " + std::to_string(t + 1));
            CellMetrics cell;
            for (const auto& r : records) {
                const std::string pred_text = tok.decode(r.pred_tokens);
                const std::string truth_text = tok.decode(r.truth_tokens);
                const auto truth_set = answer_item_set(in.task_kinds.at(t), truth_text);
                cell.iou += iou(answer_item_set(in.task_kinds.at(t), pred_text), truth_set);
                cell.bleu += bleu(r.pred_tokens, r.truth_tokens);
                cell.rouge_l += rouge_l(r.pred_tokens, r.truth_tokens);
            }
            if (!records.empty()) {
                cell.iou /= static_cast<double>(records.size());
                cell.bleu /= static_cast<double>(records.size());
                cell.rouge_l /= static_cast<double>(records.size());
            }
            cell.count = static_cast<int>(records.size());
            row.push_back(cell);
        }
        rep.grid.push_back(std::move(row));
    }

    if (!rep.grid.empty()) {
        const size_t last = rep.grid.size() - 1;
        for (size_t t = 0; t < rep.grid[last].size(); ++t) {
            const CellMetrics& first = rep.grid[t][t];  // stage t+1 is where task t+1 was learned
            const CellMetrics& fin = rep.grid[last][t];
            for (const auto& [name, fv, lv] :
                 std::initializer_list<std::tuple<const char*, double, double>>{{"iou", first.iou * 100.0, fin.iou * 100.0},
                                                                                 {"bleu", first.bleu, fin.bleu},
                                                                                 {"rouge_l", first.rouge_l, fin.rouge_l}}) {
                MetricsReport::Drop d;
                d.task_index = static_cast<int>(t) + 1;
                d.metric = name;
                d.first_value = fv;
                d.final_value = lv;
                d.defined = fv > 0.0;
                d.drop_pct = d.defined ? relative_drop(fv, lv) : 0.0;
                rep.drops.push_back(d);
            }
        }
    }
    return rep;
}

}  // namespace foodcl
