#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "foodcl/matrix.hpp"
#include "foodcl/rng.hpp"

namespace foodcl {

// Only attention query and value projections carry adapters.
enum class SiteKind { kQuery, kValue };

struct SiteId {
    int layer{0};
    SiteKind kind{SiteKind::kQuery};

    bool operator==(const SiteId&) const = default;

    std::string str() const {
        return "l" + std::to_string(layer) + (kind == SiteKind::kQuery ? ".q" : ".v");
    }
};

inline SiteId site_from_str(const std::string& s) {
    const auto dot = s.find('.');
    if (s.empty() || s[0] != 'l' || dot == std::string::npos || dot + 1 >= s.size())
        throw std::invalid_argument("bad site id '" + s + "'");
    SiteId id;
    id.layer = std::stoi(s.substr(1, dot - 1));
    const std::string k = s.substr(dot + 1);
    if (k == "q")
        id.kind = SiteKind::kQuery;
    else if (k == "v")
        id.kind = SiteKind::kValue;
    else
        throw std::invalid_argument("bad site kind in '" + s + "'");
    return id;
}

// Low-rank pair attached to one frozen projection. The update the adapter
// contributes is delta_w = b * a with a (r x k) and b (d x r); b starts at
// zero so a fresh adapter is an exact no-op.
struct LoRAAdapter {
    SiteId site;
    int rank{0};
    Matrix a;  // r x k
    Matrix b;  // d x r
};

inline LoRAAdapter make_adapter(SiteId site, int rank, int out_dim, int in_dim, Rng& rng, double a_std = 0.1) {
    if (rank < 1) throw std::invalid_argument("make_adapter: rank must be >= 1");
    if (rank > std::min(out_dim, in_dim))
        throw std::invalid_argument("make_adapter: rank " + std::to_string(rank) + " exceeds min(d,k)");
    LoRAAdapter ad;
    ad.site = site;
    ad.rank = rank;
    ad.a = Matrix::randn(rank, in_dim, rng, a_std);
    ad.b = Matrix::zeros(out_dim, rank);
    return ad;
}

inline uint64_t adapter_checksum(const LoRAAdapter& ad) {
    uint64_t h = fnv1a64(ad.site.str());
    h = hash_combine(h, static_cast<uint64_t>(ad.rank));
    h = hash_combine(h, matrix_checksum(ad.a));
    return hash_combine(h, matrix_checksum(ad.b));
}

// How one adapter participates in a forward pass.
struct AdapterBinding {
    LoRAAdapter* adapter{nullptr};
    bool trainable{false};
};

// Subspace overlap between a new specialized A and the previous cooperative
// A: the r x r product a_spec * a_coop^T. All-zero exactly when every row of
// a_spec is orthogonal to every row of a_coop.
inline Matrix orthogonality_matrix(const Matrix& a_spec, const Matrix& a_coop_prev) {
    if (a_spec.cols != a_coop_prev.cols)
        throw std::invalid_argument("orthogonality_matrix: column mismatch " + a_spec.shape_str() + " vs " +
                                    a_coop_prev.shape_str());
    return matmul_nt(a_spec, a_coop_prev);
}

inline double orthogonality_loss(const Matrix& a_spec, const Matrix& a_coop_prev) {
    return frobenius_sq(orthogonality_matrix(a_spec, a_coop_prev));
}

// Per-task pair of adapter collections, one adapter per injection site.
struct TaskAdapterSet {
    int task_index{0};  // 1-based stage order
    std::vector<LoRAAdapter> specialized;
    std::vector<LoRAAdapter> cooperative;
};

enum class ComposePolicy { kCoopPlusAllSpec, kCoopPlusLatestSpec, kCoopOnly };

inline const char* compose_policy_name(ComposePolicy p) {
    switch (p) {
        case ComposePolicy::kCoopPlusAllSpec: return "coop+all-spec";
        case ComposePolicy::kCoopPlusLatestSpec: return "coop+latest-spec";
        case ComposePolicy::kCoopOnly: return "coop-only";
    }
    return "?";
}

inline ComposePolicy compose_policy_from_name(const std::string& s) {
    if (s == "coop+all-spec") return ComposePolicy::kCoopPlusAllSpec;
    if (s == "coop+latest-spec") return ComposePolicy::kCoopPlusLatestSpec;
    if (s == "coop-only") return ComposePolicy::kCoopOnly;
    throw std::invalid_argument("unknown composition policy '" + s + "'");
}

// Ordered history of trained adapter sets; order equals training order and
// the latest cooperative set is the consolidation target for the next stage.
class AdapterRegistry {
public:
    explicit AdapterRegistry(ComposePolicy policy = ComposePolicy::kCoopPlusAllSpec) : policy_(policy) {}

    ComposePolicy policy() const { return policy_; }
    void set_policy(ComposePolicy p) { policy_ = p; }

    bool empty() const { return history_.empty(); }
    size_t stages() const { return history_.size(); }

    const std::vector<TaskAdapterSet>& history() const { return history_; }
    std::vector<TaskAdapterSet>& history() { return history_; }

    void push_stage(TaskAdapterSet set) {
        if (set.task_index != static_cast<int>(history_.size()) + 1)
            throw std::logic_error("registry: stage " + std::to_string(set.task_index) + " pushed out of order");
        history_.push_back(std::move(set));
    }

    const TaskAdapterSet& stage(int task_index) const {
        if (task_index < 1 || task_index > static_cast<int>(history_.size()))
            throw std::out_of_range("registry: no stage " + std::to_string(task_index));
        return history_[static_cast<size_t>(task_index) - 1];
    }

    // Latest cooperative adapters; these encapsulate the shared subspace of
    // all history up to the last trained stage.
    const std::vector<LoRAAdapter>& latest_cooperative() const {
        if (history_.empty()) throw std::logic_error("registry: no cooperative adapters yet");
        return history_.back().cooperative;
    }

    // Frozen adapter stack per site for inference.
    std::vector<AdapterBinding> compose_for_inference() { return compose_for_inference(policy_); }

    std::vector<AdapterBinding> compose_for_inference(ComposePolicy policy) {
        if (history_.empty()) throw std::logic_error("compose_for_inference: empty registry");
        std::vector<AdapterBinding> out;
        for (auto& ad : history_.back().cooperative) out.push_back({&ad, false});
        switch (policy) {
            case ComposePolicy::kCoopOnly: break;
            case ComposePolicy::kCoopPlusLatestSpec:
                for (auto& ad : history_.back().specialized) out.push_back({&ad, false});
                break;
            case ComposePolicy::kCoopPlusAllSpec:
                for (auto& set : history_)
                    for (auto& ad : set.specialized) out.push_back({&ad, false});
                break;
        }
        return out;
    }

    uint64_t checksum() const {
        uint64_t h = fnv1a64(compose_policy_name(policy_));
        for (const auto& set : history_) {
            h = hash_combine(h, static_cast<uint64_t>(set.task_index));
            for (const auto& ad : set.specialized) h = hash_combine(h, adapter_checksum(ad));
            for (const auto& ad : set.cooperative) h = hash_combine(h, adapter_checksum(ad));
        }
        return h;
    }

private:
    ComposePolicy policy_;
    std::vector<TaskAdapterSet> history_;
};

struct DualLoraHyper {
    int rank{8};
    double lambda_ortho{0.5};
    double learning_rate{2e-4};
    int epochs{3};
    int batch_size{16};
    ComposePolicy policy{ComposePolicy::kCoopPlusAllSpec};

    void validate() const {
        if (rank < 1) throw std::invalid_argument("hyper: rank must be >= 1");
        if (lambda_ortho < 0.0) throw std::invalid_argument("hyper: lambda_ortho must be >= 0");
        if (epochs < 1 || batch_size < 1) throw std::invalid_argument("hyper: epochs and batch_size must be >= 1");
    }
};

struct StageResult {
    int task_index{0};
    std::string role;  // which training pass this result describes
    double final_task_loss{0.0};
    double start_ortho_loss{0.0};
    double final_ortho_loss{0.0};
    std::vector<double> ortho_loss_per_epoch;
    double wall_seconds{0.0};
    uint64_t backbone_checksum{0};
};

}  // namespace foodcl
