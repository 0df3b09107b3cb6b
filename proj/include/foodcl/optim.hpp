#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "foodcl/matrix.hpp"

namespace foodcl {

struct AdamWConfig {
    double lr{2e-4};
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    double weight_decay{0.01};
};

// One parameter the optimizer mutates in place, with the gradient computed
// for the current step.
struct ParamUpdate {
    std::string name;
    Matrix* value{nullptr};
    const Matrix* grad{nullptr};
};

// AdamW with decoupled weight decay. Moment slots are keyed by parameter
// name and created on first use; the step counter is shared across all
// parameters of one optimizer instance.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    int64_t step_count() const { return step_; }

    void step(const std::vector<ParamUpdate>& params) {
        for (const auto& p : params) {
            if (!p.value || !p.grad) throw std::invalid_argument("AdamW::step: null parameter binding");
            if (!p.value->same_shape(*p.grad))
                throw std::invalid_argument("AdamW::step: grad shape " + p.grad->shape_str() +
                                            " does not match param " + p.name + " " + p.value->shape_str());
            if (!p.grad->all_finite())
                throw std::runtime_error("training aborted: non-finite gradient in parameter '" + p.name + "'");
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (const auto& p : params) {
            Slot& s = slot(p.name, *p.value);
            Matrix& w = *p.value;
            const Matrix& g = *p.grad;
            for (size_t i = 0; i < w.data.size(); ++i) {
                // decoupled decay, then bias-corrected moment update
                w.data[i] -= cfg_.lr * cfg_.weight_decay * w.data[i];
                s.m.data[i] = cfg_.beta1 * s.m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
                s.v.data[i] = cfg_.beta2 * s.v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
                const double mhat = s.m.data[i] / bc1;
                const double vhat = s.v.data[i] / bc2;
                w.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            if (!w.all_finite())
                throw std::runtime_error("training aborted: non-finite parameter '" + p.name + "' after update");
        }
    }

private:
    struct Slot {
        Matrix m, v;
    };

    Slot& slot(const std::string& name, const Matrix& like) {
        auto it = slots_.find(name);
        if (it == slots_.end()) {
            Slot s;
            s.m = Matrix(like.rows, like.cols);
            s.v = Matrix(like.rows, like.cols);
            it = slots_.emplace(name, std::move(s)).first;
        } else if (it->second.m.rows != like.rows || it->second.m.cols != like.cols) {
            throw std::invalid_argument("AdamW: parameter '" + name + "' changed shape");
        }
        return it->second;
    }

    AdamWConfig cfg_;
    int64_t step_{0};
    std::unordered_map<std::string, Slot> slots_;
};

}  // namespace foodcl
