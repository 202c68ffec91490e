#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "treeformer/autodiff.hpp"

namespace treeformer {

template <typename Real>
struct AdamConfig {
    Real lr = Real(1e-4);
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.98);
    Real eps = Real(1e-8);
};

/// Adam with bias correction. State is one (m, v) pair per parameter plus a
/// shared step counter; both are checkpointable so runs can resume exactly.
template <typename Real>
class Adam {
public:
    Adam() = default;

    explicit Adam(AdamConfig<Real> cfg) : cfg_(cfg) {}

    void attach(const ParamStore<Real>& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
        step_ = 0;
    }

    /// One update from the grads currently held by the parameters.
    /// A non-finite gradient aborts the step before any parameter changes.
    void step(ParamStore<Real>& params) {
        if (m_.size() != params.size())
            throw std::logic_error("adam: state not attached to this parameter set");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& g = params[i].grad;
            for (std::size_t j = 0; j < g.numel(); ++j) {
                if (!std::isfinite(static_cast<double>(g[j])))
                    throw std::runtime_error("adam: non-finite gradient in parameter '" +
                                             params[i].name + "'");
            }
        }
        ++step_;
        const Real bc1 = Real(1) - std::pow(cfg_.beta1, Real(step_));
        const Real bc2 = Real(1) - std::pow(cfg_.beta2, Real(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].value;
            const auto& g = params[i].grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.numel(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (Real(1) - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (Real(1) - cfg_.beta2) * g[j] * g[j];
                const Real mhat = m[j] / bc1;
                const Real vhat = v[j] / bc2;
                p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    const AdamConfig<Real>& config() const { return cfg_; }
    AdamConfig<Real>& config() { return cfg_; }
    std::uint64_t step_count() const { return step_; }

    // serialization access
    std::vector<Array<Real>>& first_moments() { return m_; }
    std::vector<Array<Real>>& second_moments() { return v_; }
    void set_step_count(std::uint64_t s) { step_ = s; }

private:
    AdamConfig<Real> cfg_;
    std::vector<Array<Real>> m_;
    std::vector<Array<Real>> v_;
    std::uint64_t step_ = 0;
};

}  // namespace treeformer
