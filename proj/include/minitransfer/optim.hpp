#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "minitransfer/tape.hpp"

namespace mt {

enum class OptKind { sgd, adam };

// First-order optimizer state. Adam moments are aligned with the parameter
// order handed to optimizer_step, which must stay stable across steps.
struct OptimizerState {
    OptKind kind = OptKind::adam;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t step = 0;
    std::vector<Tensor> m, v;

    static OptimizerState sgd(double lr) { return OptimizerState{OptKind::sgd, lr}; }
    static OptimizerState adam(double lr) { return OptimizerState{OptKind::adam, lr}; }
};

// One update from the gradients currently in Parameter::grad. Gradients are
// left untouched; the caller zeroes them between steps.
inline void optimizer_step(OptimizerState& st, const std::vector<Parameter*>& params) {
    if (st.kind == OptKind::adam && st.m.empty()) {
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const Parameter* p : params) {
            st.m.push_back(Tensor::zeros(p->value.shape()));
            st.v.push_back(Tensor::zeros(p->value.shape()));
        }
    }
    if (st.kind == OptKind::adam && st.m.size() != params.size())
        throw Error("optimizer_step: parameter count changed under adam state");
    st.step += 1;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        if (!p.grad.same_shape(p.value))
            throw Error("optimizer_step: grad/value shape mismatch for " + p.name);
        if (st.kind == OptKind::sgd) {
            for (std::size_t i = 0; i < p.value.size(); ++i)
                p.value[i] -= st.lr * p.grad[i];
        } else {
            Tensor& m = st.m[pi];
            Tensor& v = st.v[pi];
            if (!m.same_shape(p.value))
                throw Error("optimizer_step: moment/parameter shape mismatch for " + p.name);
            const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
            const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
                v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.value[i] -= st.lr * mhat / (std::sqrt(vhat) + st.epsilon);
            }
        }
        if (!p.value.all_finite())
            throw Error("optimizer_step: non-finite values in parameter " + p.name);
    }
}

inline void optimizer_step(OptimizerState& st, std::vector<Parameter>& params) {
    std::vector<Parameter*> ptrs;
    ptrs.reserve(params.size());
    for (Parameter& p : params) ptrs.push_back(&p);
    optimizer_step(st, ptrs);
}

inline void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

// Central-difference gradient verification. build_loss must construct the
// loss on the given tape, binding the same Parameter objects via tape.param,
// and be a deterministic function of the parameter values. Returns the max
// relative error with denominator max(1, |analytic|, |numeric|).
// Overwrites the parameters' gradients.
template <class BuildLoss>
double grad_check(BuildLoss&& build_loss, const std::vector<Parameter*>& params,
                  double epsilon = 1e-5) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = build_loss(tape);
        tape.backward(loss);
    }
    auto eval = [&]() {
        Tape tape;
        Var loss = build_loss(tape);
        return tape.value(loss).item();
    };
    double worst = 0.0;
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + epsilon;
            const double f_plus = eval();
            p->value[i] = saved - epsilon;
            const double f_minus = eval();
            p->value[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
            const double analytic = p->grad[i];
            const double denom =
                std::max(1.0, std::max(std::fabs(analytic), std::fabs(numeric)));
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace mt
