#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "treeformer/array.hpp"
#include "treeformer/autodiff.hpp"
#include "treeformer/random.hpp"

namespace tftest {

using treeformer::Array;
using treeformer::Node;
using treeformer::Rng;
using treeformer::Shape;
using treeformer::Tape;

// Independent oracle: central finite differences (f(x+h) - f(x-h)) / 2h.
inline double central_difference(const std::function<double(double)>& f, double x,
                                 double h = 1e-6) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

// rel. err with a floor so that near-zero pairs compare absolutely
inline double grad_rel_err(double analytic, double numeric) {
    const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
    return std::fabs(analytic - numeric) / scale;
}

// Checks d(loss)/d(inputs) of a tape-built scalar against central finite
// differences. `build` must construct the loss from fresh input nodes each
// call (the tape is rebuilt per perturbation).
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

inline GradCheckResult check_gradients(
    const std::function<Node<double>*(Tape<double>&, std::vector<Node<double>*>&)>& build,
    std::vector<Array<double>> inputs, double h = 1e-6) {
    // analytic pass
    Tape<double> tape;
    std::vector<Node<double>*> nodes;
    for (auto& a : inputs) nodes.push_back(tape.input(a));
    Node<double>* loss = build(tape, nodes);
    tape.backward(loss);

    auto eval = [&](const std::vector<Array<double>>& xs) {
        Tape<double> t;
        std::vector<Node<double>*> ns;
        for (const auto& a : xs) ns.push_back(t.input(Array<double>(a)));
        return build(t, ns)->value[0];
    };

    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            auto xs = inputs;
            xs[k][i] = inputs[k][i] + h;
            const double fp = eval(xs);
            xs[k][i] = inputs[k][i] - h;
            const double fm = eval(xs);
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = nodes[k]->grad.numel() ? nodes[k]->grad[i] : 0.0;
            res.max_rel_err = std::max(res.max_rel_err, grad_rel_err(analytic, numeric));
            ++res.checked;
        }
    }
    return res;
}

inline Array<double> random_array(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array<double> a(shape);
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

}  // namespace tftest
