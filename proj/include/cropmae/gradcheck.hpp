#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cropmae/autograd.hpp"

namespace cropmae {

/// Central-difference gradient check over several inputs.
///
/// `f(tape, inputs)` must build a scalar on `tape`. Returns
/// max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)
/// over every coordinate of every input.
template <class T, class F>
T finite_diff_check_many(F&& f, const std::vector<Tensor<T>>& inputs, T h) {
    if (!(h > T(0))) throw ParameterError("finite difference step must be positive");

    std::vector<Tensor<T>> analytic;
    {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        for (const auto& x : inputs) vars.push_back(tape.leaf(x));
        Var<T> y = f(tape, vars);
        tape.backward(y);
        for (const auto& v : vars) analytic.push_back(tape.grad(v));
    }

    auto evaluate = [&](const std::vector<Tensor<T>>& xs) {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        for (const auto& x : xs) vars.push_back(tape.constant(x));
        return f(tape, vars).value().item();
    };

    T worst = 0;
    std::vector<Tensor<T>> probe = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const T orig = probe[k][i];
            probe[k][i] = orig + h;
            const T fp = evaluate(probe);
            probe[k][i] = orig - h;
            const T fm = evaluate(probe);
            probe[k][i] = orig;
            const T numeric = (fp - fm) / (T(2) * h);
            const T a = analytic[k][i];
            const T err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + T(1e-12));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

template <class T, class F>
T finite_diff_check(F&& f, const Tensor<T>& x, T h) {
    return finite_diff_check_many<T>(
        [&](Tape<T>& tape, const std::vector<Var<T>>& vars) { return f(tape, vars[0]); },
        std::vector<Tensor<T>>{x}, h);
}

}  // namespace cropmae
