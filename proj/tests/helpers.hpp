#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "gep/karva.hpp"
#include "gep/tensor.hpp"

namespace gep::test {

/// Standard experiment table: {+,-,*,/,sqr,sqrt}, n features, number-token
/// constants and 2.0.
inline SymbolTable standard_table(int n_features) {
    return SymbolTable::make({"+", "-", "*", "/", "sqr", "sqrt"}, n_features,
                             {0.1, 0.5, -0.1, -0.5, 2.0});
}

/// Arithmetic-only table (no unary functions).
inline SymbolTable arithmetic_table(int n_features) {
    return SymbolTable::make({"+", "-", "*", "/"}, n_features, {});
}

/// Independent decode oracle: textbook queue-based Karva expansion. Nodes are
/// taken from the flat string left to right; a FIFO of open parents consumes
/// children in order.
struct OracleNode {
    SymbolId id;
    std::vector<int> children;
};

inline std::vector<OracleNode> queue_decode(const std::vector<SymbolId>& flat,
                                            const SymbolTable& table) {
    std::vector<OracleNode> nodes;
    nodes.push_back({flat[0], {}});
    std::deque<int> open;
    open.push_back(0);
    std::size_t next = 1;
    while (!open.empty()) {
        const int parent = open.front();
        open.pop_front();
        const int arity = table.at(nodes[static_cast<std::size_t>(parent)].id).arity;
        for (int c = 0; c < arity; ++c) {
            const int idx = static_cast<int>(nodes.size());
            nodes.push_back({flat[next++], {}});
            nodes[static_cast<std::size_t>(parent)].children.push_back(idx);
            open.push_back(idx);
        }
    }
    return nodes;
}

inline bool same_structure(const ExpressionTree& tree, const std::vector<OracleNode>& oracle,
                           int at = 0) {
    const OracleNode& node = oracle[static_cast<std::size_t>(at)];
    if (tree.node != node.id || tree.children.size() != node.children.size()) {
        return false;
    }
    for (std::size_t i = 0; i < tree.children.size(); ++i) {
        if (!same_structure(tree.children[i], oracle, node.children[i])) {
            return false;
        }
    }
    return true;
}

/// Central finite differences against the tape gradient. `forward` must build
/// the full graph from scratch on the given tape and return the scalar loss.
/// Returns the max relative error over every coordinate of `param`.
inline double gradient_check(const std::function<nn::Tensor(nn::Tape&)>& forward,
                             nn::Tensor& param, float eps = 1e-3f) {
    nn::Tape tape;
    nn::Tensor loss = forward(tape);
    tape.backward(loss);
    const std::vector<float> analytic(param.grad(), param.grad() + param.numel());
    param.zero_grad();

    double worst = 0.0;
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const float saved = param.data()[i];
        param.data()[i] = saved + eps;
        nn::Tape t1;
        const double up = forward(t1).data()[0];
        param.data()[i] = saved - eps;
        nn::Tape t2;
        const double down = forward(t2).data()[0];
        param.data()[i] = saved;
        const double fd = (up - down) / (2.0 * static_cast<double>(eps));
        const double ad = analytic[i];
        const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
        worst = std::max(worst, rel);
    }
    return worst;
}

inline nn::Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                                float scale = 1.0f) {
    nn::Tensor t = nn::Tensor::zeros(std::move(shape), requires_grad);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = rng.uniform_float(-scale, scale);
    }
    return t;
}

}  // namespace gep::test
