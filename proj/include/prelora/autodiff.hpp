#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// Operations run eagerly: every op computes its forward value immediately and
// appends a node to the tape. Tape::gradients() then walks the tape backwards.
// A node only participates in the backward pass if at least one of its inputs
// requires a gradient, so subgraphs hanging off frozen parameters cost nothing.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prelora/tensor.hpp"

namespace prelora {

/// A named trainable (or frozen) tensor owned by a model.
struct Parameter {
    std::string name;
    Tensor value;
    bool requires_grad = true;
};

/// Parameter name -> gradient of identical shape.
using GradientMap = std::map<std::string, Tensor>;

class Tape;

/// Handle to a node on a tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// View handed to an op's backward closure.
class BackwardContext {
public:
    const Tensor& grad_output() const;
    const Tensor& output() const;
    const Tensor& input(std::size_t i) const;
    bool needs(std::size_t i) const;
    /// Gradient accumulator of input i, zero-initialized on first access.
    Tensor& grad_input(std::size_t i);

private:
    friend class Tape;
    BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

    Tape& tape_;
    std::size_t node_;
};

class Tape {
public:
    using BackwardFn = std::function<void(BackwardContext&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Binds a named, non-differentiable input.
    Var input(std::string name, Tensor value);
    /// Looks up a previously bound input; throws if the name is unbound.
    Var binding(std::string_view name) const;
    Var constant(Tensor value);
    /// Leaf for a parameter. Repeated calls with the same parameter return the same node.
    Var parameter(const Parameter& p);

    /// Appends an op node. `inputs` must live on this tape.
    Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

    /// Reverse-mode gradients of a scalar node for every parameter leaf with requires_grad set.
    GradientMap gradients(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    friend class Var;
    friend class BackwardContext;

    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        const Parameter* param = nullptr;
        std::string binding;
    };

    std::deque<Node> nodes_;  // deque keeps value references stable
    std::map<const Parameter*, std::size_t> param_nodes_;
};

namespace ops {

/// [n,k] x [k,m] -> [n,m]
Var matmul(Var a, Var b);
/// x [n,in] times weight [out,in] transposed, plus optional bias [out].
Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);
/// linear(x, W, b) + scaling * (x A^T) B^T, with A [rank x d_in] and B [d_out x rank].
Var lora_linear(Var x, Var weight, Var bias, Var a, Var b, double scaling);
Var add(Var a, Var b);
/// Adds a [d] bias to every row of an [n,d] tensor.
Var add_bias(Var x, Var bias);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var gelu(Var a);
/// Softmax over the last dimension.
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Gathers rows of `table` [V,d] -> [indices.size(), d].
Var embedding(Var table, std::span<const std::size_t> indices);
/// Mean cross-entropy of logits [n,C] against class targets.
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
Var reshape(Var a, Shape shape);
/// [B*T, H*dh] -> [B*H, T, dh]
Var split_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads);
/// [B*H, T, dh] -> [B*T, H*dh]
Var merge_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads);
/// Batched matmul [b,n,k] x [b,k,m] (or [b,m,k] when transpose_b) -> [b,n,m].
Var bmm(Var a, Var b, bool transpose_b = false);
/// Mean over groups of `tokens` consecutive rows: [B*T, d] -> [B, d].
Var mean_pool_tokens(Var x, std::size_t tokens);

}  // namespace ops

}  // namespace prelora
