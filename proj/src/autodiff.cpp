#include "prelora/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace prelora {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const double* p, std::size_t rows, std::size_t cols) {
    return ConstMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap as_matrix(double* p, std::size_t rows, std::size_t cols) {
    return MutMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
ConstMap as_matrix(const Tensor& t) { return as_matrix(t.data().data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return as_matrix(t.data().data(), t.rows(), t.cols()); }

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b, std::string_view what) {
    throw ShapeError(std::string(op) + ": " + std::string(what) + " (" + shape_to_string(a) + " vs " +
                     shape_to_string(b) + ")");
}

void require_rank(std::string_view op, const Var& v, std::size_t rank) {
    if (v.value().rank() != rank)
        throw ShapeError(std::string(op) + ": expected a rank-" + std::to_string(rank) + " tensor, got " +
                         shape_to_string(v.shape()));
}

void require_same_tape(std::string_view op, const Var& a, const Var& b) {
    if (!a.valid() || a.tape() != b.tape())
        throw Error(std::string(op) + ": operands live on different tapes");
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / BackwardContext

const Tensor& Var::value() const {
    if (!tape_) throw Error("use of an unbound Var");
    return tape_->nodes_.at(id_).value;
}

bool Var::requires_grad() const { return tape_ && tape_->nodes_.at(id_).requires_grad; }

const Tensor& BackwardContext::grad_output() const { return tape_.nodes_[node_].grad; }
const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t i) const {
    return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}

bool BackwardContext::needs(std::size_t i) const {
    return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].requires_grad;
}

Tensor& BackwardContext::grad_input(std::size_t i) {
    auto& target = tape_.nodes_[tape_.nodes_[node_].inputs.at(i)];
    if (target.grad.empty()) target.grad = Tensor(target.value.shape(), 0.0);
    return target.grad;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::input(std::string name, Tensor value) {
    Node node;
    node.op = "input";
    node.value = std::move(value);
    node.binding = std::move(name);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::binding(std::string_view name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].op == "input" && nodes_[i].binding == name) return Var(const_cast<Tape*>(this), i);
    throw Error("input '" + std::string(name) + "' is not bound");
}

Var Tape::constant(Tensor value) {
    Node node;
    node.op = "constant";
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Node node;
    node.op = "parameter";
    node.value = p.value;
    node.param = &p;
    node.requires_grad = p.requires_grad;
    nodes_.push_back(std::move(node));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node node;
    node.op = std::string(op);
    node.value = std::move(value);
    node.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
        if (v.tape() != this) throw Error(std::string(op) + ": input from a different tape");
        node.inputs.push_back(v.id());
        node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

GradientMap Tape::gradients(Var loss) {
    if (loss.tape() != this) throw Error("gradients: loss node belongs to another tape");
    const Tensor& lv = loss.value();
    if (lv.size() != 1) throw ShapeError("gradients: loss must be a scalar, got " + shape_to_string(lv.shape()));

    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss.id()].grad = Tensor(lv.shape(), 1.0);

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        BackwardContext ctx(*this, i);
        n.backward(ctx);
    }

    GradientMap out;
    for (const auto& [param, id] : param_nodes_) {
        if (!param->requires_grad) continue;
        const Node& n = nodes_[id];
        out.insert_or_assign(param->name, n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {

Var matmul(Var a, Var b) {
    require_same_tape("matmul", a, b);
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.dim(1) != bv.dim(0)) shape_fail("matmul", av.shape(), bv.shape(), "inner dimensions differ");
    Tensor out({av.dim(0), bv.dim(1)});
    as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
    return a.tape()->record("matmul", std::move(out), {a, b}, [](BackwardContext& ctx) {
        const auto g = as_matrix(ctx.grad_output());
        if (ctx.needs(0)) as_matrix(ctx.grad_input(0)).noalias() += g * as_matrix(ctx.input(1)).transpose();
        if (ctx.needs(1)) as_matrix(ctx.grad_input(1)).noalias() += as_matrix(ctx.input(0)).transpose() * g;
    });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
    require_same_tape("linear", x, weight);
    require_rank("linear", x, 2);
    require_rank("linear", weight, 2);
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    if (xv.dim(1) != wv.dim(1)) shape_fail("linear", xv.shape(), wv.shape(), "input width differs from weight columns");
    const std::size_t n = xv.dim(0), out_dim = wv.dim(0);
    Tensor out({n, out_dim});
    auto om = as_matrix(out);
    om.noalias() = as_matrix(xv) * as_matrix(wv).transpose();
    std::vector<Var> inputs{x, weight};
    if (bias) {
        require_same_tape("linear", x, *bias);
        const Tensor& bv = bias->value();
        if (bv.size() != out_dim) shape_fail("linear", wv.shape(), bv.shape(), "bias length differs from output width");
        om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(), static_cast<Eigen::Index>(out_dim));
        inputs.push_back(*bias);
    }
    const bool has_bias = bias.has_value();
    return x.tape()->record("linear", std::move(out), std::move(inputs), [has_bias](BackwardContext& ctx) {
        const auto g = as_matrix(ctx.grad_output());
        if (ctx.needs(0)) as_matrix(ctx.grad_input(0)).noalias() += g * as_matrix(ctx.input(1));
        if (ctx.needs(1)) as_matrix(ctx.grad_input(1)).noalias() += g.transpose() * as_matrix(ctx.input(0));
        if (has_bias && ctx.needs(2)) {
            Tensor& gb = ctx.grad_input(2);
            Eigen::Map<Eigen::RowVectorXd>(gb.data().data(), static_cast<Eigen::Index>(gb.size())) +=
                g.colwise().sum();
        }
    });
}

Var lora_linear(Var x, Var weight, Var bias, Var a, Var b, double scaling) {
    for (const Var* v : {&weight, &bias, &a, &b}) require_same_tape("lora_linear", x, *v);
    Var base = linear(x, weight, bias);
    const Tensor& xv = x.value();
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank("lora_linear", a, 2);
    require_rank("lora_linear", b, 2);
    if (av.dim(1) != xv.dim(1)) shape_fail("lora_linear", xv.shape(), av.shape(), "input width differs from A columns");
    if (bv.dim(0) != base.value().dim(1) || bv.dim(1) != av.dim(0))
        shape_fail("lora_linear", av.shape(), bv.shape(), "B must be [d_out x rank] for A [rank x d_in]");
    const std::size_t n = xv.dim(0), rank = av.dim(0);

    Tensor down({n, rank});
    as_matrix(down).noalias() = as_matrix(xv) * as_matrix(av).transpose();
    Tensor out = base.value();
    as_matrix(out).noalias() += scaling * (as_matrix(down) * as_matrix(bv).transpose());
    return x.tape()->record(
        "lora_linear", std::move(out), {base, x, a, b}, [down = std::move(down), scaling, n, rank](BackwardContext& ctx) {
            const auto g = as_matrix(ctx.grad_output());
            if (ctx.needs(0)) as_matrix(ctx.grad_input(0)) += g;
            if (!ctx.needs(1) && !ctx.needs(2) && !ctx.needs(3)) return;
            if (ctx.needs(3)) as_matrix(ctx.grad_input(3)).noalias() += scaling * (g.transpose() * as_matrix(down));
            if (!ctx.needs(1) && !ctx.needs(2)) return;
            RowMat gdown(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(rank));
            gdown.noalias() = scaling * (g * as_matrix(ctx.input(3)));
            if (ctx.needs(2)) as_matrix(ctx.grad_input(2)).noalias() += gdown.transpose() * as_matrix(ctx.input(1));
            if (ctx.needs(1)) as_matrix(ctx.grad_input(1)).noalias() += gdown * as_matrix(ctx.input(2));
        });
}

Var add(Var a, Var b) {
    require_same_tape("add", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape() != bv.shape()) shape_fail("add", av.shape(), bv.shape(), "shapes differ");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape()->record("add", std::move(out), {a, b}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        for (std::size_t j = 0; j < 2; ++j) {
            if (!ctx.needs(j)) continue;
            Tensor& gi = ctx.grad_input(j);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

Var add_bias(Var x, Var bias) {
    require_same_tape("add_bias", x, bias);
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (bv.size() != xv.cols()) shape_fail("add_bias", xv.shape(), bv.shape(), "bias length differs from row width");
    Tensor out = xv;
    const std::size_t rows = xv.rows(), cols = xv.cols();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
    return x.tape()->record("add_bias", std::move(out), {x, bias}, [rows, cols](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.needs(0)) {
            Tensor& gx = ctx.grad_input(0);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (ctx.needs(1)) {
            Tensor& gb = ctx.grad_input(1);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        }
    });
}

Var mul(Var a, Var b) {
    require_same_tape("mul", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape() != bv.shape()) shape_fail("mul", av.shape(), bv.shape(), "shapes differ");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape()->record("mul", std::move(out), {a, b}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.needs(0)) {
            Tensor& ga = ctx.grad_input(0);
            const Tensor& bv = ctx.input(1);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (ctx.needs(1)) {
            Tensor& gb = ctx.grad_input(1);
            const Tensor& av = ctx.input(0);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double s) {
    Tensor out = a.value();
    for (double& v : out.data()) v *= s;
    return a.tape()->record("scale", std::move(out), {a}, [s](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& ga = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

Var sum(Var a) {
    double acc = 0.0;
    for (double v : a.value().data()) acc += v;
    return a.tape()->record("sum", Tensor::scalar(acc), {a}, [](BackwardContext& ctx) {
        const double g = ctx.grad_output()[0];
        for (double& v : ctx.grad_input(0).data()) v += g;
    });
}

Var gelu(Var a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    return a.tape()->record("gelu", std::move(out), {a}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& x = ctx.input(0);
        Tensor& gx = ctx.grad_input(0);
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            gx[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

Var softmax_rows(Var a) {
    const Tensor& av = a.value();
    Tensor out = av;
    const std::size_t rows = av.rows(), cols = av.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data().data() + r * cols;
        const double mx = *std::max_element(row, row + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
    }
    return a.tape()->record("softmax_rows", std::move(out), {a}, [rows, cols](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& y = ctx.output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[off + c] * y[off + c];
            for (std::size_t c = 0; c < cols; ++c) gx[off + c] += y[off + c] * (g[off + c] - dot);
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    require_same_tape("layer_norm", x, gamma);
    require_same_tape("layer_norm", x, beta);
    const Tensor& xv = x.value();
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (gamma.value().size() != cols) shape_fail("layer_norm", xv.shape(), gamma.shape(), "gamma length differs");
    if (beta.value().size() != cols) shape_fail("layer_norm", xv.shape(), beta.shape(), "beta length differs");
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();

    Tensor out(xv.shape());
    std::vector<double> xhat(xv.size());
    std::vector<double> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xv[off + c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xv[off + c] - mean) * (xv[off + c] - mean);
        var /= static_cast<double>(cols);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[off + c] = (xv[off + c] - mean) * rstd[r];
            out[off + c] = xhat[off + c] * gv[c] + bv[c];
        }
    }
    return x.tape()->record(
        "layer_norm", std::move(out), {x, gamma, beta},
        [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](BackwardContext& ctx) {
            const Tensor& g = ctx.grad_output();
            const Tensor& gv = ctx.input(1);
            if (ctx.needs(1)) {
                Tensor& gg = ctx.grad_input(1);
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % cols] += g[i] * xhat[i];
            }
            if (ctx.needs(2)) {
                Tensor& gb = ctx.grad_input(2);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
            }
            if (ctx.needs(0)) {
                Tensor& gx = ctx.grad_input(0);
                const double inv_n = 1.0 / static_cast<double>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t off = r * cols;
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double d = g[off + c] * gv[c];
                        mean_d += d;
                        mean_dx += d * xhat[off + c];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double d = g[off + c] * gv[c];
                        gx[off + c] += rstd[r] * (d - mean_d - xhat[off + c] * mean_dx);
                    }
                }
            }
        });
}

Var embedding(Var table, std::span<const std::size_t> indices) {
    require_rank("embedding", table, 2);
    const Tensor& tv = table.value();
    const std::size_t vocab = tv.dim(0), width = tv.dim(1);
    if (indices.empty()) throw ShapeError("embedding: empty index list");
    Tensor out({indices.size(), width});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= vocab)
            throw ShapeError("embedding: index " + std::to_string(indices[i]) + " out of range for table " +
                             shape_to_string(tv.shape()));
        std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * width), width,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return table.tape()->record("embedding", std::move(out), {table}, [idx = std::move(idx), width](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gt = ctx.grad_input(0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < width; ++c) gt[idx[i] * width + c] += g[i * width + c];
    });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
    require_rank("cross_entropy", logits, 2);
    const Tensor& lv = logits.value();
    const std::size_t n = lv.dim(0), classes = lv.dim(1);
    if (targets.size() != n)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_to_string(lv.shape()));
    std::vector<double> probs(lv.size());
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (tgt[r] >= classes) throw ShapeError("cross_entropy: target " + std::to_string(tgt[r]) + " out of range");
        const double* row = lv.data().data() + r * classes;
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += (probs[r * classes + c] = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= z;
        loss += -(row[tgt[r]] - mx - std::log(z));
    }
    loss /= static_cast<double>(n);
    return logits.tape()->record(
        "cross_entropy", Tensor::scalar(loss), {logits},
        [probs = std::move(probs), tgt = std::move(tgt), n, classes](BackwardContext& ctx) {
            const double g = ctx.grad_output()[0] / static_cast<double>(n);
            Tensor& gl = ctx.grad_input(0);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < classes; ++c) gl[r * classes + c] += g * probs[r * classes + c];
                gl[r * classes + tgt[r]] -= g;
            }
        });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.tape()->record("reshape", std::move(out), {a}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& ga = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

namespace {

// Maps (b, t, h, j) between [B*T, H*dh] and [B*H, T, dh] layouts.
template <typename F>
void for_each_head_index(std::size_t batch, std::size_t tokens, std::size_t heads, std::size_t head_dim, F&& f) {
    const std::size_t width = heads * head_dim;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t j = 0; j < head_dim; ++j)
                    f((b * tokens + t) * width + h * head_dim + j, ((b * heads + h) * tokens + t) * head_dim + j);
}

}  // namespace

Var split_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
    require_rank("split_heads", x, 2);
    const Tensor& xv = x.value();
    if (xv.dim(0) != batch * tokens || xv.dim(1) % heads != 0)
        shape_fail("split_heads", xv.shape(), {batch * tokens, heads}, "rows must be batch*tokens, width divisible by heads");
    const std::size_t head_dim = xv.dim(1) / heads;
    Tensor out({batch * heads, tokens, head_dim});
    for_each_head_index(batch, tokens, heads, head_dim, [&](std::size_t flat, std::size_t split) { out[split] = xv[flat]; });
    return x.tape()->record("split_heads", std::move(out), {x}, [=](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for_each_head_index(batch, tokens, heads, head_dim, [&](std::size_t flat, std::size_t split) { gx[flat] += g[split]; });
    });
}

Var merge_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
    require_rank("merge_heads", x, 3);
    const Tensor& xv = x.value();
    if (xv.dim(0) != batch * heads || xv.dim(1) != tokens)
        shape_fail("merge_heads", xv.shape(), {batch * heads, tokens}, "leading dims must be batch*heads, tokens");
    const std::size_t head_dim = xv.dim(2);
    Tensor out({batch * tokens, heads * head_dim});
    for_each_head_index(batch, tokens, heads, head_dim, [&](std::size_t flat, std::size_t split) { out[flat] = xv[split]; });
    return x.tape()->record("merge_heads", std::move(out), {x}, [=](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for_each_head_index(batch, tokens, heads, head_dim, [&](std::size_t flat, std::size_t split) { gx[split] += g[flat]; });
    });
}

Var bmm(Var a, Var b, bool transpose_b) {
    require_same_tape("bmm", a, b);
    require_rank("bmm", a, 3);
    require_rank("bmm", b, 3);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t batch = av.dim(0), n = av.dim(1), k = av.dim(2);
    const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
    const std::size_t m = transpose_b ? bv.dim(1) : bv.dim(2);
    if (bv.dim(0) != batch || bk != k) shape_fail("bmm", av.shape(), bv.shape(), "batch or inner dimensions differ");
    Tensor out({batch, n, m});
    const std::size_t b_rows = bv.dim(1), b_cols = bv.dim(2);
    for (std::size_t i = 0; i < batch; ++i) {
        auto am = as_matrix(av.data().data() + i * n * k, n, k);
        auto bm = as_matrix(bv.data().data() + i * b_rows * b_cols, b_rows, b_cols);
        auto om = as_matrix(out.data().data() + i * n * m, n, m);
        // Per-head blocks are tiny; the lazy product skips GEMM blocking overhead.
        if (transpose_b)
            om = am.lazyProduct(bm.transpose());
        else
            om = am.lazyProduct(bm);
    }
    return a.tape()->record("bmm", std::move(out), {a, b}, [=](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& av = ctx.input(0);
        const Tensor& bv = ctx.input(1);
        const bool need_a = ctx.needs(0), need_b = ctx.needs(1);
        double* ga = need_a ? ctx.grad_input(0).data().data() : nullptr;
        double* gb = need_b ? ctx.grad_input(1).data().data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
            auto gm = as_matrix(g.data().data() + i * n * m, n, m);
            auto am = as_matrix(av.data().data() + i * n * k, n, k);
            auto bm = as_matrix(bv.data().data() + i * b_rows * b_cols, b_rows, b_cols);
            if (need_a) {
                auto gam = as_matrix(ga + i * n * k, n, k);
                if (transpose_b)
                    gam += gm.lazyProduct(bm);
                else
                    gam += gm.lazyProduct(bm.transpose());
            }
            if (need_b) {
                auto gbm = as_matrix(gb + i * b_rows * b_cols, b_rows, b_cols);
                if (transpose_b)
                    gbm += gm.transpose().lazyProduct(am);
                else
                    gbm += am.transpose().lazyProduct(gm);
            }
        }
    });
}

Var mean_pool_tokens(Var x, std::size_t tokens) {
    require_rank("mean_pool_tokens", x, 2);
    const Tensor& xv = x.value();
    if (tokens == 0 || xv.dim(0) % tokens != 0)
        shape_fail("mean_pool_tokens", xv.shape(), {tokens}, "row count not divisible by token count");
    const std::size_t batch = xv.dim(0) / tokens, width = xv.dim(1);
    const double inv = 1.0 / static_cast<double>(tokens);
    Tensor out({batch, width});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t c = 0; c < width; ++c) out[b * width + c] += xv[(b * tokens + t) * width + c] * inv;
    return x.tape()->record("mean_pool_tokens", std::move(out), {x}, [=](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t c = 0; c < width; ++c) gx[(b * tokens + t) * width + c] += g[b * width + c] * inv;
    });
}

}  // namespace ops

}  // namespace prelora
