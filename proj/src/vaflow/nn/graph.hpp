// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "vaflow/mat.hpp"

namespace vaflow::nn {

// Reverse-mode tape over dense row-major matrices. Nodes own their forward
// value; backward closures add into parent gradients. Templated on the
// scalar so the same graph code can be finite-difference checked in double.
template <typename S>
struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool needs_grad = false;
    bool grad_init = false;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backprop;
};

template <typename S>
using NodeP = std::shared_ptr<Node<S>>;

template <typename S>
NodeP<S> make_node(Mat<S> value, bool needs_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->needs_grad = needs_grad;
    return n;
}

template <typename S>
void ensure_grad(Node<S>& n) {
    if (!n.grad_init) {
        n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
        n.grad_init = true;
    }
}

template <typename S>
void accumulate(const NodeP<S>& p, const Mat<S>& g) {
    if (!p->needs_grad) return;
    ensure_grad(*p);
    p->grad += g;
}

namespace detail {

template <typename S>
bool any_needs_grad(const std::vector<NodeP<S>>& parents) {
    for (const auto& p : parents)
        if (p->needs_grad) return true;
    return false;
}

}  // namespace detail

// Run reverse mode from a scalar (1x1) root.
template <typename S>
void backward(const NodeP<S>& root) {
    if (root->value.rows() != 1 || root->value.cols() != 1)
        throw std::logic_error("backward: root must be a scalar node");

    // Iterative post-order DFS for the topological order.
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx++].get();
            if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(*root);
    root->grad(0, 0) = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backprop && n->grad_init) n->backprop(*n);
    }
}

// ---- elementwise and linear ops ----

template <typename S>
NodeP<S> matmul(NodeP<S> a, NodeP<S> b) {
    if (a->value.cols() != b->value.rows()) throw std::logic_error("matmul: shape mismatch");
    auto out = make_node<S>(a->value * b->value, detail::any_needs_grad<S>({a, b}));
    out->parents = {a, b};
    if (out->needs_grad)
        out->backprop = [a, b](Node<S>& self) {
            if (a->needs_grad) accumulate(a, Mat<S>(self.grad * b->value.transpose()));
            if (b->needs_grad) accumulate(b, Mat<S>(a->value.transpose() * self.grad));
        };
    return out;
}

template <typename S>
NodeP<S> add(NodeP<S> a, NodeP<S> b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw std::logic_error("add: shape mismatch");
    auto out = make_node<S>(a->value + b->value, detail::any_needs_grad<S>({a, b}));
    out->parents = {a, b};
    if (out->needs_grad)
        out->backprop = [a, b](Node<S>& self) {
            accumulate(a, self.grad);
            accumulate(b, self.grad);
        };
    return out;
}

template <typename S>
NodeP<S> sub(NodeP<S> a, NodeP<S> b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw std::logic_error("sub: shape mismatch");
    auto out = make_node<S>(a->value - b->value, detail::any_needs_grad<S>({a, b}));
    out->parents = {a, b};
    if (out->needs_grad)
        out->backprop = [a, b](Node<S>& self) {
            accumulate(a, self.grad);
            accumulate(b, Mat<S>(-self.grad));
        };
    return out;
}

template <typename S>
NodeP<S> scale(NodeP<S> a, S factor) {
    auto out = make_node<S>(Mat<S>(a->value * factor), a->needs_grad);
    out->parents = {a};
    if (out->needs_grad)
        out->backprop = [a, factor](Node<S>& self) { accumulate(a, Mat<S>(self.grad * factor)); };
    return out;
}

template <typename S>
NodeP<S> hadamard(NodeP<S> a, NodeP<S> b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw std::logic_error("hadamard: shape mismatch");
    auto out = make_node<S>(Mat<S>(a->value.array() * b->value.array()),
                            detail::any_needs_grad<S>({a, b}));
    out->parents = {a, b};
    if (out->needs_grad)
        out->backprop = [a, b](Node<S>& self) {
            if (a->needs_grad) accumulate(a, Mat<S>(self.grad.array() * b->value.array()));
            if (b->needs_grad) accumulate(b, Mat<S>(self.grad.array() * a->value.array()));
        };
    return out;
}

// Broadcast-add a 1xD row vector to every row.
template <typename S>
NodeP<S> add_rowvec(NodeP<S> a, NodeP<S> r) {
    if (r->value.rows() != 1 || r->value.cols() != a->value.cols())
        throw std::logic_error("add_rowvec: vector shape mismatch");
    Mat<S> v = a->value;
    v.rowwise() += r->value.row(0);
    auto out = make_node<S>(std::move(v), detail::any_needs_grad<S>({a, r}));
    out->parents = {a, r};
    if (out->needs_grad)
        out->backprop = [a, r](Node<S>& self) {
            accumulate(a, self.grad);
            if (r->needs_grad) accumulate(r, Mat<S>(self.grad.colwise().sum()));
        };
    return out;
}

template <typename S>
NodeP<S> affine(NodeP<S> x, NodeP<S> w, NodeP<S> b) {
    return add_rowvec(matmul(x, w), b);
}

template <typename S>
NodeP<S> relu(NodeP<S> a) {
    auto out = make_node<S>(Mat<S>(a->value.cwiseMax(S(0))), a->needs_grad);
    out->parents = {a};
    if (out->needs_grad)
        out->backprop = [a](Node<S>& self) {
            Mat<S> mask = (a->value.array() > S(0)).template cast<S>();
            accumulate(a, Mat<S>(self.grad.array() * mask.array()));
        };
    return out;
}

// tanh form of gelu; the backward differentiates this approximation itself.
template <typename S>
NodeP<S> gelu(NodeP<S> a) {
    const S c = S(std::sqrt(2.0 / M_PI));
    const S k = S(0.044715);
    auto inner = [c, k](const auto& x) { return (c * (x + k * x.cube())).tanh(); };
    Mat<S> t = inner(a->value.array()).matrix();
    Mat<S> v = (a->value.array() * (S(1) + t.array()) * S(0.5)).matrix();
    auto out = make_node<S>(std::move(v), a->needs_grad);
    out->parents = {a};
    if (out->needs_grad)
        out->backprop = [a, t, c, k](Node<S>& self) {
            auto x = a->value.array();
            auto th = t.array();
            auto dtanh = (S(1) - th.square()) * (c * (S(1) + S(3) * k * x.square()));
            Mat<S> d = (S(0.5) * (S(1) + th) + S(0.5) * x * dtanh).matrix();
            accumulate(a, Mat<S>(self.grad.array() * d.array()));
        };
    return out;
}

// Row-wise layer norm with learned 1xD gain and bias.
template <typename S>
NodeP<S> layernorm(NodeP<S> x, NodeP<S> gamma, NodeP<S> beta) {
    const S eps = S(1e-5);
    Eigen::Index rows = x->value.rows(), cols = x->value.cols();
    if (gamma->value.cols() != cols || beta->value.cols() != cols)
        throw std::logic_error("layernorm: gain/bias shape mismatch");

    Mat<S> xhat(rows, cols);
    Vec<S> inv_sigma(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        S mu = x->value.row(i).mean();
        auto centered = x->value.row(i).array() - mu;
        S var = centered.square().mean();
        S inv = S(1) / std::sqrt(var + eps);
        inv_sigma(i) = inv;
        xhat.row(i) = (centered * inv).matrix();
    }
    Mat<S> v = xhat;
    v.array().rowwise() *= gamma->value.row(0).array();
    v.rowwise() += beta->value.row(0);

    auto out = make_node<S>(std::move(v), detail::any_needs_grad<S>({x, gamma, beta}));
    out->parents = {x, gamma, beta};
    if (out->needs_grad)
        out->backprop = [x, gamma, beta, xhat, inv_sigma](Node<S>& self) {
            Eigen::Index rows = xhat.rows(), cols = xhat.cols();
            if (gamma->needs_grad)
                accumulate(gamma, Mat<S>((self.grad.array() * xhat.array()).colwise().sum().matrix()));
            if (beta->needs_grad) accumulate(beta, Mat<S>(self.grad.colwise().sum()));
            if (x->needs_grad) {
                Mat<S> dx(rows, cols);
                for (Eigen::Index i = 0; i < rows; ++i) {
                    auto dy = (self.grad.row(i).array() * gamma->value.row(0).array()).eval();
                    S m1 = dy.mean();
                    S m2 = (dy * xhat.row(i).array()).mean();
                    dx.row(i) =
                        ((dy - m1 - xhat.row(i).array() * m2) * inv_sigma(i)).matrix();
                }
                accumulate(x, dx);
            }
        };
    return out;
}

// Select rows by index; duplicate indices are allowed and backward
// scatter-adds into the source.
template <typename S>
NodeP<S> gather_rows(NodeP<S> a, std::vector<int> idx) {
    Mat<S> v(static_cast<Eigen::Index>(idx.size()), a->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a->value.rows())
            throw std::logic_error("gather_rows: index out of range");
        v.row(static_cast<Eigen::Index>(i)) = a->value.row(idx[i]);
    }
    auto out = make_node<S>(std::move(v), a->needs_grad);
    out->parents = {a};
    if (out->needs_grad)
        out->backprop = [a, idx = std::move(idx)](Node<S>& self) {
            ensure_grad(*a);
            for (size_t i = 0; i < idx.size(); ++i)
                a->grad.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        };
    return out;
}

// Place row j of the source at row idx[j] of a zero (total_rows x D) matrix.
template <typename S>
NodeP<S> scatter_rows(NodeP<S> a, std::vector<int> idx, int total_rows) {
    if (static_cast<Eigen::Index>(idx.size()) != a->value.rows())
        throw std::logic_error("scatter_rows: index count mismatch");
    Mat<S> v = Mat<S>::Zero(total_rows, a->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= total_rows)
            throw std::logic_error("scatter_rows: index out of range");
        v.row(idx[i]) = a->value.row(static_cast<Eigen::Index>(i));
    }
    auto out = make_node<S>(std::move(v), a->needs_grad);
    out->parents = {a};
    if (out->needs_grad)
        out->backprop = [a, idx = std::move(idx)](Node<S>& self) {
            ensure_grad(*a);
            for (size_t i = 0; i < idx.size(); ++i)
                a->grad.row(static_cast<Eigen::Index>(i)) += self.grad.row(idx[i]);
        };
    return out;
}

// Replicate a 1xD row n times.
template <typename S>
NodeP<S> repeat_rows(NodeP<S> r, int n) {
    if (r->value.rows() != 1) throw std::logic_error("repeat_rows: source must be a single row");
    Mat<S> v = r->value.replicate(n, 1);
    auto out = make_node<S>(std::move(v), r->needs_grad);
    out->parents = {r};
    if (out->needs_grad)
        out->backprop = [r](Node<S>& self) { accumulate(r, Mat<S>(self.grad.colwise().sum())); };
    return out;
}

// Mean over consecutive groups of `group` rows: (n*group)xD -> nxD.
template <typename S>
NodeP<S> mean_pool_rows(NodeP<S> x, int group) {
    if (group <= 0 || x->value.rows() % group != 0)
        throw std::logic_error("mean_pool_rows: rows not divisible by group");
    Eigen::Index n = x->value.rows() / group;
    Mat<S> v(n, x->value.cols());
    for (Eigen::Index i = 0; i < n; ++i)
        v.row(i) = x->value.middleRows(i * group, group).colwise().mean();
    auto out = make_node<S>(std::move(v), x->needs_grad);
    out->parents = {x};
    if (out->needs_grad)
        out->backprop = [x, group, n](Node<S>& self) {
            ensure_grad(*x);
            S inv = S(1) / static_cast<S>(group);
            for (Eigen::Index i = 0; i < n; ++i)
                x->grad.middleRows(i * group, group) +=
                    (self.grad.row(i) * inv).replicate(group, 1);
        };
    return out;
}

// Add an LxD table to each item of a (batch*L)xD row-stacked tensor.
template <typename S>
NodeP<S> add_tiled(NodeP<S> x, NodeP<S> table, int batch) {
    Eigen::Index L = table->value.rows();
    if (x->value.rows() != L * batch || x->value.cols() != table->value.cols())
        throw std::logic_error("add_tiled: shape mismatch");
    Mat<S> v = x->value;
    for (int b = 0; b < batch; ++b) v.middleRows(b * L, L) += table->value;
    auto out = make_node<S>(std::move(v), detail::any_needs_grad<S>({x, table}));
    out->parents = {x, table};
    if (out->needs_grad)
        out->backprop = [x, table, batch, L](Node<S>& self) {
            accumulate(x, self.grad);
            if (table->needs_grad) {
                ensure_grad(*table);
                for (int b = 0; b < batch; ++b) table->grad += self.grad.middleRows(b * L, L);
            }
        };
    return out;
}

// Mean squared error against a constant target, as a 1x1 node.
template <typename S>
NodeP<S> mse_vs(NodeP<S> a, const Mat<S>& target) {
    if (a->value.rows() != target.rows() || a->value.cols() != target.cols())
        throw std::logic_error("mse_vs: target shape mismatch");
    Mat<S> diff = a->value - target;
    S n = static_cast<S>(diff.size());
    Mat<S> v(1, 1);
    v(0, 0) = diff.array().square().sum() / n;
    auto out = make_node<S>(std::move(v), a->needs_grad);
    out->parents = {a};
    if (out->needs_grad)
        out->backprop = [a, diff, n](Node<S>& self) {
            accumulate(a, Mat<S>(diff * (S(2) / n * self.grad(0, 0))));
        };
    return out;
}

// Mean cross entropy of row-wise softmax against integer labels, as 1x1.
template <typename S>
NodeP<S> softmax_xent(NodeP<S> logits, std::vector<int> labels) {
    Eigen::Index rows = logits->value.rows(), cols = logits->value.cols();
    if (static_cast<Eigen::Index>(labels.size()) != rows)
        throw std::logic_error("softmax_xent: label count mismatch");
    Mat<S> probs(rows, cols);
    S loss = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
        auto row = logits->value.row(i).array();
        S mx = row.maxCoeff();
        auto e = (row - mx).exp();
        S z = e.sum();
        probs.row(i) = (e / z).matrix();
        loss -= std::log(std::max(probs(i, labels[i]), S(1e-30)));
    }
    Mat<S> v(1, 1);
    v(0, 0) = loss / static_cast<S>(rows);
    auto out = make_node<S>(std::move(v), logits->needs_grad);
    out->parents = {logits};
    if (out->needs_grad)
        out->backprop = [logits, probs, labels = std::move(labels)](Node<S>& self) {
            Mat<S> d = probs;
            for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, labels[i]) -= S(1);
            d *= self.grad(0, 0) / static_cast<S>(d.rows());
            accumulate(logits, d);
        };
    return out;
}

// Multi-head scaled dot-product attention over a row-stacked batch.
// q is (batch*Lq) x D, k and v are (batch*Lk) x D. An optional Lq x Lk bias
// is added to every item's logits; it carries no gradient (fixed schedule).
template <typename S>
NodeP<S> attention(NodeP<S> q, NodeP<S> k, NodeP<S> v, int batch, int heads,
                   const Mat<S>* bias = nullptr) {
    Eigen::Index D = q->value.cols();
    if (k->value.cols() != D || v->value.cols() != D)
        throw std::logic_error("attention: dim mismatch");
    if (q->value.rows() % batch != 0 || k->value.rows() % batch != 0)
        throw std::logic_error("attention: rows not divisible by batch");
    if (k->value.rows() != v->value.rows()) throw std::logic_error("attention: k/v mismatch");
    if (D % heads != 0) throw std::logic_error("attention: dim not divisible by heads");
    int Lq = static_cast<int>(q->value.rows()) / batch;
    int Lk = static_cast<int>(k->value.rows()) / batch;
    int Dh = static_cast<int>(D) / heads;
    if (bias && (bias->rows() != Lq || bias->cols() != Lk))
        throw std::logic_error("attention: bias shape mismatch");
    S sc = S(1) / S(std::sqrt(static_cast<double>(Dh)));

    // Softmax rows for all items and heads, stacked (batch*heads*Lq) x Lk.
    auto probs = std::make_shared<Mat<S>>(static_cast<Eigen::Index>(batch) * heads * Lq, Lk);
    Mat<S> out_v(q->value.rows(), D);
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            auto Qb = q->value.block(b * Lq, h * Dh, Lq, Dh);
            auto Kb = k->value.block(b * Lk, h * Dh, Lk, Dh);
            auto Vb = v->value.block(b * Lk, h * Dh, Lk, Dh);
            Mat<S> logits = sc * (Qb * Kb.transpose());
            if (bias) logits += *bias;
            auto P = probs->block((static_cast<Eigen::Index>(b) * heads + h) * Lq, 0, Lq, Lk);
            for (int i = 0; i < Lq; ++i) {
                auto row = logits.row(i).array();
                S mx = row.maxCoeff();
                auto e = (row - mx).exp();
                P.row(i) = (e / e.sum()).matrix();
            }
            out_v.block(b * Lq, h * Dh, Lq, Dh) = P * Vb;
        }
    }

    auto out = make_node<S>(std::move(out_v), detail::any_needs_grad<S>({q, k, v}));
    out->parents = {q, k, v};
    if (out->needs_grad)
        out->backprop = [q, k, v, probs, batch, heads, Lq, Lk, Dh, sc](Node<S>& self) {
            if (q->needs_grad) ensure_grad(*q);
            if (k->needs_grad) ensure_grad(*k);
            if (v->needs_grad) ensure_grad(*v);
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    auto Qb = q->value.block(b * Lq, h * Dh, Lq, Dh);
                    auto Kb = k->value.block(b * Lk, h * Dh, Lk, Dh);
                    auto Vb = v->value.block(b * Lk, h * Dh, Lk, Dh);
                    auto P = probs->block((static_cast<Eigen::Index>(b) * heads + h) * Lq, 0, Lq, Lk);
                    auto dO = self.grad.block(b * Lq, h * Dh, Lq, Dh);

                    if (v->needs_grad)
                        v->grad.block(b * Lk, h * Dh, Lk, Dh) += P.transpose() * dO;
                    Mat<S> dP = dO * Vb.transpose();
                    // softmax backward per row: dA = P o (dP - sum(dP o P))
                    Mat<S> dA(Lq, Lk);
                    for (int i = 0; i < Lq; ++i) {
                        S dot = (dP.row(i).array() * P.row(i).array()).sum();
                        dA.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
                    }
                    if (q->needs_grad) q->grad.block(b * Lq, h * Dh, Lq, Dh) += sc * (dA * Kb);
                    if (k->needs_grad)
                        k->grad.block(b * Lk, h * Dh, Lk, Dh) += sc * (dA.transpose() * Qb);
                }
            }
        };
    return out;
}

}  // namespace vaflow::nn
