// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "vaflow/common.hpp"
#include "vaflow/nn/graph.hpp"

namespace vaflow::nn {

// Named parameter tensors. std::map keeps iteration order stable, which in
// turn keeps optimizer updates bit-reproducible run to run.
template <typename S>
struct ParamStore {
    std::map<std::string, Mat<S>> tensors;

    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    Mat<S>& get(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::logic_error("unknown parameter: " + name);
        return it->second;
    }
    const Mat<S>& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::logic_error("unknown parameter: " + name);
        return it->second;
    }

    void add_zeros(const std::string& name, int rows, int cols) {
        insert(name, Mat<S>::Zero(rows, cols));
    }
    void add_ones(const std::string& name, int rows, int cols) {
        insert(name, Mat<S>::Ones(rows, cols));
    }
    void add_normal(const std::string& name, int rows, int cols, Rng& rng, double stddev) {
        Mat<S> m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = static_cast<S>(stddev * rng.normal());
        insert(name, std::move(m));
    }
    // Normal with Glorot variance 2 / (fan_in + fan_out).
    void add_glorot(const std::string& name, int rows, int cols, Rng& rng) {
        add_normal(name, rows, cols, rng, std::sqrt(2.0 / (rows + cols)));
    }

    template <typename T>
    ParamStore<T> cast() const {
        ParamStore<T> out;
        for (const auto& [name, m] : tensors) out.tensors[name] = m.template cast<T>();
        return out;
    }

private:
    void insert(const std::string& name, Mat<S> m) {
        if (!tensors.emplace(name, std::move(m)).second)
            throw std::logic_error("duplicate parameter: " + name);
    }
};

// One graph-building session. Parameters enter the graph through here so a
// name used twice maps to a single node and its gradients accumulate.
template <typename S>
struct Tape {
    explicit Tape(ParamStore<S>& store) : store_(&store) {}

    NodeP<S> param(const std::string& name) {
        auto it = nodes_.find(name);
        if (it != nodes_.end()) return it->second;
        auto node = make_node<S>(store_->get(name), true);
        nodes_.emplace(name, node);
        return node;
    }

    // Parameter value without gradient tracking (frozen towers).
    NodeP<S> frozen(const std::string& name) {
        auto it = frozen_.find(name);
        if (it != frozen_.end()) return it->second;
        auto node = make_node<S>(store_->get(name), false);
        frozen_.emplace(name, node);
        return node;
    }

    const std::map<std::string, NodeP<S>>& used() const { return nodes_; }
    ParamStore<S>& store() { return *store_; }

private:
    ParamStore<S>* store_;
    std::map<std::string, NodeP<S>> nodes_;
    std::map<std::string, NodeP<S>> frozen_;
};

// Adam with bias correction. Moments are kept per parameter name, so a
// parameter that sits out some steps (for example while a tower is frozen)
// simply keeps its state.
template <typename S>
class Adam {
public:
    explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Apply gradients accumulated on the tape's parameter nodes.
    void step(Tape<S>& tape) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (const auto& [name, node] : tape.used()) {
            if (!node->grad_init) continue;
            Mat<S>& param = tape.store().get(name);
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.size() == 0) {
                m = Mat<S>::Zero(param.rows(), param.cols());
                v = Mat<S>::Zero(param.rows(), param.cols());
            }
            m = S(beta1_) * m + S(1.0 - beta1_) * node->grad;
            v = (S(beta2_) * v.array() + S(1.0 - beta2_) * node->grad.array().square()).matrix();
            auto mhat = m.array() / S(bc1);
            auto vhat = v.array() / S(bc2);
            param.array() -= S(lr_) * mhat / (vhat.sqrt() + S(eps_));
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, Mat<S>> m_, v_;
};

}  // namespace vaflow::nn
