#pragma once

// Minimal dense-tensor engine with reverse-mode differentiation.
// Define-by-run: every op appends itself to the implicit graph through
// parent links; backward() replays the graph in reverse topological order.
// 64-bit reals, row-major, 1-D/2-D shapes, scalars are shape {1}.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmrt/common.hpp"

namespace cmrt {

struct TensorNode;
using Tensor = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same size as value
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<Tensor> parents;
    // adds d(output)/d(parent) * output.grad into each parent's grad
    std::function<void(TensorNode&)> backprop;

    int64_t size() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool is_scalar() const { return size() == 1 && shape.size() == 1; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

Tensor make_tensor(std::vector<int64_t> shape, std::vector<double> values,
                   bool requires_grad = false);
Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
Tensor full(std::vector<int64_t> shape, double v);
Tensor scalar(double v);
Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev,
             bool requires_grad = false);

// ---- op catalog ----
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T; used for attention scores and the tied output projection
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
// (r x c) + (c): adds b to every row of a
Tensor add_bias(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double k);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_rows(const Tensor& a, int64_t lo, int64_t hi);
Tensor slice_cols(const Tensor& a, int64_t lo, int64_t hi);
Tensor mean_pool_rows(const Tensor& a);  // (r x c) -> (c)
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
Tensor softmax(const Tensor& a);      // over last axis
Tensor log_softmax(const Tensor& a);  // over last axis
Tensor cosine_similarity(const Tensor& a, const Tensor& b);  // vectors -> scalar
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& a);
Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids);
// mean over positions of -log softmax(logits)[gold]
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int64_t>& gold);
// mean over rows of D_KL(P||Q) given per-row log-distributions
Tensor kl_from_log_probs(const Tensor& log_p, const Tensor& log_q);
// constant copy; gradients do not flow past it
Tensor detach(const Tensor& a);

// Accumulates gradients into every reachable requires_grad tensor.
// Repeated calls without zeroing accumulate additively.
void backward(const Tensor& loss);
void zero_grad(const Tensor& t);

// ---- finite-difference gradient checking ----
struct GradCheckLeaf {
    std::string name;
    Tensor tensor;
};
struct GradCheckEntry {
    std::string name;
    double max_rel_err;
    bool pass;
};
struct GradCheckReport {
    std::vector<GradCheckEntry> leaves;
    bool pass;
};

// rebuild() must re-run the forward pass from the leaves' current values
// and return the scalar loss.
GradCheckReport grad_check(const std::function<Tensor()>& rebuild,
                           const std::vector<GradCheckLeaf>& leaves,
                           double step, double tol);

}  // namespace cmrt
