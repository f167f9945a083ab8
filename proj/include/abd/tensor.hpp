#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "abd/common.hpp"

namespace abd {

namespace detail {

struct Node {
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad; // allocated on demand, same length as value
    bool requires_grad = false;
    bool consumed = false; // set on non-leaf nodes once backward has run
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

} // namespace detail

/// Shape-carrying fp64 array participating in a reverse-mode graph.
/// Rank 0 (scalar), 1 (vector) and 2 (row-major matrix) are supported.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor from_values(std::vector<size_t> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t size() const { return node_->value.size(); }
    size_t rows() const;
    size_t cols() const;

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    /// Gradient buffer; allocated (zeroed) on first access.
    std::vector<double>& grad() { node_->ensure_grad(); return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }

    double item() const;

    void zero_grad();

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) { Tensor t; t.node_ = std::move(n); return t; }

  private:
    std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar loss. Each non-leaf node may
/// be consumed exactly once; a second backward through the same graph throws.
void backward(const Tensor& loss);

// ---- graph ops -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double s);
Tensor add_scaled(const Tensor& a, const Tensor& b, double s); // a + s*b
Tensor matmul(const Tensor& a, const Tensor& b);       // (M,K)x(K,N)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b); // x(M,K) w(K,N) b(N)
Tensor matvec(const Tensor& w, const Tensor& x);       // (M,N)x(N) -> (M)
Tensor add_rowvec(const Tensor& x, const Tensor& v);   // broadcast v over rows
Tensor sigmoid_op(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor sum(const Tensor& x);                           // -> scalar
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6); // row-wise
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias); // x(L,C) k(C,W) b(C)
Tensor rows_gather(const Tensor& table, const std::vector<int>& idx);
Tensor outer_scale(const std::vector<double>& a, const Tensor& w); // (L,d): a[t]*w
Tensor const_matmul(const std::vector<double>& a, size_t m, size_t k, const Tensor& b); // const (m,k) x b(k,n)
Tensor slice_cols(const Tensor& x, size_t c0, size_t c1);
Tensor concat_vec(const Tensor& a, const Tensor& b);   // rank-1 concat
Tensor last_row(const Tensor& x);                      // (L,C) -> (C)
Tensor mean_rows(const Tensor& x);                     // (L,C) -> (C)
Tensor softmax_vec(const Tensor& logits);              // rank-1
/// -weight * log(probs[label]); probs must already be normalized.
Tensor cross_entropy(const Tensor& probs, int label, double weight = 1.0);
Tensor dropout(const Tensor& x, double rate, Rng& rng);

/// Input-dependent diagonal linear recurrence over time:
///   h_t[d,n] = exp(delta_t[d] * a[d,n]) * h_{t-1}[d,n] + delta_t[d] * b_t[n] * x_t[d]
///   y_t[d]   = sum_n c_t[n] * h_t[d,n] + skip[d] * x_t[d]
/// x, delta: (L, D); a: (D, N); b, c: (L, N); skip: (D). Sequential in t.
/// Throws if any state value goes non-finite, naming the first (t, d, n).
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a,
                      const Tensor& b, const Tensor& c, const Tensor& skip);

} // namespace abd
