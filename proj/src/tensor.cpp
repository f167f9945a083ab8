#include "abd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace abd {

using detail::Node;

namespace {

std::shared_ptr<Node> make_node(std::vector<size_t> shape, std::vector<double> values) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return n;
}

size_t shape_count(const std::vector<size_t>& shape) {
    size_t c = 1;
    for (size_t e : shape) c *= e;
    return c;
}

bool any_requires(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->defined() && t->node()->requires_grad) return true;
    return false;
}

/// Builds a result node wired to its parents; fn pulls self.grad into parents.
Tensor make_op(std::vector<size_t> shape, std::vector<double> values,
               std::initializer_list<const Tensor*> parents,
               std::function<void(Node&)> fn) {
    auto n = make_node(std::move(shape), std::move(values));
    if (any_requires(parents)) {
        n->requires_grad = true;
        for (const Tensor* p : parents) n->parents.push_back(p->node());
        n->backward_fn = std::move(fn);
    }
    return Tensor::wrap(n);
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

} // namespace

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    size_t c = shape_count(shape);
    auto n = make_node(std::move(shape), std::vector<double>(c, 0.0));
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::from_values(std::vector<size_t> shape, std::vector<double> values,
                           bool requires_grad) {
    if (shape_count(shape) != values.size())
        throw std::invalid_argument("from_values: element count does not match shape");
    auto n = make_node(std::move(shape), std::move(values));
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    auto n = make_node({}, {v});
    n->requires_grad = requires_grad;
    return wrap(n);
}

size_t Tensor::rows() const {
    if (node_->shape.size() != 2) throw std::invalid_argument("rows(): tensor is not rank-2");
    return node_->shape[0];
}

size_t Tensor::cols() const {
    if (node_->shape.size() != 2) throw std::invalid_argument("cols(): tensor is not rank-2");
    return node_->shape[1];
}

double Tensor::item() const {
    if (node_->value.size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return node_->value[0];
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

void backward(const Tensor& loss) {
    auto root = loss.node();
    if (!root) throw std::invalid_argument("backward: undefined tensor");
    if (root->value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!root->requires_grad) throw std::invalid_argument("backward: loss does not require grad");
    if (root->consumed) throw std::logic_error("backward: graph already consumed");

    // Iterative post-order DFS over the requires-grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->backward_fn && n->consumed)
            throw std::logic_error("backward: graph already consumed");
        n->ensure_grad();
    }
    root->grad[0] = 1.0;

    // order is post-order, so reverse iteration visits each node after all
    // of its children.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->backward_fn(*n);
            n->consumed = true;
        }
    }
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {&a, &b}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled(a, b, -1.0); }

Tensor add_scaled(const Tensor& a, const Tensor& b, double s) {
    check_same_shape(a, b, "add_scaled");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s * bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {&a, &b}, [pa, pb, s](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += s * self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {&a, &b}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] += self.grad[i] * pa->value[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = s * av[i];
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {&a}, [pa, s](Node& self) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += s * self.grad[i];
    });
}

namespace {

template <class F, class G>
Tensor unary_op(const Tensor& x, F fwd, G dfwd) {
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    auto px = x.node();
    return make_op(x.shape(), std::move(out), {&x}, [px, dfwd](Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            px->grad[i] += self.grad[i] * dfwd(px->value[i], self.value[i]);
    });
}

} // namespace

Tensor sigmoid_op(const Tensor& x) {
    return unary_op(x, sigmoid_scalar,
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& x) {
    return unary_op(x, [](double v) { return std::tanh(v); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor silu(const Tensor& x) {
    return unary_op(x, [](double v) { return v * sigmoid_scalar(v); },
                    [](double v, double) {
                        double s = sigmoid_scalar(v);
                        return s * (1.0 + v * (1.0 - s));
                    });
}

Tensor softplus(const Tensor& x) {
    return unary_op(x,
                    [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
                    [](double v, double) { return sigmoid_scalar(v); });
}

Tensor exp_op(const Tensor& x) {
    return unary_op(x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto px = x.node();
    return make_op({}, {s}, {&x}, [px](Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0];
    });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul: inner dimensions differ");
    std::vector<double> out(m * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = av + i * k;
        for (size_t p = 0; p < k; ++p) {
            double aip = arow[p];
            const double* brow = bv + p * n;
            for (size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    auto pa = a.node(), pb = b.node();
    return make_op({m, n}, std::move(out), {&a, &b}, [pa, pb, m, k, n](Node& self) {
        const double* g = self.grad.data();
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA = g . B^T
            for (size_t i = 0; i < m; ++i) {
                const double* grow = g + i * n;
                double* darow = pa->grad.data() + i * k;
                for (size_t p = 0; p < k; ++p) {
                    const double* brow = pb->value.data() + p * n;
                    double acc = 0.0;
                    for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    darow[p] += acc;
                }
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB = A^T . g
            for (size_t i = 0; i < m; ++i) {
                const double* arow = pa->value.data() + i * k;
                const double* grow = g + i * n;
                for (size_t p = 0; p < k; ++p) {
                    double aip = arow[p];
                    double* dbrow = pb->grad.data() + p * n;
                    for (size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

Tensor matvec(const Tensor& w, const Tensor& x) {
    size_t m = w.rows(), n = w.cols();
    if (x.shape().size() != 1 || x.size() != n)
        throw std::invalid_argument("matvec: vector length mismatch");
    std::vector<double> out(m, 0.0);
    const double* wv = w.values().data();
    const double* xv = x.values().data();
    for (size_t i = 0; i < m; ++i) {
        const double* wrow = wv + i * n;
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += wrow[j] * xv[j];
        out[i] = acc;
    }
    auto pw = w.node(), px = x.node();
    return make_op({m}, std::move(out), {&w, &x}, [pw, px, m, n](Node& self) {
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                double g = self.grad[i];
                double* drow = pw->grad.data() + i * n;
                for (size_t j = 0; j < n; ++j) drow[j] += g * px->value[j];
            }
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                double g = self.grad[i];
                const double* wrow = pw->value.data() + i * n;
                for (size_t j = 0; j < n; ++j) px->grad[j] += g * wrow[j];
            }
        }
    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    size_t m = x.rows(), n = x.cols();
    if (v.size() != n) throw std::invalid_argument("add_rowvec: length mismatch");
    std::vector<double> out(x.values());
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[i * n + j] += v.values()[j];
    auto px = x.node(), pv = v.node();
    return make_op(x.shape(), std::move(out), {&x, &v}, [px, pv, m, n](Node& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) pv->grad[j] += self.grad[i * n + j];
        }
    });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    size_t m = x.rows(), n = x.cols();
    if (gain.size() != n) throw std::invalid_argument("rms_norm: gain length mismatch");
    std::vector<double> out(m * n);
    std::vector<double> inv_rms(m);
    const auto& xv = x.values();
    const auto& gv = gain.values();
    for (size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (size_t j = 0; j < n; ++j) ss += xv[i * n + j] * xv[i * n + j];
        double r = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        inv_rms[i] = r;
        for (size_t j = 0; j < n; ++j) out[i * n + j] = gv[j] * xv[i * n + j] * r;
    }
    auto px = x.node(), pg = gain.node();
    return make_op(x.shape(), std::move(out), {&x, &gain},
                   [px, pg, m, n, inv_rms = std::move(inv_rms)](Node& self) {
        for (size_t i = 0; i < m; ++i) {
            const double* g = self.grad.data() + i * n;
            const double* xr = px->value.data() + i * n;
            double r = inv_rms[i];
            if (pg->requires_grad) {
                pg->ensure_grad();
                for (size_t j = 0; j < n; ++j) pg->grad[j] += g[j] * xr[j] * r;
            }
            if (px->requires_grad) {
                px->ensure_grad();
                double dot = 0.0;
                for (size_t j = 0; j < n; ++j) dot += g[j] * pg->value[j] * xr[j];
                double coef = dot * r * r * r / static_cast<double>(n);
                double* dx = px->grad.data() + i * n;
                for (size_t j = 0; j < n; ++j)
                    dx[j] += g[j] * pg->value[j] * r - xr[j] * coef;
            }
        }
    });
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    size_t len = x.rows(), ch = x.cols();
    if (kernel.rows() != ch) throw std::invalid_argument("causal_conv1d: channel mismatch");
    size_t width = kernel.cols();
    if (bias.size() != ch) throw std::invalid_argument("causal_conv1d: bias length mismatch");
    std::vector<double> out(len * ch);
    const auto& xv = x.values();
    const auto& kv = kernel.values();
    const auto& bv = bias.values();
    for (size_t t = 0; t < len; ++t) {
        for (size_t c = 0; c < ch; ++c) {
            double acc = bv[c];
            for (size_t w = 0; w < width; ++w) {
                ptrdiff_t s = static_cast<ptrdiff_t>(t + w + 1) - static_cast<ptrdiff_t>(width);
                if (s >= 0) acc += kv[c * width + w] * xv[static_cast<size_t>(s) * ch + c];
            }
            out[t * ch + c] = acc;
        }
    }
    auto px = x.node(), pk = kernel.node(), pb = bias.node();
    return make_op(x.shape(), std::move(out), {&x, &kernel, &bias},
                   [px, pk, pb, len, ch, width](Node& self) {
        const double* g = self.grad.data();
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t t = 0; t < len; ++t)
                for (size_t c = 0; c < ch; ++c) pb->grad[c] += g[t * ch + c];
        }
        if (pk->requires_grad) {
            pk->ensure_grad();
            for (size_t t = 0; t < len; ++t)
                for (size_t c = 0; c < ch; ++c) {
                    double gv = g[t * ch + c];
                    for (size_t w = 0; w < width; ++w) {
                        ptrdiff_t s = static_cast<ptrdiff_t>(t + w + 1) - static_cast<ptrdiff_t>(width);
                        if (s >= 0)
                            pk->grad[c * width + w] += gv * px->value[static_cast<size_t>(s) * ch + c];
                    }
                }
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (size_t t = 0; t < len; ++t)
                for (size_t c = 0; c < ch; ++c) {
                    double gv = g[t * ch + c];
                    for (size_t w = 0; w < width; ++w) {
                        ptrdiff_t s = static_cast<ptrdiff_t>(t + w + 1) - static_cast<ptrdiff_t>(width);
                        if (s >= 0)
                            px->grad[static_cast<size_t>(s) * ch + c] += gv * pk->value[c * width + w];
                    }
                }
        }
    });
}

Tensor rows_gather(const Tensor& table, const std::vector<int>& idx) {
    size_t v = table.rows(), d = table.cols();
    std::vector<double> out(idx.size() * d);
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<size_t>(idx[i]) >= v)
            throw std::invalid_argument("rows_gather: index out of range");
        std::copy_n(table.values().data() + static_cast<size_t>(idx[i]) * d, d,
                    out.data() + i * d);
    }
    auto pt = table.node();
    return make_op({idx.size(), d}, std::move(out), {&table}, [pt, idx, d](Node& self) {
        pt->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i) {
            double* dst = pt->grad.data() + static_cast<size_t>(idx[i]) * d;
            const double* src = self.grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

Tensor outer_scale(const std::vector<double>& a, const Tensor& w) {
    size_t len = a.size(), d = w.size();
    std::vector<double> out(len * d);
    for (size_t t = 0; t < len; ++t)
        for (size_t j = 0; j < d; ++j) out[t * d + j] = a[t] * w.values()[j];
    auto pw = w.node();
    return make_op({len, d}, std::move(out), {&w}, [pw, a, d](Node& self) {
        pw->ensure_grad();
        for (size_t t = 0; t < a.size(); ++t) {
            const double* g = self.grad.data() + t * d;
            for (size_t j = 0; j < d; ++j) pw->grad[j] += a[t] * g[j];
        }
    });
}

Tensor const_matmul(const std::vector<double>& a, size_t m, size_t k, const Tensor& b) {
    if (a.size() != m * k) throw std::invalid_argument("const_matmul: bad constant shape");
    if (b.rows() != k) throw std::invalid_argument("const_matmul: inner dimensions differ");
    size_t n = b.cols();
    std::vector<double> out(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p) {
            double aip = a[i * k + p];
            const double* brow = b.values().data() + p * n;
            for (size_t j = 0; j < n; ++j) out[i * n + j] += aip * brow[j];
        }
    auto pb = b.node();
    return make_op({m, n}, std::move(out), {&b}, [pb, a, m, k, n](Node& self) {
        pb->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            const double* grow = self.grad.data() + i * n;
            for (size_t p = 0; p < k; ++p) {
                double aip = a[i * k + p];
                double* dbrow = pb->grad.data() + p * n;
                for (size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
            }
        }
    });
}

Tensor slice_cols(const Tensor& x, size_t c0, size_t c1) {
    size_t m = x.rows(), n = x.cols();
    if (c0 >= c1 || c1 > n) throw std::invalid_argument("slice_cols: bad column range");
    size_t w = c1 - c0;
    std::vector<double> out(m * w);
    for (size_t i = 0; i < m; ++i)
        std::copy_n(x.values().data() + i * n + c0, w, out.data() + i * w);
    auto px = x.node();
    return make_op({m, w}, std::move(out), {&x}, [px, m, n, c0, w](Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            const double* g = self.grad.data() + i * w;
            double* dst = px->grad.data() + i * n + c0;
            for (size_t j = 0; j < w; ++j) dst[j] += g[j];
        }
    });
}

Tensor concat_vec(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 1 || b.shape().size() != 1)
        throw std::invalid_argument("concat_vec: rank-1 tensors required");
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    auto pa = a.node(), pb = b.node();
    size_t na = a.size();
    return make_op({a.size() + b.size()}, std::move(out), {&a, &b}, [pa, pb, na](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += self.grad[na + i];
        }
    });
}

Tensor last_row(const Tensor& x) {
    size_t m = x.rows(), n = x.cols();
    if (m == 0) throw std::invalid_argument("last_row: empty matrix");
    std::vector<double> out(x.values().end() - static_cast<ptrdiff_t>(n), x.values().end());
    auto px = x.node();
    return make_op({n}, std::move(out), {&x}, [px, m, n](Node& self) {
        px->ensure_grad();
        for (size_t j = 0; j < n; ++j) px->grad[(m - 1) * n + j] += self.grad[j];
    });
}

Tensor mean_rows(const Tensor& x) {
    size_t m = x.rows(), n = x.cols();
    if (m == 0) throw std::invalid_argument("mean_rows: empty matrix");
    std::vector<double> out(n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j] += x.values()[i * n + j];
    for (size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    auto px = x.node();
    return make_op({n}, std::move(out), {&x}, [px, m, n](Node& self) {
        px->ensure_grad();
        double inv = 1.0 / static_cast<double>(m);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) px->grad[i * n + j] += self.grad[j] * inv;
    });
}

Tensor softmax_vec(const Tensor& logits) {
    if (logits.shape().size() != 1) throw std::invalid_argument("softmax_vec: rank-1 required");
    size_t n = logits.size();
    std::vector<double> out(n);
    double mx = *std::max_element(logits.values().begin(), logits.values().end());
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) {
        out[i] = std::exp(logits.values()[i] - mx);
        z += out[i];
    }
    for (size_t i = 0; i < n; ++i) out[i] /= z;
    auto pl = logits.node();
    return make_op({n}, std::move(out), {&logits}, [pl, n](Node& self) {
        pl->ensure_grad();
        double dot = 0.0;
        for (size_t i = 0; i < n; ++i) dot += self.grad[i] * self.value[i];
        for (size_t i = 0; i < n; ++i)
            pl->grad[i] += self.value[i] * (self.grad[i] - dot);
    });
}

Tensor cross_entropy(const Tensor& probs, int label, double weight) {
    if (probs.shape().size() != 1) throw std::invalid_argument("cross_entropy: rank-1 required");
    if (label < 0 || static_cast<size_t>(label) >= probs.size())
        throw std::invalid_argument("cross_entropy: label out of range");
    double s = 0.0;
    for (double p : probs.values()) s += p;
    if (std::abs(s - 1.0) > 1e-9)
        throw std::invalid_argument("cross_entropy: probabilities are not normalized");
    double p = probs.values()[static_cast<size_t>(label)];
    double loss = -weight * std::log(p);
    auto pp = probs.node();
    return make_op({}, {loss}, {&probs}, [pp, label, weight](Node& self) {
        pp->ensure_grad();
        pp->grad[static_cast<size_t>(label)] +=
            self.grad[0] * (-weight / pp->value[static_cast<size_t>(label)]);
    });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    double keep = 1.0 - rate;
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * mask[i];
    auto px = x.node();
    return make_op(x.shape(), std::move(out), {&x}, [px, mask = std::move(mask)](Node& self) {
        px->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * mask[i];
    });
}

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a,
                      const Tensor& b, const Tensor& c, const Tensor& skip) {
    size_t len = x.rows(), dim = x.cols();
    if (delta.rows() != len || delta.cols() != dim)
        throw std::invalid_argument("selective_scan: delta shape mismatch");
    if (a.rows() != dim) throw std::invalid_argument("selective_scan: A rows != channels");
    size_t nstate = a.cols();
    if (b.rows() != len || b.cols() != nstate || c.rows() != len || c.cols() != nstate)
        throw std::invalid_argument("selective_scan: B/C shape mismatch");
    if (skip.size() != dim) throw std::invalid_argument("selective_scan: skip length mismatch");

    const double* xv = x.values().data();
    const double* dv = delta.values().data();
    const double* av = a.values().data();
    const double* bv = b.values().data();
    const double* cv = c.values().data();
    const double* sv = skip.values().data();

    // h and the discretized decay are kept for the backward pass.
    auto h_all = std::make_shared<std::vector<double>>(len * dim * nstate);
    auto decay_all = std::make_shared<std::vector<double>>(len * dim * nstate);
    std::vector<double> out(len * dim);

    for (size_t t = 0; t < len; ++t) {
        for (size_t d = 0; d < dim; ++d) {
            double dt = dv[t * dim + d];
            double xt = xv[t * dim + d];
            double dbx_base = dt * xt;
            double* h = h_all->data() + (t * dim + d) * nstate;
            const double* hprev =
                t > 0 ? h_all->data() + ((t - 1) * dim + d) * nstate : nullptr;
            double* dec = decay_all->data() + (t * dim + d) * nstate;
            const double* arow = av + d * nstate;
            const double* brow = bv + t * nstate;
            const double* crow = cv + t * nstate;
            double y = sv[d] * xt;
            for (size_t n = 0; n < nstate; ++n) {
                double e = std::exp(dt * arow[n]);
                dec[n] = e;
                double hv = (hprev ? e * hprev[n] : 0.0) + dbx_base * brow[n];
                if (!std::isfinite(hv))
                    throw AbdError("selective_scan: non-finite state at (t=" +
                                   std::to_string(t) + ", d=" + std::to_string(d) +
                                   ", n=" + std::to_string(n) + ")");
                h[n] = hv;
                y += crow[n] * hv;
            }
            out[t * dim + d] = y;
        }
    }

    auto px = x.node(), pd = delta.node(), pa = a.node(), pb = b.node(),
         pc = c.node(), ps = skip.node();
    return make_op({len, dim}, std::move(out), {&x, &delta, &a, &b, &c, &skip},
                   [px, pd, pa, pb, pc, ps, h_all, decay_all, len, dim, nstate](Node& self) {
        for (auto& p : {px, pd, pa, pb, pc, ps}) p->ensure_grad();
        const double* g = self.grad.data();
        // Running dL/dh_t, updated backward in time.
        std::vector<double> gh(dim * nstate, 0.0);
        for (size_t t = len; t-- > 0;) {
            for (size_t d = 0; d < dim; ++d) {
                double gy = g[t * dim + d];
                double xt = px->value[t * dim + d];
                double dt = pd->value[t * dim + d];
                const double* h = h_all->data() + (t * dim + d) * nstate;
                const double* hprev =
                    t > 0 ? h_all->data() + ((t - 1) * dim + d) * nstate : nullptr;
                const double* dec = decay_all->data() + (t * dim + d) * nstate;
                const double* arow = pa->value.data() + d * nstate;
                const double* brow = pb->value.data() + t * nstate;
                const double* crow = pc->value.data() + t * nstate;
                double* ghd = gh.data() + d * nstate;

                ps->grad[d] += gy * xt;
                double gx = gy * ps->value[d];
                double gdt = 0.0;
                for (size_t n = 0; n < nstate; ++n) {
                    double ghn = ghd[n] + gy * crow[n];
                    pc->grad[t * nstate + n] += gy * h[n];
                    double hp = hprev ? hprev[n] : 0.0;
                    pa->grad[d * nstate + n] += ghn * hp * dt * dec[n];
                    gdt += ghn * (hp * arow[n] * dec[n] + brow[n] * xt);
                    pb->grad[t * nstate + n] += ghn * dt * xt;
                    gx += ghn * dt * brow[n];
                    ghd[n] = ghn * dec[n]; // contribution to dL/dh_{t-1}
                }
                px->grad[t * dim + d] += gx;
                pd->grad[t * dim + d] += gdt;
            }
        }
    });
}

} // namespace abd
