#include "cmrt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace cmrt {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace {

std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t->value) {
        if (!std::isfinite(v)) {
            throw Error(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

void check_inputs_finite(const std::vector<Tensor>& ins, const char* op) {
    for (const auto& t : ins) {
        for (double v : t->value) {
            if (!std::isfinite(v)) {
                throw Error(std::string("non-finite input to op '") + op + "'");
            }
        }
    }
}

Tensor new_op(const char* op, std::vector<int64_t> shape,
              std::vector<Tensor> parents,
              std::function<void(TensorNode&)> backprop) {
    check_inputs_finite(parents, op);
    auto t = std::make_shared<TensorNode>();
    t->shape = std::move(shape);
    t->value.assign(t->size(), 0.0);
    t->op = op;
    for (const auto& p : parents) {
        if (p->requires_grad) t->requires_grad = true;
    }
    if (t->requires_grad) {
        t->parents = std::move(parents);
        t->backprop = std::move(backprop);
    }
    return t;
}

void accum(const Tensor& p, int64_t idx, double g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad[idx] += g;
}

}  // namespace

Tensor make_tensor(std::vector<int64_t> shape, std::vector<double> values,
                   bool requires_grad) {
    auto t = std::make_shared<TensorNode>();
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw Error("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    if (static_cast<int64_t>(values.size()) != n) {
        throw Error("values length " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
    }
    t->shape = std::move(shape);
    t->value = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

Tensor zeros(std::vector<int64_t> shape, bool requires_grad) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor full(std::vector<int64_t> shape, double v) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return make_tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor scalar(double v) { return make_tensor({1}, {v}); }

Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev,
             bool requires_grad) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = stddev * rng.normal();
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
        throw Error("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                    shape_str(b->shape));
    }
    auto [ta, tb] = std::pair(a, b);
    Tensor out = new_op("matmul", {a->shape[0], b->shape[1]}, {a, b},
                        [ta, tb](TensorNode& o) {
        CMatMap A(ta->value.data(), ta->shape[0], ta->shape[1]);
        CMatMap B(tb->value.data(), tb->shape[0], tb->shape[1]);
        CMatMap Gr(o.grad.data(), o.shape[0], o.shape[1]);
        if (ta->requires_grad) {
            ta->ensure_grad();
            MatMap dA(ta->grad.data(), ta->shape[0], ta->shape[1]);
            dA.noalias() += Gr * B.transpose();
        }
        if (tb->requires_grad) {
            tb->ensure_grad();
            MatMap dB(tb->grad.data(), tb->shape[0], tb->shape[1]);
            dB.noalias() += A.transpose() * Gr;
        }
    });
    CMatMap A(a->value.data(), a->shape[0], a->shape[1]);
    CMatMap B(b->value.data(), b->shape[0], b->shape[1]);
    MatMap C(out->value.data(), out->shape[0], out->shape[1]);
    C.noalias() = A * B;
    check_finite(out, "matmul");
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1]) {
        throw Error("matmul_nt: incompatible shapes " + shape_str(a->shape) +
                    " x " + shape_str(b->shape) + "^T");
    }
    auto [ta, tb] = std::pair(a, b);
    Tensor out = new_op("matmul_nt", {a->shape[0], b->shape[0]}, {a, b},
                        [ta, tb](TensorNode& o) {
        CMatMap A(ta->value.data(), ta->shape[0], ta->shape[1]);
        CMatMap B(tb->value.data(), tb->shape[0], tb->shape[1]);
        CMatMap Gr(o.grad.data(), o.shape[0], o.shape[1]);
        if (ta->requires_grad) {
            ta->ensure_grad();
            MatMap dA(ta->grad.data(), ta->shape[0], ta->shape[1]);
            dA.noalias() += Gr * B;
        }
        if (tb->requires_grad) {
            tb->ensure_grad();
            MatMap dB(tb->grad.data(), tb->shape[0], tb->shape[1]);
            dB.noalias() += Gr.transpose() * A;
        }
    });
    CMatMap A(a->value.data(), a->shape[0], a->shape[1]);
    CMatMap B(b->value.data(), b->shape[0], b->shape[1]);
    MatMap C(out->value.data(), out->shape[0], out->shape[1]);
    C.noalias() = A * B.transpose();
    check_finite(out, "matmul_nt");
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a->shape != b->shape) {
        throw Error("add: shape mismatch " + shape_str(a->shape) + " vs " +
                    shape_str(b->shape));
    }
    auto [ta, tb] = std::pair(a, b);
    Tensor out = new_op("add", a->shape, {a, b}, [ta, tb](TensorNode& o) {
        for (size_t i = 0; i < o.grad.size(); ++i) {
            accum(ta, i, o.grad[i]);
            accum(tb, i, o.grad[i]);
        }
    });
    for (size_t i = 0; i < out->value.size(); ++i)
        out->value[i] = a->value[i] + b->value[i];
    check_finite(out, "add");
    return out;
}

Tensor add_bias(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 1 || a->shape[1] != b->shape[0]) {
        throw Error("add_bias: shape mismatch " + shape_str(a->shape) + " vs " +
                    shape_str(b->shape));
    }
    auto [ta, tb] = std::pair(a, b);
    int64_t r = a->shape[0], c = a->shape[1];
    Tensor out = new_op("add_bias", a->shape, {a, b}, [ta, tb, r, c](TensorNode& o) {
        for (int64_t i = 0; i < r; ++i) {
            for (int64_t j = 0; j < c; ++j) {
                accum(ta, i * c + j, o.grad[i * c + j]);
                accum(tb, j, o.grad[i * c + j]);
            }
        }
    });
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
            out->value[i * c + j] = a->value[i * c + j] + b->value[j];
    check_finite(out, "add_bias");
    return out;
}

Tensor scalar_mul(const Tensor& a, double k) {
    if (!std::isfinite(k)) throw Error("non-finite input to op 'scalar_mul'");
    Tensor ta = a;
    Tensor out = new_op("scalar_mul", a->shape, {a}, [ta, k](TensorNode& o) {
        for (size_t i = 0; i < o.grad.size(); ++i) accum(ta, i, k * o.grad[i]);
    });
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = k * a->value[i];
    check_finite(out, "scalar_mul");
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a->shape != b->shape) {
        throw Error("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                    shape_str(b->shape));
    }
    auto [ta, tb] = std::pair(a, b);
    Tensor out = new_op("mul", a->shape, {a, b}, [ta, tb](TensorNode& o) {
        for (size_t i = 0; i < o.grad.size(); ++i) {
            accum(ta, i, tb->value[i] * o.grad[i]);
            accum(tb, i, ta->value[i] * o.grad[i]);
        }
    });
    for (size_t i = 0; i < out->value.size(); ++i)
        out->value[i] = a->value[i] * b->value[i];
    check_finite(out, "mul");
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw Error("concat: empty input list");
    if (axis != 0 && axis != 1) throw Error("concat: axis must be 0 or 1");
    for (const auto& p : parts) {
        if (p->shape.size() != 2)
            throw Error("concat: all inputs must be 2-D, got " + shape_str(p->shape));
    }
    int64_t r = parts[0]->shape[0], c = parts[0]->shape[1];
    int64_t total = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            if (p->shape[1] != c)
                throw Error("concat axis 0: column mismatch " +
                            shape_str(p->shape) + " vs " + shape_str(parts[0]->shape));
            total += p->shape[0];
        } else {
            if (p->shape[0] != r)
                throw Error("concat axis 1: row mismatch " + shape_str(p->shape) +
                            " vs " + shape_str(parts[0]->shape));
            total += p->shape[1];
        }
    }
    std::vector<int64_t> shape = axis == 0 ? std::vector<int64_t>{total, c}
                                           : std::vector<int64_t>{r, total};
    std::vector<Tensor> ps = parts;
    Tensor out = new_op("concat", shape, ps, [ps, axis](TensorNode& o) {
        int64_t oc = o.shape[1];
        int64_t off = 0;
        for (const auto& p : ps) {
            int64_t pr = p->shape[0], pc = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t i = 0; i < pr; ++i)
                    for (int64_t j = 0; j < pc; ++j)
                        p->grad[i * pc + j] +=
                            axis == 0 ? o.grad[(off + i) * oc + j]
                                      : o.grad[i * oc + off + j];
            }
            off += axis == 0 ? pr : pc;
        }
    });
    int64_t oc = shape[1];
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t pr = p->shape[0], pc = p->shape[1];
        for (int64_t i = 0; i < pr; ++i)
            for (int64_t j = 0; j < pc; ++j) {
                if (axis == 0)
                    out->value[(off + i) * oc + j] = p->value[i * pc + j];
                else
                    out->value[i * oc + off + j] = p->value[i * pc + j];
            }
        off += axis == 0 ? pr : pc;
    }
    check_finite(out, "concat");
    return out;
}

Tensor slice_rows(const Tensor& a, int64_t lo, int64_t hi) {
    if (a->shape.size() != 2 || lo < 0 || hi > a->shape[0] || lo > hi) {
        throw Error("slice_rows: range [" + std::to_string(lo) + "," +
                    std::to_string(hi) + ") invalid for " + shape_str(a->shape));
    }
    Tensor ta = a;
    int64_t c = a->shape[1];
    Tensor out = new_op("slice_rows", {hi - lo, c}, {a}, [ta, lo, c](TensorNode& o) {
        for (size_t i = 0; i < o.grad.size(); ++i)
            accum(ta, lo * c + static_cast<int64_t>(i), o.grad[i]);
    });
    std::copy(a->value.begin() + lo * c, a->value.begin() + hi * c,
              out->value.begin());
    return out;
}

Tensor slice_cols(const Tensor& a, int64_t lo, int64_t hi) {
    if (a->shape.size() != 2 || lo < 0 || hi > a->shape[1] || lo > hi) {
        throw Error("slice_cols: range [" + std::to_string(lo) + "," +
                    std::to_string(hi) + ") invalid for " + shape_str(a->shape));
    }
    Tensor ta = a;
    int64_t r = a->shape[0], c = a->shape[1], w = hi - lo;
    Tensor out = new_op("slice_cols", {r, w}, {a}, [ta, lo, r, c, w](TensorNode& o) {
        if (!ta->requires_grad) return;
        ta->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j)
                ta->grad[i * c + lo + j] += o.grad[i * w + j];
    });
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j)
            out->value[i * w + j] = a->value[i * c + lo + j];
    return out;
}

Tensor mean_pool_rows(const Tensor& a) {
    if (a->shape.size() != 2 || a->shape[0] == 0) {
        throw Error("mean_pool_rows: need non-empty 2-D input, got " +
                    shape_str(a->shape));
    }
    Tensor ta = a;
    int64_t r = a->shape[0], c = a->shape[1];
    Tensor out = new_op("mean_pool_rows", {c}, {a}, [ta, r, c](TensorNode& o) {
        // backward distributes exactly 1/r to each pooled element
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
                accum(ta, i * c + j, o.grad[j] / static_cast<double>(r));
    });
    for (int64_t j = 0; j < c; ++j) {
        double s = 0.0;
        for (int64_t i = 0; i < r; ++i) s += a->value[i * c + j];
        out->value[j] = s / static_cast<double>(r);
    }
    check_finite(out, "mean_pool_rows");
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    if (n != a->size()) {
        throw Error("reshape: cannot view " + shape_str(a->shape) + " as " +
                    shape_str(shape));
    }
    Tensor ta = a;
    Tensor out = new_op("reshape", shape, {a}, [ta](TensorNode& o) {
        for (size_t i = 0; i < o.grad.size(); ++i) accum(ta, i, o.grad[i]);
    });
    out->value = a->value;
    return out;
}

Tensor softmax(const Tensor& a) {
    int64_t r = a->rows(), c = a->shape.back();
    if (a->shape.size() > 2) throw Error("softmax: rank > 2 unsupported");
    Tensor ta = a;
    Tensor out = new_op("softmax", a->shape, {a}, [ta, r, c](TensorNode& o) {
        if (!ta->requires_grad) return;
        ta->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            const double* y = &o.value[i * c];
            const double* g = &o.grad[i * c];
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += y[j] * g[j];
            for (int64_t j = 0; j < c; ++j)
                ta->grad[i * c + j] += y[j] * (g[j] - dot);
        }
    });
    for (int64_t i = 0; i < r; ++i) {
        double mx = a->value[i * c];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a->value[i * c + j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = std::exp(a->value[i * c + j] - mx);
            out->value[i * c + j] = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) out->value[i * c + j] /= z;
    }
    check_finite(out, "softmax");
    return out;
}

Tensor log_softmax(const Tensor& a) {
    int64_t r = a->rows(), c = a->shape.back();
    if (a->shape.size() > 2) throw Error("log_softmax: rank > 2 unsupported");
    Tensor ta = a;
    Tensor out = new_op("log_softmax", a->shape, {a}, [ta, r, c](TensorNode& o) {
        if (!ta->requires_grad) return;
        ta->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            const double* lp = &o.value[i * c];
            const double* g = &o.grad[i * c];
            double gsum = 0.0;
            for (int64_t j = 0; j < c; ++j) gsum += g[j];
            for (int64_t j = 0; j < c; ++j)
                ta->grad[i * c + j] += g[j] - std::exp(lp[j]) * gsum;
        }
    });
    for (int64_t i = 0; i < r; ++i) {
        double mx = a->value[i * c];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a->value[i * c + j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(a->value[i * c + j] - mx);
        double lse = mx + std::log(z);
        for (int64_t j = 0; j < c; ++j) out->value[i * c + j] = a->value[i * c + j] - lse;
    }
    check_finite(out, "log_softmax");
    return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 1 || b->shape.size() != 1 || a->shape[0] != b->shape[0]) {
        throw Error("cosine_similarity: need equal-length vectors, got " +
                    shape_str(a->shape) + " and " + shape_str(b->shape));
    }
    int64_t n = a->shape[0];
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        dot += a->value[i] * b->value[i];
        na += a->value[i] * a->value[i];
        nb += b->value[i] * b->value[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == 0.0 || nb == 0.0)
        throw Error("cosine_similarity: zero-norm vector, cosine undefined");
    double c = dot / (na * nb);
    auto [ta, tb] = std::pair(a, b);
    Tensor out = new_op("cosine_similarity", {1}, {a, b},
                        [ta, tb, n, na, nb, c](TensorNode& o) {
        double g = o.grad[0];
        for (int64_t i = 0; i < n; ++i) {
            accum(ta, i, g * (tb->value[i] / (na * nb) - c * ta->value[i] / (na * na)));
            accum(tb, i, g * (ta->value[i] / (na * nb) - c * tb->value[i] / (nb * nb)));
        }
    });
    out->value[0] = c;
    check_finite(out, "cosine_similarity");
    return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
    if (a->shape.size() != 2 || gain->shape.size() != 1 ||
        bias->shape.size() != 1 || gain->shape[0] != a->shape[1] ||
        bias->shape[0] != a->shape[1]) {
        throw Error("layer_norm: shape mismatch " + shape_str(a->shape) + ", " +
                    shape_str(gain->shape) + ", " + shape_str(bias->shape));
    }
    constexpr double kEps = 1e-5;
    int64_t r = a->shape[0], c = a->shape[1];
    // cache per-row mean and inverse stddev for backward
    auto stats = std::make_shared<std::vector<double>>(2 * r);
    for (int64_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += a->value[i * c + j];
        mu /= c;
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = a->value[i * c + j] - mu;
            var += d * d;
        }
        var /= c;
        (*stats)[2 * i] = mu;
        (*stats)[2 * i + 1] = 1.0 / std::sqrt(var + kEps);
    }
    auto [ta, tg] = std::pair(a, gain);
    Tensor tb = bias;
    Tensor out = new_op("layer_norm", a->shape, {a, gain, bias},
                        [ta, tg, tb, stats, r, c](TensorNode& o) {
        for (int64_t i = 0; i < r; ++i) {
            double mu = (*stats)[2 * i], inv = (*stats)[2 * i + 1];
            double m1 = 0.0, m2 = 0.0;  // mean(gy), mean(gy * xhat)
            for (int64_t j = 0; j < c; ++j) {
                double xh = (ta->value[i * c + j] - mu) * inv;
                double gy = o.grad[i * c + j] * tg->value[j];
                m1 += gy;
                m2 += gy * xh;
                accum(tg, j, o.grad[i * c + j] * xh);
                accum(tb, j, o.grad[i * c + j]);
            }
            m1 /= c;
            m2 /= c;
            if (ta->requires_grad) {
                ta->ensure_grad();
                for (int64_t j = 0; j < c; ++j) {
                    double xh = (ta->value[i * c + j] - mu) * inv;
                    double gy = o.grad[i * c + j] * tg->value[j];
                    ta->grad[i * c + j] += inv * (gy - m1 - xh * m2);
                }
            }
        }
    });
    for (int64_t i = 0; i < r; ++i) {
        double mu = (*stats)[2 * i], inv = (*stats)[2 * i + 1];
        for (int64_t j = 0; j < c; ++j)
            out->value[i * c + j] =
                gain->value[j] * (a->value[i * c + j] - mu) * inv + bias->value[j];
    }
    check_finite(out, "layer_norm");
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor ta = a;
    Tensor out = new_op("gelu", a->shape, {a}, [ta](TensorNode& o) {
        constexpr double kInvSqrt2 = 0.7071067811865475;
        constexpr double kInvSqrt2Pi = 0.3989422804014327;
        for (size_t i = 0; i < o.grad.size(); ++i) {
            double x = ta->value[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            accum(ta, i, o.grad[i] * (cdf + x * pdf));
        }
    });
    constexpr double kInvSqrt2 = 0.7071067811865475;
    for (size_t i = 0; i < out->value.size(); ++i) {
        double x = a->value[i];
        out->value[i] = x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    }
    check_finite(out, "gelu");
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids) {
    if (table->shape.size() != 2) {
        throw Error("embedding_lookup: table must be 2-D, got " +
                    shape_str(table->shape));
    }
    int64_t v = table->shape[0], d = table->shape[1];
    for (int64_t id : ids) {
        if (id < 0 || id >= v)
            throw Error("embedding_lookup: id " + std::to_string(id) +
                        " out of vocabulary of size " + std::to_string(v));
    }
    Tensor tt = table;
    auto idv = std::make_shared<std::vector<int64_t>>(ids);
    int64_t n = static_cast<int64_t>(ids.size());
    Tensor out = new_op("embedding_lookup", {n, d}, {table},
                        [tt, idv, d](TensorNode& o) {
        for (size_t i = 0; i < idv->size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                accum(tt, (*idv)[i] * d + j, o.grad[i * d + j]);
    });
    for (int64_t i = 0; i < n; ++i)
        std::copy(table->value.begin() + ids[i] * d,
                  table->value.begin() + (ids[i] + 1) * d,
                  out->value.begin() + i * d);
    check_finite(out, "embedding_lookup");
    return out;
}

Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int64_t>& gold) {
    if (logits->shape.size() != 2 ||
        logits->shape[0] != static_cast<int64_t>(gold.size())) {
        throw Error("cross_entropy_with_logits: logits " + shape_str(logits->shape) +
                    " vs " + std::to_string(gold.size()) + " gold labels");
    }
    int64_t r = logits->shape[0], c = logits->shape[1];
    for (int64_t g : gold) {
        if (g < 0 || g >= c)
            throw Error("cross_entropy_with_logits: gold id " + std::to_string(g) +
                        " out of range");
    }
    Tensor tl = logits;
    auto gv = std::make_shared<std::vector<int64_t>>(gold);
    // cache softmax rows for backward
    auto probs = std::make_shared<std::vector<double>>(r * c);
    double total = 0.0;
    for (int64_t i = 0; i < r; ++i) {
        double mx = logits->value[i * c];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, logits->value[i * c + j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = std::exp(logits->value[i * c + j] - mx);
            (*probs)[i * c + j] = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
        total -= std::log((*probs)[i * c + gold[i]]);
    }
    Tensor out = new_op("cross_entropy_with_logits", {1}, {logits},
                        [tl, gv, probs, r, c](TensorNode& o) {
        if (!tl->requires_grad) return;
        tl->ensure_grad();
        double g = o.grad[0] / static_cast<double>(r);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
                tl->grad[i * c + j] +=
                    g * ((*probs)[i * c + j] - (j == (*gv)[i] ? 1.0 : 0.0));
    });
    out->value[0] = total / static_cast<double>(r);
    check_finite(out, "cross_entropy_with_logits");
    return out;
}

Tensor kl_from_log_probs(const Tensor& log_p, const Tensor& log_q) {
    if (log_p->shape != log_q->shape || log_p->shape.size() != 2) {
        throw Error("kl_from_log_probs: shape mismatch " + shape_str(log_p->shape) +
                    " vs " + shape_str(log_q->shape));
    }
    int64_t r = log_p->shape[0], c = log_p->shape[1];
    auto [tp, tq] = std::pair(log_p, log_q);
    Tensor out = new_op("kl_from_log_probs", {1}, {log_p, log_q},
                        [tp, tq, r, c](TensorNode& o) {
        double g = o.grad[0] / static_cast<double>(r);
        for (int64_t i = 0; i < r * c; ++i) {
            double p = std::exp(tp->value[i]);
            accum(tp, i, g * p * (tp->value[i] - tq->value[i] + 1.0));
            accum(tq, i, -g * p);
        }
    });
    double total = 0.0;
    for (int64_t i = 0; i < r * c; ++i)
        total += std::exp(log_p->value[i]) * (log_p->value[i] - log_q->value[i]);
    out->value[0] = total / static_cast<double>(r);
    check_finite(out, "kl_from_log_probs");
    return out;
}

Tensor detach(const Tensor& a) {
    auto t = std::make_shared<TensorNode>();
    t->shape = a->shape;
    t->value = a->value;
    t->op = "detach";
    return t;
}

void backward(const Tensor& loss) {
    if (!loss->is_scalar())
        throw Error("backward: loss must be a scalar, got shape of size " +
                    std::to_string(loss->size()));
    if (!loss->requires_grad) return;
    // iterative DFS topological sort over nodes that require grad
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // interior nodes get fresh buffers each pass; only graph leaves
    // accumulate across calls
    for (TensorNode* n : order) {
        if (n->backprop) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

void zero_grad(const Tensor& t) { t->grad.assign(t->value.size(), 0.0); }

GradCheckReport grad_check(const std::function<Tensor()>& rebuild,
                           const std::vector<GradCheckLeaf>& leaves,
                           double step, double tol) {
    if (step <= 0.0) throw Error("grad_check: step must be positive");
    Tensor loss = rebuild();
    for (const auto& l : leaves) zero_grad(l.tensor);
    backward(loss);
    // central differences lose ~eps*|f|/step of absolute precision to
    // cancellation, so near-zero gradients need a loss-scaled floor in the
    // relative-error denominator
    double floor = 1e-5 * (1.0 + std::abs(loss->value[0]));

    GradCheckReport report;
    report.pass = true;
    for (const auto& l : leaves) {
        std::vector<double> analytic = l.tensor->grad;
        if (analytic.empty()) analytic.assign(l.tensor->value.size(), 0.0);
        double max_err = 0.0;
        for (size_t i = 0; i < l.tensor->value.size(); ++i) {
            double saved = l.tensor->value[i];
            l.tensor->value[i] = saved + step;
            double up = rebuild()->value[0];
            l.tensor->value[i] = saved - step;
            double dn = rebuild()->value[0];
            l.tensor->value[i] = saved;
            double numeric = (up - dn) / (2.0 * step);
            double err = std::abs(analytic[i] - numeric) /
                         (std::max(std::abs(analytic[i]), std::abs(numeric)) + floor);
            max_err = std::max(max_err, err);
        }
        bool pass = max_err <= tol;
        report.leaves.push_back({l.name, max_err, pass});
        if (!pass) report.pass = false;
    }
    return report;
}

}  // namespace cmrt
