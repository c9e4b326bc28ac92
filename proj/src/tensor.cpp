#include "speech2c/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "speech2c/errors.hpp"

namespace s2c {

namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                              shape_str(b->shape));
    }
}

// Rows-of-last-axis view: how many rows of width `d` the tensor holds.
int last_axis(const TensorPtr& x) {
    if (x->shape.empty()) throw dimension_error("op requires at least 1-d tensor");
    return x->shape.back();
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw dimension_error("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> s, bool rg)
    : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0), requires_grad(rg) {}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

TensorPtr Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    auto t = std::make_shared<Tensor>(std::move(shape), requires_grad);
    if (values.size() != t->data.size()) {
        throw dimension_error("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                              shape_str(t->shape));
    }
    t->data = std::move(values);
    return t;
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

double Tensor::value() const {
    if (data.size() != 1) throw contract_error("Tensor::value on non-scalar tensor " + shape_str(shape));
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    backward_ran = false;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (g.size() != data.size()) {
        throw dimension_error("accumulate_grad: gradient size " + std::to_string(g.size()) +
                              " for tensor " + shape_str(shape));
    }
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

TensorPtr make_op_node(std::vector<int> shape, std::vector<TensorPtr> inputs,
                       std::function<void(Tensor&)> backward_fn) {
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) {
            if (in && in->requires_grad) {
                track = true;
                break;
            }
        }
    }
    auto out = Tensor::zeros(std::move(shape), track);
    if (track) {
        out->parents = std::move(inputs);
        out->backward_fn = std::move(backward_fn);
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise / shape ops
// ---------------------------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "add");
    auto out = make_op_node(a->shape, {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad) a->accumulate_grad(self.grad);
        if (b->requires_grad) b->accumulate_grad(self.grad);
    });
    for (int i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "sub");
    auto out = make_op_node(a->shape, {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad) a->accumulate_grad(self.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < b->numel(); ++i) b->grad[i] -= self.grad[i];
        }
    });
    for (int i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "mul");
    auto out = make_op_node(a->shape, {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int i = 0; i < a->numel(); ++i) a->grad[i] += self.grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < b->numel(); ++i) b->grad[i] += self.grad[i] * a->data[i];
        }
    });
    for (int i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
    auto out = make_op_node(a->shape, {a}, [a, c](Tensor& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < a->numel(); ++i) a->grad[i] += c * self.grad[i];
    });
    for (int i = 0; i < out->numel(); ++i) out->data[i] = c * a->data[i];
    return out;
}

TensorPtr gelu(const TensorPtr& x) {
    auto out = make_op_node(x->shape, {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (int i = 0; i < x->numel(); ++i) {
            const double v = x->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            x->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
    constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
    for (int i = 0; i < out->numel(); ++i) {
        const double v = x->data[i];
        out->data[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return out;
}

TensorPtr transpose2d(const TensorPtr& x) {
    if (x->shape.size() != 2) throw dimension_error("transpose2d on tensor " + shape_str(x->shape));
    const int m = x->shape[0], n = x->shape[1];
    auto out = make_op_node({n, m}, {x}, [x, m, n](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) x->grad[i * n + j] += self.grad[j * m + i];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[j * m + i] = x->data[i * n + j];
    return out;
}

TensorPtr sum_all(const TensorPtr& x) {
    auto out = make_op_node({1}, {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < x->numel(); ++i) x->grad[i] += self.grad[0];
    });
    double s = 0.0;
    for (double v : x->data) s += v;
    out->data[0] = s;
    return out;
}

TensorPtr mean_all(const TensorPtr& x) {
    const double inv = 1.0 / x->numel();
    auto out = make_op_node({1}, {x}, [x, inv](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < x->numel(); ++i) x->grad[i] += inv * self.grad[0];
    });
    double s = 0.0;
    for (double v : x->data) s += v;
    out->data[0] = s * inv;
    return out;
}

TensorPtr add_rows(const TensorPtr& x, const TensorPtr& b) {
    if (x->shape.size() != 2 || b->shape.size() != 1 || x->shape[1] != b->shape[0]) {
        throw dimension_error("add_rows: " + shape_str(x->shape) + " vs " + shape_str(b->shape));
    }
    const int rows = x->shape[0], d = x->shape[1];
    auto out = make_op_node(x->shape, {x, b}, [x, b, rows, d](Tensor& self) {
        if (x->requires_grad) x->accumulate_grad(self.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (int t = 0; t < rows; ++t)
                for (int j = 0; j < d; ++j) b->grad[j] += self.grad[t * d + j];
        }
    });
    for (int t = 0; t < rows; ++t)
        for (int j = 0; j < d; ++j) out->data[t * d + j] = x->data[t * d + j] + b->data[j];
    return out;
}

TensorPtr slice_cols(const TensorPtr& x, int c0, int c1) {
    if (x->shape.size() != 2) throw dimension_error("slice_cols on tensor " + shape_str(x->shape));
    const int rows = x->shape[0], d = x->shape[1];
    if (c0 < 0 || c1 > d || c0 >= c1) {
        throw argument_error("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") for width " + std::to_string(d));
    }
    const int w = c1 - c0;
    auto out = make_op_node({rows, w}, {x}, [x, c0, rows, d, w](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int t = 0; t < rows; ++t)
            for (int j = 0; j < w; ++j) x->grad[t * d + c0 + j] += self.grad[t * w + j];
    });
    for (int t = 0; t < rows; ++t)
        for (int j = 0; j < w; ++j) out->data[t * w + j] = x->data[t * d + c0 + j];
    return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw argument_error("concat_cols: no parts");
    const int rows = parts[0]->shape[0];
    int total = 0;
    for (const auto& p : parts) {
        if (p->shape.size() != 2 || p->shape[0] != rows) {
            throw dimension_error("concat_cols: part " + shape_str(p->shape) + " does not match " +
                                  std::to_string(rows) + " rows");
        }
        total += p->shape[1];
    }
    auto ps = parts;
    auto out = make_op_node({rows, total}, std::vector<TensorPtr>(parts.begin(), parts.end()),
                            [ps, rows, total](Tensor& self) {
                                int off = 0;
                                for (const auto& p : ps) {
                                    const int w = p->shape[1];
                                    if (p->requires_grad) {
                                        p->ensure_grad();
                                        for (int t = 0; t < rows; ++t)
                                            for (int j = 0; j < w; ++j)
                                                p->grad[t * w + j] += self.grad[t * total + off + j];
                                    }
                                    off += w;
                                }
                            });
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape[1];
        for (int t = 0; t < rows; ++t)
            for (int j = 0; j < w; ++j) out->data[t * total + off + j] = p->data[t * w + j];
        off += w;
    }
    return out;
}

TensorPtr slice_flat(const TensorPtr& x, int begin, int len, std::vector<int> shape) {
    if (begin < 0 || len <= 0 || begin + len > x->numel()) {
        throw argument_error("slice_flat: range [" + std::to_string(begin) + "," +
                             std::to_string(begin + len) + ") exceeds " + std::to_string(x->numel()));
    }
    if (shape_numel(shape) != len) {
        throw dimension_error("slice_flat: shape " + shape_str(shape) + " does not hold " +
                              std::to_string(len) + " values");
    }
    auto out = make_op_node(std::move(shape), {x}, [x, begin, len](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < len; ++i) x->grad[begin + i] += self.grad[i];
    });
    for (int i = 0; i < len; ++i) out->data[i] = x->data[begin + i];
    return out;
}

TensorPtr gather_rows(const TensorPtr& x, const std::vector<int>& rows) {
    if (x->shape.size() != 2) throw dimension_error("gather_rows on tensor " + shape_str(x->shape));
    const int n = x->shape[0], d = x->shape[1];
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= n) {
            throw index_error("gather_rows: row " + std::to_string(rows[i]) + " at position " +
                              std::to_string(i) + " out of range [0," + std::to_string(n) + ")");
        }
    }
    const int k = static_cast<int>(rows.size());
    if (k == 0) throw argument_error("gather_rows: empty selection");
    auto idx = rows;
    auto out = make_op_node({k, d}, {x}, [x, idx, d](Tensor& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j) x->grad[idx[i] * d + j] += self.grad[i * d + j];
    });
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < d; ++j) out->data[i * d + j] = x->data[idx[i] * d + j];
    return out;
}

TensorPtr replace_rows(const TensorPtr& x, const std::vector<int>& rows, const TensorPtr& r) {
    if (x->shape.size() != 2 || r->shape.size() != 1 || r->shape[0] != x->shape[1]) {
        throw dimension_error("replace_rows: " + shape_str(x->shape) + " vs row " + shape_str(r->shape));
    }
    const int n = x->shape[0], d = x->shape[1];
    std::vector<std::uint8_t> replaced(static_cast<std::size_t>(n), 0);
    for (int t : rows) {
        if (t < 0 || t >= n) {
            throw index_error("replace_rows: row " + std::to_string(t) + " out of range [0," +
                              std::to_string(n) + ")");
        }
        replaced[static_cast<std::size_t>(t)] = 1;
    }
    auto out = make_op_node(x->shape, {x, r}, [x, r, replaced, n, d](Tensor& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int t = 0; t < n; ++t) {
                if (replaced[static_cast<std::size_t>(t)]) continue;
                for (int j = 0; j < d; ++j) x->grad[t * d + j] += self.grad[t * d + j];
            }
        }
        if (r->requires_grad) {
            r->ensure_grad();
            for (int t = 0; t < n; ++t) {
                if (!replaced[static_cast<std::size_t>(t)]) continue;
                for (int j = 0; j < d; ++j) r->grad[j] += self.grad[t * d + j];
            }
        }
    });
    for (int t = 0; t < n; ++t) {
        if (replaced[static_cast<std::size_t>(t)]) {
            for (int j = 0; j < d; ++j) out->data[t * d + j] = r->data[j];
        } else {
            for (int j = 0; j < d; ++j) out->data[t * d + j] = x->data[t * d + j];
        }
    }
    return out;
}

TensorPtr embedding(const TensorPtr& table, const std::vector<int>& ids) {
    if (table->shape.size() != 2) throw dimension_error("embedding table " + shape_str(table->shape));
    const int v = table->shape[0], d = table->shape[1];
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw index_error("embedding: id " + std::to_string(ids[i]) + " at position " +
                              std::to_string(i) + " out of range [0," + std::to_string(v) + ")");
        }
    }
    if (ids.empty()) throw argument_error("embedding: empty id list");
    const int n = static_cast<int>(ids.size());
    auto idx = ids;
    auto out = make_op_node({n, d}, {table}, [table, idx, d](Tensor& self) {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j) table->grad[idx[i] * d + j] += self.grad[i * d + j];
    });
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out->data[i * d + j] = table->data[idx[i] * d + j];
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
        throw dimension_error("matmul: inner dimensions disagree, " + shape_str(a->shape) + " x " +
                              shape_str(b->shape));
    }
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_op_node({m, n}, {a, b}, [a, b, m, k, n](Tensor& self) {
        // dA = G * B^T, dB = A^T * G
        if (a->requires_grad) {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = self.grad[i * n + j];
                    if (g == 0.0) continue;
                    for (int p = 0; p < k; ++p) a->grad[i * k + p] += g * b->data[p * n + j];
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double av = a->data[i * k + p];
                    if (av == 0.0) continue;
                    for (int j = 0; j < n; ++j) b->grad[p * n + j] += av * self.grad[i * n + j];
                }
        }
    });
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = a->data[i * k + p];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) out->data[i * n + j] += av * b->data[p * n + j];
        }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

TensorPtr softmax(const TensorPtr& x, double temperature) {
    if (!(temperature > 0.0)) {
        throw argument_error("softmax: temperature must be positive, got " + std::to_string(temperature));
    }
    const int d = last_axis(x);
    const int rows = x->numel() / d;
    auto out_holder = make_op_node(x->shape, {x}, nullptr);
    for (int t = 0; t < rows; ++t) {
        const double* xr = &x->data[static_cast<std::size_t>(t) * d];
        double* yr = &out_holder->data[static_cast<std::size_t>(t) * d];
        double mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            yr[j] = std::exp((xr[j] - mx) / temperature);
            s += yr[j];
        }
        for (int j = 0; j < d; ++j) yr[j] /= s;
    }
    if (out_holder->requires_grad) {
        out_holder->backward_fn = [x, d, rows, temperature](Tensor& self) {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int t = 0; t < rows; ++t) {
                const double* y = &self.data[static_cast<std::size_t>(t) * d];
                const double* g = &self.grad[static_cast<std::size_t>(t) * d];
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += g[j] * y[j];
                for (int j = 0; j < d; ++j)
                    x->grad[static_cast<std::size_t>(t) * d + j] += y[j] * (g[j] - dot) / temperature;
            }
        };
    }
    return out_holder;
}

TensorPtr log_softmax(const TensorPtr& x) {
    const int d = last_axis(x);
    const int rows = x->numel() / d;
    auto out = make_op_node(x->shape, {x}, nullptr);
    for (int t = 0; t < rows; ++t) {
        const double* xr = &x->data[static_cast<std::size_t>(t) * d];
        double* yr = &out->data[static_cast<std::size_t>(t) * d];
        double mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += std::exp(xr[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < d; ++j) yr[j] = xr[j] - lse;
    }
    if (out->requires_grad) {
        out->backward_fn = [x, d, rows](Tensor& self) {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int t = 0; t < rows; ++t) {
                const double* y = &self.data[static_cast<std::size_t>(t) * d];
                const double* g = &self.grad[static_cast<std::size_t>(t) * d];
                double gs = 0.0;
                for (int j = 0; j < d; ++j) gs += g[j];
                for (int j = 0; j < d; ++j)
                    x->grad[static_cast<std::size_t>(t) * d + j] += g[j] - std::exp(y[j]) * gs;
            }
        };
    }
    return out;
}

TensorPtr masked_softmax(const TensorPtr& x, const std::vector<std::uint8_t>& mask) {
    const int d = last_axis(x);
    const int rows = x->numel() / d;
    if (static_cast<int>(mask.size()) != rows * d) {
        throw dimension_error("masked_softmax: mask size " + std::to_string(mask.size()) +
                              " for tensor " + shape_str(x->shape));
    }
    auto msk = mask;
    auto out = make_op_node(x->shape, {x}, nullptr);
    for (int t = 0; t < rows; ++t) {
        const double* xr = &x->data[static_cast<std::size_t>(t) * d];
        const std::uint8_t* mr = &msk[static_cast<std::size_t>(t) * d];
        double* yr = &out->data[static_cast<std::size_t>(t) * d];
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < d; ++j)
            if (mr[j]) mx = std::max(mx, xr[j]);
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row -> zeros
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            if (mr[j]) {
                yr[j] = std::exp(xr[j] - mx);
                s += yr[j];
            }
        }
        for (int j = 0; j < d; ++j)
            if (mr[j]) yr[j] /= s;
    }
    if (out->requires_grad) {
        out->backward_fn = [x, msk, d, rows](Tensor& self) {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int t = 0; t < rows; ++t) {
                const double* y = &self.data[static_cast<std::size_t>(t) * d];
                const double* g = &self.grad[static_cast<std::size_t>(t) * d];
                const std::uint8_t* mr = &msk[static_cast<std::size_t>(t) * d];
                double dot = 0.0;
                for (int j = 0; j < d; ++j)
                    if (mr[j]) dot += g[j] * y[j];
                for (int j = 0; j < d; ++j)
                    if (mr[j]) x->grad[static_cast<std::size_t>(t) * d + j] += y[j] * (g[j] - dot);
            }
        };
    }
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps) {
    if (!(eps > 0.0)) throw argument_error("layer_norm: eps must be positive");
    const int d = last_axis(x);
    if (gain->shape != std::vector<int>{d} || bias->shape != std::vector<int>{d}) {
        throw dimension_error("layer_norm: gain " + shape_str(gain->shape) + " / bias " +
                              shape_str(bias->shape) + " for feature width " + std::to_string(d));
    }
    const int rows = x->numel() / d;
    auto out = make_op_node(x->shape, {x, gain, bias}, nullptr);
    // keep per-row (mu, inv_std) for backward
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * 2);
    for (int t = 0; t < rows; ++t) {
        const double* v = &x->data[static_cast<std::size_t>(t) * d];
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += v[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (v[j] - mu) * (v[j] - mu);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * static_cast<std::size_t>(t)] = mu;
        (*stats)[2 * static_cast<std::size_t>(t) + 1] = inv;
        for (int j = 0; j < d; ++j)
            out->data[static_cast<std::size_t>(t) * d + j] = gain->data[j] * (v[j] - mu) * inv + bias->data[j];
    }
    if (out->requires_grad) {
        out->backward_fn = [x, gain, bias, stats, d, rows](Tensor& self) {
            std::vector<double> dxhat(static_cast<std::size_t>(d));
            for (int t = 0; t < rows; ++t) {
                const double* v = &x->data[static_cast<std::size_t>(t) * d];
                const double* g = &self.grad[static_cast<std::size_t>(t) * d];
                const double mu = (*stats)[2 * static_cast<std::size_t>(t)];
                const double inv = (*stats)[2 * static_cast<std::size_t>(t) + 1];
                if (gain->requires_grad) gain->ensure_grad();
                if (bias->requires_grad) bias->ensure_grad();
                for (int j = 0; j < d; ++j) {
                    const double xhat = (v[j] - mu) * inv;
                    if (gain->requires_grad) gain->grad[j] += g[j] * xhat;
                    if (bias->requires_grad) bias->grad[j] += g[j];
                    dxhat[static_cast<std::size_t>(j)] = g[j] * gain->data[j];
                }
                if (!x->requires_grad) continue;
                x->ensure_grad();
                double sum_dxhat = 0.0, sum_dxhat_xc = 0.0;
                for (int j = 0; j < d; ++j) {
                    sum_dxhat += dxhat[static_cast<std::size_t>(j)];
                    sum_dxhat_xc += dxhat[static_cast<std::size_t>(j)] * (v[j] - mu);
                }
                // dvar and dmu folded into one pass
                const double dvar = -0.5 * inv * inv * inv * sum_dxhat_xc;
                const double dmu = -inv * sum_dxhat;
                for (int j = 0; j < d; ++j) {
                    x->grad[static_cast<std::size_t>(t) * d + j] +=
                        dxhat[static_cast<std::size_t>(j)] * inv + dvar * 2.0 * (v[j] - mu) / d + dmu / d;
                }
            }
        };
    }
    return out;
}

TensorPtr row_l2_normalize(const TensorPtr& x, double eps) {
    const int d = last_axis(x);
    const int rows = x->numel() / d;
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    auto out = make_op_node(x->shape, {x}, nullptr);
    for (int t = 0; t < rows; ++t) {
        const double* v = &x->data[static_cast<std::size_t>(t) * d];
        double n2 = 0.0;
        for (int j = 0; j < d; ++j) n2 += v[j] * v[j];
        const double nrm = std::sqrt(n2);
        (*norms)[static_cast<std::size_t>(t)] = nrm;
        const double f = std::max(nrm, eps);
        for (int j = 0; j < d; ++j) out->data[static_cast<std::size_t>(t) * d + j] = v[j] / f;
    }
    if (out->requires_grad) {
        out->backward_fn = [x, norms, d, rows, eps](Tensor& self) {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int t = 0; t < rows; ++t) {
                const double* v = &x->data[static_cast<std::size_t>(t) * d];
                const double* g = &self.grad[static_cast<std::size_t>(t) * d];
                const double nrm = (*norms)[static_cast<std::size_t>(t)];
                if (nrm > eps) {
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += g[j] * v[j];
                    const double n3 = nrm * nrm * nrm;
                    for (int j = 0; j < d; ++j)
                        x->grad[static_cast<std::size_t>(t) * d + j] += g[j] / nrm - v[j] * dot / n3;
                } else {
                    for (int j = 0; j < d; ++j)
                        x->grad[static_cast<std::size_t>(t) * d + j] += g[j] / eps;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses / similarity
// ---------------------------------------------------------------------------

TensorPtr cosine_sim(const TensorPtr& a, const TensorPtr& b, double eps) {
    if (a->shape.size() != 1 || b->shape.size() != 1 || a->shape != b->shape) {
        throw dimension_error("cosine_sim: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    const int d = a->shape[0];
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int j = 0; j < d; ++j) {
        dot += a->data[j] * b->data[j];
        na2 += a->data[j] * a->data[j];
        nb2 += b->data[j] * b->data[j];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double fa = std::max(na, eps), fb = std::max(nb, eps);
    auto out = make_op_node({1}, {a, b}, [a, b, d, na, nb, fa, fb, eps](Tensor& self) {
        const double g = self.grad[0];
        const double y = self.data[0];
        if (a->requires_grad) {
            a->ensure_grad();
            for (int j = 0; j < d; ++j) {
                double da = b->data[j] / (fa * fb);
                if (na > eps) da -= y * a->data[j] / (na * na);
                a->grad[j] += g * da;
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int j = 0; j < d; ++j) {
                double db = a->data[j] / (fa * fb);
                if (nb > eps) db -= y * b->data[j] / (nb * nb);
                b->grad[j] += g * db;
            }
        }
    });
    out->data[0] = dot / (fa * fb);
    return out;
}

TensorPtr cross_entropy(const TensorPtr& log_probs, const std::vector<int>& targets,
                        std::optional<int> ignore_index) {
    if (log_probs->shape.size() != 2) {
        throw dimension_error("cross_entropy: log_probs " + shape_str(log_probs->shape));
    }
    const int n = log_probs->shape[0], v = log_probs->shape[1];
    if (static_cast<int>(targets.size()) != n) {
        throw dimension_error("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                              std::to_string(n) + " rows");
    }
    int count = 0;
    for (int i = 0; i < n; ++i) {
        if (ignore_index && targets[i] == *ignore_index) continue;
        if (targets[i] < 0 || targets[i] >= v) {
            throw index_error("cross_entropy: target " + std::to_string(targets[i]) + " at position " +
                              std::to_string(i) + " out of range [0," + std::to_string(v) + ")");
        }
        ++count;
    }
    auto tgt = targets;
    auto out = make_op_node({1}, {log_probs}, [log_probs, tgt, ignore_index, count, v](Tensor& self) {
        if (!log_probs->requires_grad || count == 0) return;
        log_probs->ensure_grad();
        const double w = self.grad[0] / count;
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            if (ignore_index && tgt[i] == *ignore_index) continue;
            log_probs->grad[i * static_cast<std::size_t>(v) + static_cast<std::size_t>(tgt[i])] -= w;
        }
    });
    // empty selection: 0 by convention (callers may legitimately mask nothing)
    if (count > 0) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            if (ignore_index && targets[i] == *ignore_index) continue;
            s -= log_probs->data[static_cast<std::size_t>(i) * v + targets[i]];
        }
        out->data[0] = s / count;
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

int conv1d_out_len(int t_in, int kernel, int stride) {
    if (t_in < kernel) return 0;
    return (t_in - kernel) / stride + 1;
}

TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernel, int stride) {
    if (x->shape.size() != 2 || kernel->shape.size() != 3) {
        throw dimension_error("conv1d: x " + shape_str(x->shape) + ", kernel " + shape_str(kernel->shape));
    }
    if (stride < 1) throw argument_error("conv1d: stride must be >= 1");
    const int t_in = x->shape[0], c_in = x->shape[1];
    const int c_out = kernel->shape[0], kc_in = kernel->shape[1], k = kernel->shape[2];
    if (kc_in != c_in) {
        throw dimension_error("conv1d: input channels " + std::to_string(c_in) + " vs kernel " +
                              std::to_string(kc_in));
    }
    if (t_in < k) {
        throw argument_error("conv1d: input length " + std::to_string(t_in) +
                             " shorter than kernel width " + std::to_string(k));
    }
    const int t_out = conv1d_out_len(t_in, k, stride);
    auto out = make_op_node({t_out, c_out}, {x, kernel},
                            [x, kernel, stride, t_out, c_in, c_out, k](Tensor& self) {
                                if (x->requires_grad) {
                                    x->ensure_grad();
                                    for (int t = 0; t < t_out; ++t)
                                        for (int o = 0; o < c_out; ++o) {
                                            const double g = self.grad[t * c_out + o];
                                            if (g == 0.0) continue;
                                            for (int c = 0; c < c_in; ++c)
                                                for (int j = 0; j < k; ++j)
                                                    x->grad[(t * stride + j) * c_in + c] +=
                                                        g * kernel->data[(o * c_in + c) * k + j];
                                        }
                                }
                                if (kernel->requires_grad) {
                                    kernel->ensure_grad();
                                    for (int t = 0; t < t_out; ++t)
                                        for (int o = 0; o < c_out; ++o) {
                                            const double g = self.grad[t * c_out + o];
                                            if (g == 0.0) continue;
                                            for (int c = 0; c < c_in; ++c)
                                                for (int j = 0; j < k; ++j)
                                                    kernel->grad[(o * c_in + c) * k + j] +=
                                                        g * x->data[(t * stride + j) * c_in + c];
                                        }
                                }
                            });
    for (int t = 0; t < t_out; ++t)
        for (int o = 0; o < c_out; ++o) {
            double s = 0.0;
            for (int c = 0; c < c_in; ++c)
                for (int j = 0; j < k; ++j)
                    s += x->data[(t * stride + j) * c_in + c] * kernel->data[(o * c_in + c) * k + j];
            out->data[t * c_out + o] = s;
        }
    return out;
}

// ---------------------------------------------------------------------------
// relative position bias
// ---------------------------------------------------------------------------

TensorPtr rel_pos_bias(const TensorPtr& table, int q_len, int k_len, int max_distance) {
    if (q_len < 1 || k_len < 1) throw argument_error("rel_pos_bias: lengths must be >= 1");
    const int span = 2 * max_distance + 1;
    if (table->shape.size() != 2 || table->shape[1] != span) {
        throw dimension_error("rel_pos_bias: table " + shape_str(table->shape) + " needs " +
                              std::to_string(span) + " offsets");
    }
    const int heads = table->shape[0];
    auto out = make_op_node({heads, q_len, k_len}, {table},
                            [table, q_len, k_len, max_distance, span, heads](Tensor& self) {
                                if (!table->requires_grad) return;
                                table->ensure_grad();
                                for (int h = 0; h < heads; ++h)
                                    for (int i = 0; i < q_len; ++i)
                                        for (int j = 0; j < k_len; ++j) {
                                            const int off = std::clamp(j - i, -max_distance, max_distance) +
                                                            max_distance;
                                            table->grad[h * span + off] +=
                                                self.grad[(h * q_len + i) * k_len + j];
                                        }
                            });
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < q_len; ++i)
            for (int j = 0; j < k_len; ++j) {
                const int off = std::clamp(j - i, -max_distance, max_distance) + max_distance;
                out->data[(h * q_len + i) * k_len + j] = table->data[h * span + off];
            }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (!loss) throw contract_error("backward: null loss");
    if (loss->numel() != 1) {
        throw contract_error("backward: loss must be scalar, got " + shape_str(loss->shape));
    }
    if (loss->backward_ran) {
        throw contract_error("backward: already called on this node; rebuild the graph or zero grads first");
    }
    // Iterative post-order DFS; order is structural (parents vector order),
    // so repeated runs on the same graph are bit-identical.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    // order is post-order: parents before children; walk it backwards.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    loss->backward_ran = true;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(const std::vector<TensorPtr>& params, AdamState& state, double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->data.size(), 0.0);
            state.v[i].assign(params[i]->data.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw dimension_error("adam_step: state holds " + std::to_string(state.m.size()) +
                              " buffers for " + std::to_string(params.size()) + " params");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (state.m[i].size() != p.data.size()) {
            throw dimension_error("adam_step: moment buffer " + std::to_string(i) + " has " +
                                  std::to_string(state.m[i].size()) + " values, param " +
                                  shape_str(p.shape));
        }
        if (!p.grad.empty() && p.grad.size() != p.data.size()) {
            throw dimension_error("adam_step: grad/param size mismatch for param " + std::to_string(i));
        }
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            const double g = p.grad.empty() ? 0.0 : p.grad[j];
            state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
            state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
            const double mhat = state.m[i][j] / bc1;
            const double vhat = state.v[i][j] / bc2;
            p.data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace s2c
