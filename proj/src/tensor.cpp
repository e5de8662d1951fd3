#include "trinity/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace trinity {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_slope(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

Tensor make_op(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
               std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (node->data.size() != shape_numel(node->shape))
        throw DimensionError("internal: op produced " + std::to_string(node->data.size()) +
                             " values for shape " + shape_to_string(node->shape));
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) {
                track = true;
                break;
            }
        }
    }
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward_fn);
    }
    return Tensor::wrap(node);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
}

// rows = product of leading dims, cols = last dim
std::pair<std::size_t, std::size_t> as_rows_cols(const Shape& shape, const char* op) {
    if (shape.empty()) throw DimensionError(std::string(op) + ": rank-0 tensor not supported");
    std::size_t cols = shape.back();
    std::size_t rows = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
    return {rows, cols};
}

void matmul_accum(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m,k] += a[m,n] * b^T where b is [k,n]
void matmul_nt_accum(const double* a, const double* b, double* out, std::size_t m, std::size_t n,
                     std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* orow = out + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double* brow = b + j * n;
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
            orow[j] += acc;
        }
    }
}

// out[k,n] += a^T * b where a is [m,k], b is [m,n]
void matmul_tn_accum(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* orow = out + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_recording_enabled() { return g_grad_enabled; }

// ---- Tensor basics ----

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    node->data.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (data.size() != shape_numel(shape))
        throw DimensionError("from_data: " + std::to_string(data.size()) + " values for shape " +
                             shape_to_string(shape));
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, RandomSource& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = rng.gaussian(0.0, stddev);
    return t;
}

Tensor Tensor::rand_uniform(Shape shape, RandomSource& rng, double lo, double hi,
                            bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = rng.uniform(lo, hi);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("shape() on empty tensor");
    return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

double* Tensor::data() {
    if (!node_) throw ContractError("data() on empty tensor");
    return node_->data.data();
}
const double* Tensor::data() const {
    if (!node_) throw ContractError("data() on empty tensor");
    return node_->data.data();
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw DimensionError("at: rank mismatch");
    std::size_t flat = 0;
    std::size_t dim = 0;
    for (auto i : idx) {
        if (i >= s[dim]) throw DimensionError("at: index out of range");
        flat = flat * s[dim] + i;
        ++dim;
    }
    return node_->data[flat];
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, got shape " +
                                         shape_to_string(shape()));
    return node_->data[0];
}

Tensor Tensor::grad() const {
    if (!node_) throw ContractError("grad() on empty tensor");
    Tensor g = zeros(node_->shape);
    if (node_->grad.size() == node_->data.size())
        std::copy(node_->grad.begin(), node_->grad.end(), g.node_->data.begin());
    return g;
}

const double* Tensor::grad_data() const {
    if (!node_) throw ContractError("grad_data() on empty tensor");
    node_->ensure_grad();
    return node_->grad.data();
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
    if (!node_) return Tensor();
    return from_data(node_->shape, node_->data, node_->requires_grad);
}

Tensor Tensor::detached() const {
    if (!node_) return Tensor();
    return from_data(node_->shape, node_->data, false);
}

bool Tensor::all_finite() const {
    if (!node_) return true;
    for (double v : node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const double* ap = a.data();
    const double* bp = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] + bp[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const double* ap = a.data();
    const double* bp = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] - bp[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const double* ap = a.data();
    const double* bp = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] * bp[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                an->grad[i] += n.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                bn->grad[i] += n.grad[i] * an->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const double* ap = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] * c;
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {an}, [an, c](TensorNode& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const double* ap = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] + c;
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {an}, [an](TensorNode& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.size());
    const double* ap = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(ap[i]);
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {an}, [an](TensorNode& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            an->grad[i] += n.grad[i] * gelu_slope(an->data[i]);
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    auto [rows, cols] = as_rows_cols(x.shape(), "add_bias");
    if (bias.shape() != Shape{cols})
        throw DimensionError("add_bias: bias shape " + shape_to_string(bias.shape()) +
                             " != (last dim " + std::to_string(cols) + ")");
    std::vector<double> out(x.size());
    const double* xp = x.data();
    const double* bp = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xp[r * cols + c] + bp[c];
    auto xn = x.node_ptr();
    auto bn = bias.node_ptr();
    return make_op(x.shape(), std::move(out), {xn, bn},
                   [xn, bn, rows = rows, cols = cols](TensorNode& node) {
                       if (xn->requires_grad) {
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < node.grad.size(); ++i)
                               xn->grad[i] += node.grad[i];
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cols; ++c)
                                   bn->grad[c] += node.grad[r * cols + c];
                       }
                   });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    const double* ap = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ap[i]));
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {an}, [an](TensorNode& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double s = n.data[i];
            an->grad[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() == 2 && sb.size() == 2) {
        if (sa[1] != sb[0])
            throw DimensionError("matmul: inner extents disagree, " + shape_to_string(sa) +
                                 " x " + shape_to_string(sb));
        const std::size_t m = sa[0], k = sa[1], n = sb[1];
        std::vector<double> out(m * n, 0.0);
        matmul_accum(a.data(), b.data(), out.data(), m, k, n);
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        return make_op({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](TensorNode& node) {
            if (an->requires_grad) {
                an->ensure_grad();
                matmul_nt_accum(node.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                matmul_tn_accum(an->data.data(), node.grad.data(), bn->grad.data(), m, k, n);
            }
        });
    }
    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[1])
            throw DimensionError("matmul: batched shapes disagree, " + shape_to_string(sa) +
                                 " x " + shape_to_string(sb));
        const std::size_t batches = sa[0], m = sa[1], k = sa[2], n = sb[2];
        std::vector<double> out(batches * m * n, 0.0);
        for (std::size_t t = 0; t < batches; ++t)
            matmul_accum(a.data() + t * m * k, b.data() + t * k * n, out.data() + t * m * n, m, k,
                         n);
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        return make_op({batches, m, n}, std::move(out), {an, bn},
                       [an, bn, batches, m, k, n](TensorNode& node) {
                           for (std::size_t t = 0; t < batches; ++t) {
                               const double* g = node.grad.data() + t * m * n;
                               if (an->requires_grad) {
                                   an->ensure_grad();
                                   matmul_nt_accum(g, bn->data.data() + t * k * n,
                                                   an->grad.data() + t * m * k, m, n, k);
                               }
                               if (bn->requires_grad) {
                                   bn->ensure_grad();
                                   matmul_tn_accum(an->data.data() + t * m * k, g,
                                                   bn->grad.data() + t * k * n, m, k, n);
                               }
                           }
                       });
    }
    throw DimensionError("matmul: expected rank 2 or batched rank 3, got " + shape_to_string(sa) +
                         " x " + shape_to_string(sb));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
        throw DimensionError("matmul_nt: incompatible shapes " + shape_to_string(sa) + " x " +
                             shape_to_string(sb) + "^T");
    const std::size_t m = sa[0], n = sa[1], k = sb[0];
    std::vector<double> out(m * k, 0.0);
    matmul_nt_accum(a.data(), b.data(), out.data(), m, n, k);
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op({m, k}, std::move(out), {an, bn}, [an, bn, m, n, k](TensorNode& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            matmul_accum(node.grad.data(), bn->data.data(), an->grad.data(), m, k, n);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            matmul_tn_accum(node.grad.data(), an->data.data(), bn->grad.data(), m, k, n);
        }
    });
}

// ---- convolution ----

Tensor conv1d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    const Shape& si = input.shape();
    const Shape& sk = kernel.shape();
    if (si.size() != 2 || sk.size() != 3)
        throw DimensionError("conv1d_same: expected input [N, C_in] and kernel [k, C_in, C_out]");
    const std::size_t n_len = si[0], c_in = si[1];
    const std::size_t k = sk[0], c_out = sk[2];
    if (k % 2 == 0) throw ConfigError("conv1d_same: kernel size must be odd, got " +
                                      std::to_string(k));
    if (sk[1] != c_in)
        throw DimensionError("conv1d_same: kernel channels " + shape_to_string(sk) +
                             " do not match input " + shape_to_string(si));
    if (bias.shape() != Shape{c_out})
        throw DimensionError("conv1d_same: bias shape " + shape_to_string(bias.shape()) +
                             " != (C_out)");
    const std::size_t radius = (k - 1) / 2;

    std::vector<double> out(n_len * c_out);
    const double* bp = bias.data();
    for (std::size_t n = 0; n < n_len; ++n)
        for (std::size_t co = 0; co < c_out; ++co) out[n * c_out + co] = bp[co];
    const double* xp = input.data();
    const double* wp = kernel.data();
    for (std::size_t n = 0; n < n_len; ++n) {
        double* orow = out.data() + n * c_out;
        for (std::size_t t = 0; t < k; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + t) -
                                       static_cast<std::ptrdiff_t>(radius);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(n_len)) continue;
            const double* xrow = xp + static_cast<std::size_t>(src) * c_in;
            const double* wplane = wp + t * c_in * c_out;
            for (std::size_t ci = 0; ci < c_in; ++ci) {
                const double xv = xrow[ci];
                if (xv == 0.0) continue;
                const double* wrow = wplane + ci * c_out;
                for (std::size_t co = 0; co < c_out; ++co) orow[co] += xv * wrow[co];
            }
        }
    }

    auto xn = input.node_ptr();
    auto wn = kernel.node_ptr();
    auto bn = bias.node_ptr();
    return make_op({n_len, c_out}, std::move(out), {xn, wn, bn},
                   [xn, wn, bn, n_len, c_in, c_out, k, radius](TensorNode& node) {
                       const double* g = node.grad.data();
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (std::size_t n = 0; n < n_len; ++n)
                               for (std::size_t co = 0; co < c_out; ++co)
                                   bn->grad[co] += g[n * c_out + co];
                       }
                       if (xn->requires_grad) xn->ensure_grad();
                       if (wn->requires_grad) wn->ensure_grad();
                       for (std::size_t n = 0; n < n_len; ++n) {
                           const double* grow = g + n * c_out;
                           for (std::size_t t = 0; t < k; ++t) {
                               const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + t) -
                                                          static_cast<std::ptrdiff_t>(radius);
                               if (src < 0 || src >= static_cast<std::ptrdiff_t>(n_len)) continue;
                               const std::size_t s = static_cast<std::size_t>(src);
                               const std::size_t plane = t * c_in * c_out;
                               for (std::size_t ci = 0; ci < c_in; ++ci) {
                                   const double* wrow = wn->data.data() + plane + ci * c_out;
                                   const double xv = xn->data[s * c_in + ci];
                                   double dx = 0.0;
                                   for (std::size_t co = 0; co < c_out; ++co) {
                                       const double gv = grow[co];
                                       dx += gv * wrow[co];
                                       if (wn->requires_grad)
                                           wn->grad[plane + ci * c_out + co] += gv * xv;
                                   }
                                   if (xn->requires_grad) xn->grad[s * c_in + ci] += dx;
                               }
                           }
                       }
                   });
}

// ---- embedding ----

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    const Shape& st = table.shape();
    if (st.size() != 2) throw DimensionError("embedding_rows: table must be [V, H]");
    const std::size_t vocab = st[0], width = st[1];
    std::vector<double> out(ids.size() * width);
    const double* tp = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw ContractError("embedding_rows: id " + std::to_string(id) +
                                " outside table of " + std::to_string(vocab) + " rows");
        std::copy(tp + static_cast<std::size_t>(id) * width,
                  tp + (static_cast<std::size_t>(id) + 1) * width, out.begin() + i * width);
    }
    auto tn = table.node_ptr();
    auto ids_copy = ids;
    return make_op({ids.size(), width}, std::move(out), {tn},
                   [tn, ids_copy, width](TensorNode& node) {
                       tn->ensure_grad();
                       for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                           const std::size_t row = static_cast<std::size_t>(ids_copy[i]);
                           for (std::size_t c = 0; c < width; ++c)
                               tn->grad[row * width + c] += node.grad[i * width + c];
                       }
                   });
}

// ---- masked softmax ----

Tensor masked_softmax(const Tensor& scores, const Tensor& allow_mask) {
    check_same_shape(scores, allow_mask, "masked_softmax");
    auto [rows, cols] = as_rows_cols(scores.shape(), "masked_softmax");
    std::vector<double> out(scores.size(), 0.0);
    const double* sp = scores.data();
    const double* mp = allow_mask.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* srow = sp + r * cols;
        const double* mrow = mp + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (mrow[c] != 0.0 && srow[c] > mx) mx = srow[c];
        if (mx == -std::numeric_limits<double>::infinity())
            throw ContractError("masked_softmax: row " + std::to_string(r) +
                                " has no allowed positions");
        double denom = 0.0;
        double* orow = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            if (mrow[c] != 0.0) {
                orow[c] = std::exp(srow[c] - mx);
                denom += orow[c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) orow[c] /= denom;
    }
    auto sn = scores.node_ptr();
    auto mn = allow_mask.node_ptr();
    return make_op(scores.shape(), std::move(out), {sn, mn},
                   [sn, rows = rows, cols = cols](TensorNode& node) {
                       if (!sn->requires_grad) return;
                       sn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* p = node.data.data() + r * cols;
                           const double* g = node.grad.data() + r * cols;
                           double dot = 0.0;
                           for (std::size_t c = 0; c < cols; ++c) dot += p[c] * g[c];
                           double* sg = sn->grad.data() + r * cols;
                           for (std::size_t c = 0; c < cols; ++c)
                               sg[c] += p[c] * (g[c] - dot);
                       }
                   });
}

// ---- masked cross entropy ----

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& position_mask) {
    const Shape& sl = logits.shape();
    if (sl.size() != 2) throw DimensionError("cross_entropy_masked: logits must be [N, V]");
    const std::size_t n = sl[0], vocab = sl[1];
    if (targets.size() != n || position_mask.size() != n)
        throw DimensionError("cross_entropy_masked: targets/mask length must equal rows");
    std::size_t count = 0;
    for (bool b : position_mask)
        if (b) ++count;
    if (count == 0)
        throw ContractError("cross_entropy_masked: position_mask selects no positions");

    const double* lp = logits.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!position_mask[i]) continue;
        const int t = targets[i];
        if (t < 0 || static_cast<std::size_t>(t) >= vocab)
            throw ContractError("cross_entropy_masked: target id " + std::to_string(t) +
                                " out of range at row " + std::to_string(i));
        const double* row = lp + i * vocab;
        double mx = row[0];
        for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        double denom = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
        total += std::log(denom) - (row[static_cast<std::size_t>(t)] - mx);
    }
    const double loss = total / static_cast<double>(count);

    auto ln = logits.node_ptr();
    auto tg = targets;
    auto pm = position_mask;
    return make_op({1}, {loss}, {ln}, [ln, tg, pm, n, vocab, count](TensorNode& node) {
        ln->ensure_grad();
        const double gscale = node.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < n; ++i) {
            if (!pm[i]) continue;
            const double* row = ln->data.data() + i * vocab;
            double* grow = ln->grad.data() + i * vocab;
            double mx = row[0];
            for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
            double denom = 0.0;
            for (std::size_t v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
            for (std::size_t v = 0; v < vocab; ++v) {
                const double p = std::exp(row[v] - mx) / denom;
                const double onehot = (static_cast<std::size_t>(tg[i]) == v) ? 1.0 : 0.0;
                grow[v] += gscale * (p - onehot);
            }
        }
    });
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    auto [rows, cols] = as_rows_cols(x.shape(), "layer_norm");
    if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols})
        throw DimensionError("layer_norm: gain/bias must have shape (last dim)");
    std::vector<double> out(x.size());
    std::vector<double> inv_sigma(rows);
    std::vector<double> mean(rows);
    const double* xp = x.data();
    const double* gp = gain.data();
    const double* bp = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xrow = xp + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xrow[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xrow[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_sigma[r] = is;
        double* orow = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) orow[c] = gp[c] * (xrow[c] - mu) * is + bp[c];
    }
    auto xn = x.node_ptr();
    auto gn = gain.node_ptr();
    auto bn = bias.node_ptr();
    return make_op(x.shape(), std::move(out), {xn, gn, bn},
                   [xn, gn, bn, rows = rows, cols = cols, mean = std::move(mean),
                    inv_sigma = std::move(inv_sigma)](TensorNode& node) {
                       const double* g = node.grad.data();
                       if (gn->requires_grad) gn->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       if (xn->requires_grad) xn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* grow = g + r * cols;
                           const double* xrow = xn->data.data() + r * cols;
                           const double mu = mean[r];
                           const double is = inv_sigma[r];
                           double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                           for (std::size_t c = 0; c < cols; ++c) {
                               const double xhat = (xrow[c] - mu) * is;
                               const double dxhat = grow[c] * gn->data[c];
                               sum_dxhat += dxhat;
                               sum_dxhat_xhat += dxhat * xhat;
                               if (gn->requires_grad) gn->grad[c] += grow[c] * xhat;
                               if (bn->requires_grad) bn->grad[c] += grow[c];
                           }
                           if (xn->requires_grad) {
                               const double inv_cols = 1.0 / static_cast<double>(cols);
                               double* xg = xn->grad.data() + r * cols;
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const double xhat = (xrow[c] - mu) * is;
                                   const double dxhat = grow[c] * gn->data[c];
                                   xg[c] += is * (dxhat - inv_cols * sum_dxhat -
                                                  xhat * inv_cols * sum_dxhat_xhat);
                               }
                           }
                       }
                   });
}

// ---- structural ops ----

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t rows = parts[0].shape().at(0);
    std::size_t total_cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != rows)
            throw DimensionError("concat_cols: all parts must be rank 2 with equal rows");
        total_cols += p.shape()[1];
    }
    std::vector<double> out(rows * total_cols);
    std::size_t col_off = 0;
    for (const auto& p : parts) {
        const std::size_t cols = p.shape()[1];
        const double* pp = p.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(pp + r * cols, pp + (r + 1) * cols, out.begin() + r * total_cols + col_off);
        col_off += cols;
    }
    std::vector<NodePtr> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    auto parent_copy = parents;
    return make_op({rows, total_cols}, std::move(out), std::move(parents),
                   [parent_copy, rows, total_cols](TensorNode& node) {
                       std::size_t col_off = 0;
                       for (const auto& pn : parent_copy) {
                           const std::size_t cols = pn->shape[1];
                           if (pn->requires_grad) {
                               pn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < cols; ++c)
                                       pn->grad[r * cols + c] +=
                                           node.grad[r * total_cols + col_off + c];
                           }
                           col_off += cols;
                       }
                   });
}

Tensor slice_cols(const Tensor& x, std::size_t col_begin, std::size_t col_end) {
    if (x.rank() != 2) throw DimensionError("slice_cols: rank-2 tensor required");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (col_begin >= col_end || col_end > cols)
        throw DimensionError("slice_cols: invalid column range");
    const std::size_t width = col_end - col_begin;
    std::vector<double> out(rows * width);
    const double* xp = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(xp + r * cols + col_begin, xp + r * cols + col_end, out.begin() + r * width);
    auto xn = x.node_ptr();
    return make_op({rows, width}, std::move(out), {xn},
                   [xn, rows, cols, col_begin, width](TensorNode& node) {
                       xn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < width; ++c)
                               xn->grad[r * cols + col_begin + c] += node.grad[r * width + c];
                   });
}

Tensor reverse_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("reverse_rows: rank-2 tensor required");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<double> out(x.size());
    const double* xp = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(xp + r * cols, xp + (r + 1) * cols, out.begin() + (rows - 1 - r) * cols);
    auto xn = x.node_ptr();
    return make_op(x.shape(), std::move(out), {xn}, [xn, rows, cols](TensorNode& node) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                xn->grad[r * cols + c] += node.grad[(rows - 1 - r) * cols + c];
    });
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    const double* xp = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) total += xp[i];
    auto xn = x.node_ptr();
    return make_op({1}, {total}, {xn}, [xn](TensorNode& node) {
        xn->ensure_grad();
        for (auto& g : xn->grad) g += node.grad[0];
    });
}

Tensor sum_row(const Tensor& x, std::size_t row) {
    auto [rows, cols] = as_rows_cols(x.shape(), "sum_row");
    if (row >= rows) throw DimensionError("sum_row: row out of range");
    double total = 0.0;
    const double* xp = x.data() + row * cols;
    for (std::size_t c = 0; c < cols; ++c) total += xp[c];
    auto xn = x.node_ptr();
    return make_op({1}, {total}, {xn}, [xn, row, cols = cols](TensorNode& node) {
        xn->ensure_grad();
        for (std::size_t c = 0; c < cols; ++c) xn->grad[row * cols + c] += node.grad[0];
    });
}

Tensor row_l2_norm(const Tensor& x, std::size_t row) {
    auto [rows, cols] = as_rows_cols(x.shape(), "row_l2_norm");
    if (row >= rows) throw DimensionError("row_l2_norm: row out of range");
    const double* xp = x.data() + row * cols;
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += xp[c] * xp[c];
    const double norm = std::sqrt(sq);
    auto xn = x.node_ptr();
    return make_op({1}, {norm}, {xn}, [xn, row, cols = cols, norm](TensorNode& node) {
        xn->ensure_grad();
        const double denom = norm > 0.0 ? norm : 1.0;
        for (std::size_t c = 0; c < cols; ++c)
            xn->grad[row * cols + c] += node.grad[0] * xn->data[row * cols + c] / denom;
    });
}

// ---- rotary embedding ----

Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions, double base) {
    if (x.rank() != 2) throw DimensionError("rope_apply: rank-2 tensor required");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (d % 2 != 0)
        throw ConfigError("rope_apply: head dimension must be even, got " + std::to_string(d));
    if (positions.size() != rows)
        throw DimensionError("rope_apply: positions length must equal rows");
    const std::size_t half = d / 2;
    std::vector<double> cosv(rows * half), sinv(rows * half);
    for (std::size_t r = 0; r < rows; ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t j = 0; j < half; ++j) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(j) /
                                                   static_cast<double>(d));
            const double theta = pos * freq;
            cosv[r * half + j] = std::cos(theta);
            sinv[r * half + j] = std::sin(theta);
        }
    }
    std::vector<double> out(x.size());
    const double* xp = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < half; ++j) {
            const double c = cosv[r * half + j], s = sinv[r * half + j];
            const double a = xp[r * d + 2 * j], b = xp[r * d + 2 * j + 1];
            out[r * d + 2 * j] = a * c - b * s;
            out[r * d + 2 * j + 1] = a * s + b * c;
        }
    }
    auto xn = x.node_ptr();
    return make_op(x.shape(), std::move(out), {xn},
                   [xn, rows, d, half, cosv = std::move(cosv),
                    sinv = std::move(sinv)](TensorNode& node) {
                       xn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < half; ++j) {
                               const double c = cosv[r * half + j], s = sinv[r * half + j];
                               const double ga = node.grad[r * d + 2 * j];
                               const double gb = node.grad[r * d + 2 * j + 1];
                               // inverse rotation
                               xn->grad[r * d + 2 * j] += ga * c + gb * s;
                               xn->grad[r * d + 2 * j + 1] += -ga * s + gb * c;
                           }
                       }
                   });
}

// ---- windowed attention ----

Tensor windowed_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t window,
                          double scale, std::vector<AttentionRow>* probs_out) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("windowed_attention: rank-2 q/k/v required");
    const std::size_t n = q.shape()[0], d = q.shape()[1];
    if (k.shape() != q.shape() || v.shape() != q.shape())
        throw DimensionError("windowed_attention: q/k/v shapes must agree");

    std::vector<double> out(n * d, 0.0);
    std::vector<std::size_t> begins(n), ends(n);
    std::vector<std::vector<double>> probs(n);
    const double* qp = q.data();
    const double* kp = k.data();
    const double* vp = v.data();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i > window ? i - window : 0;
        const std::size_t hi = std::min(n - 1, i + window);
        begins[i] = lo;
        ends[i] = hi;
        const std::size_t span = hi - lo + 1;
        std::vector<double>& p = probs[i];
        p.resize(span);
        const double* qrow = qp + i * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = lo; j <= hi; ++j) {
            const double* krow = kp + j * d;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += qrow[c] * krow[c];
            s *= scale;
            p[j - lo] = s;
            mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (double& s : p) {
            s = std::exp(s - mx);
            denom += s;
        }
        double* orow = out.data() + i * d;
        for (std::size_t j = lo; j <= hi; ++j) {
            const double w = p[j - lo] / denom;
            p[j - lo] = w;
            const double* vrow = vp + j * d;
            for (std::size_t c = 0; c < d; ++c) orow[c] += w * vrow[c];
        }
    }
    if (probs_out) {
        probs_out->clear();
        probs_out->reserve(n);
        for (std::size_t i = 0; i < n; ++i) probs_out->push_back({begins[i], probs[i]});
    }

    auto qn = q.node_ptr();
    auto kn = k.node_ptr();
    auto vn = v.node_ptr();
    return make_op({n, d}, std::move(out), {qn, kn, vn},
                   [qn, kn, vn, n, d, scale, begins = std::move(begins), ends = std::move(ends),
                    probs = std::move(probs)](TensorNode& node) {
                       if (qn->requires_grad) qn->ensure_grad();
                       if (kn->requires_grad) kn->ensure_grad();
                       if (vn->requires_grad) vn->ensure_grad();
                       const double* g = node.grad.data();
                       std::vector<double> dp;
                       for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t lo = begins[i], hi = ends[i];
                           const std::size_t span = hi - lo + 1;
                           const std::vector<double>& p = probs[i];
                           const double* grow = g + i * d;
                           dp.assign(span, 0.0);
                           // d p_ij = <dout_i, v_j>; d v_j += p_ij dout_i
                           for (std::size_t j = lo; j <= hi; ++j) {
                               const double* vrow = vn->data.data() + j * d;
                               double acc = 0.0;
                               for (std::size_t c = 0; c < d; ++c) acc += grow[c] * vrow[c];
                               dp[j - lo] = acc;
                               if (vn->requires_grad) {
                                   double* vg = vn->grad.data() + j * d;
                                   const double w = p[j - lo];
                                   for (std::size_t c = 0; c < d; ++c) vg[c] += w * grow[c];
                               }
                           }
                           double dot = 0.0;
                           for (std::size_t j = 0; j < span; ++j) dot += p[j] * dp[j];
                           const double* qrow = qn->data.data() + i * d;
                           double* qg = qn->requires_grad ? qn->grad.data() + i * d : nullptr;
                           for (std::size_t j = lo; j <= hi; ++j) {
                               const double ds = scale * p[j - lo] * (dp[j - lo] - dot);
                               if (ds == 0.0) continue;
                               const double* krow = kn->data.data() + j * d;
                               if (qg)
                                   for (std::size_t c = 0; c < d; ++c) qg[c] += ds * krow[c];
                               if (kn->requires_grad) {
                                   double* kg = kn->grad.data() + j * d;
                                   for (std::size_t c = 0; c < d; ++c) kg[c] += ds * qrow[c];
                               }
                           }
                       }
                   });
}

// ---- backward driver ----

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    TensorNode* root = loss.node();
    if (!root->requires_grad) return;

    // iterative post-order over the recorded graph
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* parent = node->parents[idx].get();
            ++idx;
            if (parent && parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* node : order)
        if (node->backward) node->grad.assign(node->data.size(), 0.0);
    root->ensure_grad();
    root->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward) node->backward(*node);
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
    Tensor leaf = Tensor::from_data(point.shape(), {point.data(), point.data() + point.size()},
                                    true);
    Tensor value = f(leaf);
    if (value.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
    backward(value);
    std::vector<double> analytic(leaf.grad_data(), leaf.grad_data() + leaf.size());

    double worst = 0.0;
    NoGradGuard guard;
    for (std::size_t i = 0; i < leaf.size(); ++i) {
        Tensor probe = leaf.detached();
        probe.data()[i] += h;
        const double up = f(probe).item();
        probe.data()[i] -= 2.0 * h;
        const double down = f(probe).item();
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

// ---- parameter store ----

Tensor& ParameterStore::create(const std::string& name, Shape shape) {
    return adopt(name, Tensor::zeros(std::move(shape), true));
}

Tensor& ParameterStore::create_randn(const std::string& name, Shape shape, RandomSource& rng,
                                     double stddev) {
    return adopt(name, Tensor::randn(std::move(shape), rng, stddev, true));
}

Tensor& ParameterStore::adopt(const std::string& name, Tensor value) {
    if (find(name)) throw ConfigError("parameter '" + name + "' already exists");
    value.node()->requires_grad = true;
    items_.push_back({name, std::move(value)});
    return items_.back().value;
}

Tensor* ParameterStore::find(const std::string& name) {
    for (auto& item : items_)
        if (item.name == name) return &item.value;
    return nullptr;
}

const Tensor* ParameterStore::find(const std::string& name) const {
    for (const auto& item : items_)
        if (item.name == name) return &item.value;
    return nullptr;
}

Tensor& ParameterStore::at(const std::string& name) {
    Tensor* t = find(name);
    if (!t) throw ConfigError("unknown parameter '" + name + "'");
    return *t;
}

const Tensor& ParameterStore::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw ConfigError("unknown parameter '" + name + "'");
    return *t;
}

std::size_t ParameterStore::total_scalars() const {
    std::size_t total = 0;
    for (const auto& item : items_) total += item.value.size();
    return total;
}

void ParameterStore::zero_grad_all() {
    for (auto& item : items_) item.value.zero_grad();
}

}  // namespace trinity
