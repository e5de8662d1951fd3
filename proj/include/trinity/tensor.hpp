#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "trinity/error.hpp"
#include "trinity/random.hpp"

namespace trinity {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated on demand; persists on leaves
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Distributes this node's grad into the parents' grad buffers.
    std::function<void(TensorNode&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Scoped switch that disables graph recording (forward-only evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_recording_enabled();

// Dense multi-dimensional array of doubles with reverse-mode autodiff.
// Copies are shallow (shared node); use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, RandomSource& rng, double stddev = 1.0,
                        bool requires_grad = false);
    static Tensor rand_uniform(Shape shape, RandomSource& rng, double lo, double hi,
                               bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    bool requires_grad() const;

    double* data();
    const double* data() const;
    double at(std::initializer_list<std::size_t> idx) const;
    double item() const;  // scalar tensors only

    // Gradient buffer as a tensor snapshot (zeros if never touched).
    Tensor grad() const;
    const double* grad_data() const;
    void zero_grad();

    Tensor clone() const;
    Tensor detached() const;  // same values, fresh leaf, no history

    bool all_finite() const;

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// ---- elementwise and linear-algebra operations (all differentiable) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor gelu(const Tensor& a);      // exact Gaussian-CDF form
Tensor sigmoid(const Tensor& a);
// Adds a width-(last dim) bias row to every row of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Matrix product; rank 2 x rank 2 or batched rank 3 x rank 3.
Tensor matmul(const Tensor& a, const Tensor& b);
// a · b^T for rank-2 operands.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// 1-D convolution (cross-correlation) with 'same' zero padding.
// input [N, C_in], kernel [k, C_in, C_out] with odd k, bias [C_out].
Tensor conv1d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias);

// Row lookup: table [V, H], ids in [0, V) -> [ids.size(), H].
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);

// Softmax over the last dimension restricted to allowed positions.
// allow_mask has the same shape; entries != 0 are allowed. Disallowed
// positions get exactly 0; every row must have at least one allowed entry.
Tensor masked_softmax(const Tensor& scores, const Tensor& allow_mask);

// Mean negative log-likelihood over selected positions.
// logits [N, V], targets[i] in [0, V), position_mask selects rows.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& position_mask);

// Row-wise layer normalization with learned gain/bias of width = last dim.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t col_begin, std::size_t col_end);
Tensor reverse_rows(const Tensor& x);

Tensor sum(const Tensor& x);                       // scalar
Tensor sum_row(const Tensor& x, std::size_t row);  // scalar sum of one row
Tensor row_l2_norm(const Tensor& x, std::size_t row);

// Rotary position embedding over pairs of the last dimension (must be even).
// positions.size() must equal rows of x; theta_j = pos * base^(-2j/d).
Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions, double base);

// Per-head local attention: for query i, keys j with |i-j| <= window.
// q,k,v are [N, d]; returns [N, d]. When probs_out is non-null the attention
// rows are exported for diagnostics as (row_start, weights) pairs.
struct AttentionRow {
    std::size_t key_begin = 0;
    std::vector<double> weights;
};
Tensor windowed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t window, double scale,
                          std::vector<AttentionRow>* probs_out = nullptr);

// ---- reverse-mode differentiation ----

// Accumulates d(loss)/d(leaf) into every reachable grad buffer. loss must be
// scalar; leaf gradients add up across calls until zero_grad.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double h = 1e-5);

// ---- named parameters ----

struct Parameter {
    std::string name;
    Tensor value;  // requires_grad leaf
};

// Insertion-ordered set of uniquely named parameters. Order is the contract
// for optimizers and checkpoints.
class ParameterStore {
public:
    Tensor& create(const std::string& name, Shape shape);
    Tensor& create_randn(const std::string& name, Shape shape, RandomSource& rng, double stddev);
    Tensor& adopt(const std::string& name, Tensor value);

    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;

    std::vector<Parameter>& items() { return items_; }
    const std::vector<Parameter>& items() const { return items_; }
    std::size_t total_scalars() const;
    void zero_grad_all();

private:
    std::vector<Parameter> items_;
};

}  // namespace trinity
