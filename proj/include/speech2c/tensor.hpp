#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace s2c {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major double tensor participating in a define-by-run reverse-mode
// graph. An op result records its inputs in `parents` and a closure that
// pushes the result's gradient into them; backward() walks the DAG once in
// reverse topological order. Graphs are rebuilt every step and freed when the
// last result pointer drops.
//
// A graph is confined to one thread for the duration of a forward/backward
// pass; distinct graphs may run on distinct threads. Parameters are mutated
// only between passes.
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;
    bool backward_ran = false;  // set on the node backward() was called on

    Tensor(std::vector<int> s, bool rg);
    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
    static TensorPtr from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

    int numel() const { return static_cast<int>(data.size()); }
    double value() const;  // scalar tensors only

    void ensure_grad();  // allocate zero grad buffer if absent
    void zero_grad();
    void accumulate_grad(const std::vector<double>& g);
};

std::string shape_str(const std::vector<int>& shape);
int shape_numel(const std::vector<int>& shape);

// Thread-local gradient recording switch. With recording off, ops compute
// values but build no graph (inference mode).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Builds an op result node: requires_grad is set when recording is on and any
// input requires grad, in which case `parents`/`backward_fn` are attached.
// Exposed so that modules can define fused ops (CTC) outside this file.
TensorPtr make_op_node(std::vector<int> shape, std::vector<TensorPtr> inputs,
                       std::function<void(Tensor&)> backward_fn);

// ---- elementwise / shape ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr gelu(const TensorPtr& x);
TensorPtr transpose2d(const TensorPtr& x);
TensorPtr sum_all(const TensorPtr& x);
TensorPtr mean_all(const TensorPtr& x);
// x: [rows, d] plus row vector b: [d], broadcast over rows.
TensorPtr add_rows(const TensorPtr& x, const TensorPtr& b);
TensorPtr slice_cols(const TensorPtr& x, int c0, int c1);
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
// Contiguous sub-range [begin, begin+len) of the flat buffer, reshaped.
TensorPtr slice_flat(const TensorPtr& x, int begin, int len, std::vector<int> shape);
TensorPtr gather_rows(const TensorPtr& x, const std::vector<int>& rows);
// Copy of x with every listed row replaced by the (shared) row vector r.
TensorPtr replace_rows(const TensorPtr& x, const std::vector<int>& rows, const TensorPtr& r);
TensorPtr embedding(const TensorPtr& table, const std::vector<int>& ids);

// ---- linear algebra ----
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

// ---- normalization / activations over the last axis ----
TensorPtr softmax(const TensorPtr& x, double temperature);
TensorPtr log_softmax(const TensorPtr& x);
// Rows with no admitted entry (mask all zero) output zeros.
TensorPtr masked_softmax(const TensorPtr& x, const std::vector<std::uint8_t>& mask);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps);
// Rows scaled to unit L2 norm; norms are floored at eps (no exception for
// zero-norm rows, the floor makes them well-defined).
TensorPtr row_l2_normalize(const TensorPtr& x, double eps = 1e-8);

// ---- losses / similarity ----
TensorPtr cosine_sim(const TensorPtr& a, const TensorPtr& b, double eps = 1e-8);
// Mean of -log_probs[i, target[i]] over positions whose target differs from
// ignore_index; an empty selection yields 0 with zero gradient.
TensorPtr cross_entropy(const TensorPtr& log_probs, const std::vector<int>& targets,
                        std::optional<int> ignore_index = std::nullopt);

// ---- convolution ----
// x: [T_in, c_in], kernel: [c_out, c_in, k], valid (unpadded) convolution.
TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernel, int stride);
int conv1d_out_len(int t_in, int kernel, int stride);

// ---- attention helpers ----
// table: [n_heads, 2*max_distance+1]; result [n_heads, q_len, k_len] with
// entry (h,i,j) = table[h, clip(j-i, -max, max) + max].
TensorPtr rel_pos_bias(const TensorPtr& table, int q_len, int k_len, int max_distance);

// ---- backward ----
// Populates grad of every requires_grad ancestor of `loss` (scalar). Each
// node's contributions accumulate; calling backward twice on the same node
// without rebuilding the graph is a contract error.
void backward(const TensorPtr& loss);

// ---- optimizer ----
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// Standard bias-corrected Adam over params' grad buffers (empty grad = zero).
// Moment buffers are allocated on first use and shape-checked after that.
void adam_step(const std::vector<TensorPtr>& params, AdamState& state, double lr);

}  // namespace s2c
