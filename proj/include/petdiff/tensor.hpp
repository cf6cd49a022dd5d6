#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "petdiff/rng.hpp"

namespace petdiff {

// Dense f32 tensor with reverse-mode autodiff.
//
// A Tensor is a shared handle to a graph Node. Ops are free functions that
// record the graph as they compute; backward() walks it in reverse
// topological order. Tensors are immutable after construction except through
// mutable_data() (optimizer updates, loaders). Forward values are computed
// in f32; NaN/Inf checking is the caller's job at module boundaries via
// assert_finite() — ops do not scan their outputs.
//
// The graph is introspectable (op kind, parents, integer attributes) so test
// oracles can re-evaluate it independently, e.g. in f64 with naive kernels.

using Shape = std::vector<int>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class OpKind : uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,            // scalar holds the factor
    Matmul,
    Transpose2D,
    Reshape,
    SoftmaxLast,
    Silu,
    Conv2d,           // i0 = padding, i1 = stride
    AddChannelBias,
    AddRowBias,
    GroupNorm,        // i0 = groups; parents: x, gamma, beta
    UpsampleNearest2x,
    ConcatChannels,
    HConcat,
    SliceCols,        // i0 = start, i1 = len
    SumAll,
    MeanAll,
};

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool backward_done = false;  // set on a node used as a backward() root
    OpKind op = OpKind::Leaf;
    std::vector<std::shared_ptr<Node>> parents;
    float scalar = 0.0f;
    int i0 = 0, i1 = 0;
    std::vector<float> saved;  // op scratch kept for backward (group norm stats)

    size_t numel() const { return data.size(); }
};

// Per-thread gradient sink. When a backward() call is given a store, leaf
// gradients accumulate here instead of on the (possibly shared) leaf nodes;
// the training loop merges stores in deterministic sample order.
struct GradStore {
    std::unordered_map<const Node*, std::vector<float>> grads;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor randn(const Shape& shape, Rng& rng, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const;
    size_t numel() const;
    int dim(int i) const;
    int ndim() const;

    const std::vector<float>& data() const;
    std::vector<float>& mutable_data();
    float item() const;  // ContractError unless scalar (numel == 1)

    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<float>& grad() const;  // ContractError if absent
    void clear_grad();

    Tensor clone() const;  // deep copy, detached leaf

    // Throws NumericError naming `what` if any element is NaN/Inf.
    void assert_finite(const std::string& what) const;

    std::shared_ptr<Node> node() const { return n_; }
    static Tensor wrap(std::shared_ptr<Node> n);

  private:
    std::shared_ptr<Node> n_;
};

// ---- differentiable ops ----

Tensor add(const Tensor& a, const Tensor& b);   // same shape
Tensor sub(const Tensor& a, const Tensor& b);   // same shape
Tensor mul(const Tensor& a, const Tensor& b);   // elementwise, same shape
Tensor scale(const Tensor& a, float s);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D only
Tensor reshape(const Tensor& a, const Shape& shape);

// Softmax over the last axis, max-subtraction stabilized.
Tensor softmax_lastdim(const Tensor& a);
Tensor silu(const Tensor& a);

// input [C_in,H,W], kernel [C_out,C_in,kh,kw], zero padding, cross-correlation.
// H' = (H + 2*padding - kh)/stride + 1 and likewise W'.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int padding, int stride = 1);

// x [C,H,W] + b (numel C), added per channel.
Tensor add_channel_bias(const Tensor& x, const Tensor& b);
// x [m,n] + b (numel n), added to every row.
Tensor add_row_bias(const Tensor& x, const Tensor& b);

// x [C,H,W]; gamma,beta [C]; C divisible by groups.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups);

Tensor upsample_nearest_2x(const Tensor& x);  // [C,H,W] -> [C,2H,2W]
Tensor concat_channels(const Tensor& a, const Tensor& b);  // along dim 0 of [C,H,W]
Tensor hconcat(const Tensor& a, const Tensor& b);          // [m,n1],[m,n2] -> [m,n1+n2]
Tensor slice_cols(const Tensor& a, int start, int len);    // [m,n] -> [m,len]

Tensor sum_all(const Tensor& a);   // -> scalar []
Tensor mean_all(const Tensor& a);  // -> scalar []

// Reverse-mode sweep from a scalar root. Gradients of requires_grad leaves
// accumulate additively (into `store` when given, else onto the leaf nodes).
// Calling backward twice on the same root is a ContractError.
void backward(const Tensor& scalar_output, GradStore* store = nullptr);

// ---- Adam ----

struct AdamState {
    int64_t step_count = 0;
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
    std::vector<std::vector<float>> first_moment;
    std::vector<std::vector<float>> second_moment;

    static AdamState init(const std::vector<Tensor>& params, float lr);
};

// Bias-corrected in-place update; every param must hold a grad; grads are
// cleared afterwards.
void adam_step(std::vector<Tensor>& params, AdamState& state);

}  // namespace petdiff
