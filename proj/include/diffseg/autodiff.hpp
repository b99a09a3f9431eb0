#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "diffseg/label_map.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// Reverse-mode autodiff over Tensor values. Graphs are built eagerly; node
// creation order is a valid topological order, so backward() walks reachable
// nodes by descending id. With gradients disabled (or when no input requires
// them) ops keep neither parents nor closures, so inference paths hold no
// graph memory and gradients stop exactly at detached boundaries.

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad; // allocated lazily, same shape as value
    bool requires_grad = false;
    int64_t id = 0;
    std::vector<Value> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
    void accumulate_grad(const Tensor& g);
};

class GradMode {
public:
    static bool enabled();
    // RAII guard that disables gradient recording in scope.
    class Disabled {
    public:
        Disabled();
        ~Disabled();
        Disabled(const Disabled&) = delete;
        Disabled& operator=(const Disabled&) = delete;

    private:
        bool prev_;
    };
};

Value constant(Tensor value);
Value make_parameter(Tensor value); // requires_grad = true
Value detach(const Value& v);       // constant copy of v's value

// Runs reverse-mode accumulation from a scalar (numel == 1) node.
void backward(const Value& loss);

// --- elementwise / structural ops ------------------------------------------
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, float s);
Value silu(const Value& x);
// x: [N,C,H,W] + bias [N,C] broadcast over spatial positions.
Value add_sample_channel_bias(const Value& x, const Value& bias);
Value reshape(const Value& x, std::vector<int> dims);
Value permute4(const Value& x, const std::array<int, 4>& perm);
Value concat(const std::vector<Value>& parts, int axis);
Value slice_axis0(const Value& x, int start, int len);

// --- dense / conv ops -------------------------------------------------------
// x: [*, in]; w: [out, in]; b: [out] (optional, pass nullptr).
Value linear(const Value& x, const Value& w, const Value* b = nullptr);
// a: [B,M,K], b: [B,K,N] -> [B,M,N]
Value bmm(const Value& a, const Value& b);
// x: [N,Ci,H,W]; w: [Co,Ci,kh,kw]; b: [Co] optional.
Value conv2d(const Value& x, const Value& w, const Value* b, int stride, int pad);
Value group_norm(const Value& x, const Value& gamma, const Value& beta, int groups, float eps = 1e-5f);
Value softmax_lastdim(const Value& x);
Value upsample2x_nearest(const Value& x);            // [N,C,H,W] -> [N,C,2H,2W]
Value resize_bilinear(const Value& x, int oh, int ow); // [N,C,H,W]
// table: [rows, d]; indices flat, out [n, d] reshaped to out_dims.
Value gather_rows(const Value& table, const std::vector<int>& indices, std::vector<int> out_dims);

// --- reductions / losses ----------------------------------------------------
Value sum_all(const Value& x);  // -> [1]
Value mean_all(const Value& x); // -> [1]
Value mse_loss(const Value& a, const Value& b);
// Mean cross-entropy over non-ignore pixels; logits [N,cls,H,W], labels [N,H,W]
// or [H,W] matching. All pixels ignored -> 0 (flag set if provided).
Value cross_entropy_loss(const Value& logits, const LabelMap& labels, int ignore_index,
                         bool* all_ignored = nullptr);
// Mean over pixels of KL(softmax(teacher) || softmax(student)); teacher fixed.
Value kl_consistency_loss(const Tensor& teacher_logits, const Value& student_logits);

} // namespace diffseg
