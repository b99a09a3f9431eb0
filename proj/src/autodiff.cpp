#include "diffseg/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace diffseg {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

std::atomic<int64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

// Eigen's own GEMM threading is turned off; parallelism happens in explicit
// loops over disjoint output blocks, which keeps results bit-deterministic
// for any thread count.
struct EigenThreadInit {
    EigenThreadInit() { Eigen::setNbThreads(1); }
};
const EigenThreadInit g_eigen_init;

bool any_requires_grad(const std::vector<Value>& inputs) {
    for (const auto& v : inputs)
        if (v && v->requires_grad) return true;
    return false;
}

Value make_node(Tensor value, std::vector<Value> inputs, std::function<void(Node&)> bwd) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    if (g_grad_enabled && any_requires_grad(inputs)) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward_fn = std::move(bwd);
    }
    return n;
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
}

int column_block_count() {
#ifdef _OPENMP
    return std::max(1, omp_get_max_threads());
#else
    return 1;
#endif
}

} // namespace

Tensor& Node::ensure_grad() {
    if (grad.empty()) grad = Tensor(value.dims(), 0.0f);
    return grad;
}

void Node::accumulate_grad(const Tensor& g) {
    Tensor& dst = ensure_grad();
    if (!dst.same_shape(g)) throw ShapeError("gradient shape mismatch");
    float* d = dst.data();
    const float* s = g.data();
    for (int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

bool GradMode::enabled() { return g_grad_enabled; }
GradMode::Disabled::Disabled() : prev_(g_grad_enabled) { g_grad_enabled = false; }
GradMode::Disabled::~Disabled() { g_grad_enabled = prev_; }

Value constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

Value make_parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    n->requires_grad = true;
    return n;
}

Value detach(const Value& v) { return constant(v->value); }

void backward(const Value& loss) {
    if (loss->value.numel() != 1) throw ParameterError("backward expects a scalar loss");
    // Reachable set, then descending creation id = reverse topological order.
    std::vector<Node*> order;
    std::vector<Node*> stack{loss.get()};
    std::unordered_set<Node*> visited;
    visited.reserve(4096);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!visited.insert(n).second) continue;
        order.push_back(n);
        for (const auto& in : n->inputs)
            if (in && in->requires_grad && !visited.count(in.get())) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    loss->ensure_grad();
    loss->grad[0] += 1.0f;
    for (Node* n : order) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// --- elementwise -------------------------------------------------------------

Value add(const Value& a, const Value& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->value.dims());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->accumulate_grad(n.grad);
        if (b->requires_grad) b->accumulate_grad(n.grad);
    });
}

Value sub(const Value& a, const Value& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->value.dims());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->accumulate_grad(n.grad);
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

Value mul(const Value& a, const Value& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->value.dims());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
        }
    });
}

Value scale(const Value& a, float s) {
    Tensor out(a->value.dims());
    const float* pa = a->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * s;
    });
}

Value silu(const Value& x) {
    Tensor out(x->value.dims());
    const float* px = x->value.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        float s = 1.0f / (1.0f + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    return make_node(std::move(out), {x}, [x](Node& n) {
        Tensor& g = x->ensure_grad();
        const float* px = x->value.data();
        for (int64_t i = 0; i < g.numel(); ++i) {
            float s = 1.0f / (1.0f + std::exp(-px[i]));
            g[i] += n.grad[i] * s * (1.0f + px[i] * (1.0f - s));
        }
    });
}

Value add_sample_channel_bias(const Value& x, const Value& bias) {
    if (x->value.rank() != 4 || bias->value.rank() != 2) throw ShapeError("add_sample_channel_bias expects [N,C,H,W] + [N,C]");
    const int N = x->value.dim(0), C = x->value.dim(1);
    if (bias->value.dim(0) != N || bias->value.dim(1) != C)
        throw ShapeError("bias " + bias->value.shape_str() + " incompatible with " + x->value.shape_str());
    const int64_t hw = static_cast<int64_t>(x->value.dim(2)) * x->value.dim(3);
    Tensor out(x->value.dims());
    const float* px = x->value.data();
    const float* pb = bias->value.data();
    float* po = out.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float bv = pb[n * C + c];
            const float* xs = px + (static_cast<int64_t>(n) * C + c) * hw;
            float* os = po + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) os[i] = xs[i] + bv;
        }
    return make_node(std::move(out), {x, bias}, [x, bias, N, C, hw](Node& n) {
        if (x->requires_grad) x->accumulate_grad(n.grad);
        if (bias->requires_grad) {
            Tensor& g = bias->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c) {
                    const float* ds = n.grad.data() + (static_cast<int64_t>(nn) * C + c) * hw;
                    double s = 0.0;
                    for (int64_t i = 0; i < hw; ++i) s += ds[i];
                    g[nn * C + c] += static_cast<float>(s);
                }
        }
    });
}

Value reshape(const Value& x, std::vector<int> dims) {
    Tensor out = x->value.reshaped(dims);
    return make_node(std::move(out), {x}, [x](Node& n) {
        x->accumulate_grad(n.grad.reshaped(x->value.dims()));
    });
}

Value permute4(const Value& x, const std::array<int, 4>& perm) {
    if (x->value.rank() != 4) throw ShapeError("permute4 expects rank 4");
    const auto& d = x->value.dims();
    std::vector<int> od(4);
    for (int i = 0; i < 4; ++i) od[i] = d[perm[i]];
    Tensor out(od);
    std::array<int64_t, 4> istr{static_cast<int64_t>(d[1]) * d[2] * d[3], static_cast<int64_t>(d[2]) * d[3],
                                static_cast<int64_t>(d[3]), 1};
    const float* src = x->value.data();
    float* dst = out.data();
    int64_t idx = 0;
    for (int i0 = 0; i0 < od[0]; ++i0)
        for (int i1 = 0; i1 < od[1]; ++i1)
            for (int i2 = 0; i2 < od[2]; ++i2)
                for (int i3 = 0; i3 < od[3]; ++i3)
                    dst[idx++] = src[i0 * istr[perm[0]] + i1 * istr[perm[1]] + i2 * istr[perm[2]] + i3 * istr[perm[3]]];
    return make_node(std::move(out), {x}, [x, perm, od](Node& n) {
        Tensor& g = x->ensure_grad();
        const auto& d = x->value.dims();
        std::array<int64_t, 4> istr{static_cast<int64_t>(d[1]) * d[2] * d[3], static_cast<int64_t>(d[2]) * d[3],
                                    static_cast<int64_t>(d[3]), 1};
        const float* src = n.grad.data();
        int64_t idx = 0;
        for (int i0 = 0; i0 < od[0]; ++i0)
            for (int i1 = 0; i1 < od[1]; ++i1)
                for (int i2 = 0; i2 < od[2]; ++i2)
                    for (int i3 = 0; i3 < od[3]; ++i3)
                        g[i0 * istr[perm[0]] + i1 * istr[perm[1]] + i2 * istr[perm[2]] + i3 * istr[perm[3]]] +=
                            src[idx++];
    });
}

Value concat(const std::vector<Value>& parts, int axis) {
    if (parts.empty()) throw ParameterError("concat: empty input list");
    const int rank = parts[0]->value.rank();
    if (axis < 0 || axis >= rank) throw ParameterError("concat: bad axis");
    std::vector<int> od = parts[0]->value.dims();
    int total = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis && p->value.dim(i) != od[static_cast<size_t>(i)])
                throw ShapeError("concat: shape mismatch on non-concat axis");
        total += p->value.dim(axis);
    }
    od[static_cast<size_t>(axis)] = total;
    Tensor out(od);

    // outer = product of dims before axis, inner = product after.
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= od[static_cast<size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= od[static_cast<size_t>(i)];

    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t span = p->value.dim(axis) * inner;
        const float* src = p->value.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * total * inner + off, src + o * span, static_cast<size_t>(span) * sizeof(float));
        off += span;
    }
    return make_node(std::move(out), parts, [parts, outer, inner, total](Node& n) {
        int64_t off = 0;
        for (const auto& p : parts) {
            const int64_t pspan = p->value.numel() / outer;
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const float* src = n.grad.data() + o * total * inner + off;
                    float* dst = g.data() + o * pspan;
                    for (int64_t i = 0; i < pspan; ++i) dst[i] += src[i];
                }
            }
            off += pspan;
        }
    });
}

Value slice_axis0(const Value& x, int start, int len) {
    if (start < 0 || len <= 0 || start + len > x->value.dim(0)) throw ParameterError("slice_axis0: bad range");
    std::vector<int> od = x->value.dims();
    od[0] = len;
    Tensor out(od);
    const int64_t span = x->value.numel() / x->value.dim(0);
    std::memcpy(out.data(), x->value.data() + start * span, static_cast<size_t>(len) * span * sizeof(float));
    return make_node(std::move(out), {x}, [x, start, span, len](Node& n) {
        Tensor& g = x->ensure_grad();
        float* dst = g.data() + start * span;
        const float* src = n.grad.data();
        for (int64_t i = 0; i < len * span; ++i) dst[i] += src[i];
    });
}

// --- dense -------------------------------------------------------------------

Value linear(const Value& x, const Value& w, const Value* b) {
    const int in = w->value.dim(1);
    const int out_f = w->value.dim(0);
    if (x->value.dim(x->value.rank() - 1) != in)
        throw ShapeError("linear: input features " + x->value.shape_str() + " vs weight " + w->value.shape_str());
    const int64_t rows = x->value.numel() / in;
    std::vector<int> od = x->value.dims();
    od.back() = out_f;
    Tensor out(od);
    {
        MapConst X(x->value.data(), rows, in);
        MapConst W(w->value.data(), out_f, in);
        MapMat Y(out.data(), rows, out_f);
        Y.noalias() = X * W.transpose();
        if (b) {
            MapConst B((*b)->value.data(), 1, out_f);
            Y.rowwise() += B.row(0);
        }
    }
    std::vector<Value> inputs{x, w};
    Value bias = b ? *b : nullptr;
    if (bias) inputs.push_back(bias);
    return make_node(std::move(out), std::move(inputs), [x, w, bias, rows, in, out_f](Node& n) {
        MapConst dY(n.grad.data(), rows, out_f);
        if (x->requires_grad) {
            MapMat dX(x->ensure_grad().data(), rows, in);
            MapConst W(w->value.data(), out_f, in);
            dX.noalias() += dY * W;
        }
        if (w->requires_grad) {
            MapMat dW(w->ensure_grad().data(), out_f, in);
            MapConst X(x->value.data(), rows, in);
            dW.noalias() += dY.transpose() * X;
        }
        if (bias && bias->requires_grad) {
            Tensor& g = bias->ensure_grad();
            for (int o = 0; o < out_f; ++o) {
                double s = 0.0;
                for (int64_t r = 0; r < rows; ++r) s += dY(r, o);
                g[o] += static_cast<float>(s);
            }
        }
    });
}

Value bmm(const Value& a, const Value& b) {
    if (a->value.rank() != 3 || b->value.rank() != 3) throw ShapeError("bmm expects rank-3 inputs");
    const int B = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2);
    if (b->value.dim(0) != B || b->value.dim(1) != K) throw ShapeError("bmm: inner dims mismatch");
    const int N = b->value.dim(2);
    Tensor out({B, M, N});
    for (int i = 0; i < B; ++i) {
        MapConst A(a->value.data() + static_cast<int64_t>(i) * M * K, M, K);
        MapConst Bm(b->value.data() + static_cast<int64_t>(i) * K * N, K, N);
        MapMat Y(out.data() + static_cast<int64_t>(i) * M * N, M, N);
        Y.noalias() = A * Bm;
    }
    return make_node(std::move(out), {a, b}, [a, b, B, M, K, N](Node& n) {
        for (int i = 0; i < B; ++i) {
            MapConst dY(n.grad.data() + static_cast<int64_t>(i) * M * N, M, N);
            if (a->requires_grad) {
                MapMat dA(a->ensure_grad().data() + static_cast<int64_t>(i) * M * K, M, K);
                MapConst Bm(b->value.data() + static_cast<int64_t>(i) * K * N, K, N);
                dA.noalias() += dY * Bm.transpose();
            }
            if (b->requires_grad) {
                MapMat dB(b->ensure_grad().data() + static_cast<int64_t>(i) * K * N, K, N);
                MapConst A(a->value.data() + static_cast<int64_t>(i) * M * K, M, K);
                dB.noalias() += A.transpose() * dY;
            }
        }
    });
}

// --- conv2d ------------------------------------------------------------------

namespace {

struct ConvDims {
    int N, Ci, H, W, Co, kh, kw, stride, pad, OH, OW;
    int64_t ckk() const { return static_cast<int64_t>(Ci) * kh * kw; }
    int64_t positions() const { return static_cast<int64_t>(N) * OH * OW; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects 4-D input and weight");
    ConvDims d;
    d.N = x.dim(0);
    d.Ci = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Co = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(1) != d.Ci)
        throw ShapeError("conv2d: weight channels " + w.shape_str() + " incompatible with input " + x.shape_str());
    d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
    d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.OH <= 0 || d.OW <= 0) throw ShapeError("conv2d: empty output");
    return d;
}

// cols layout: [Ci*kh*kw, N*OH*OW], position index p = ((n*OH)+oy)*OW+ox.
void im2col(const Tensor& x, const ConvDims& d, std::vector<float>& cols) {
    const int64_t P = d.positions();
    const int64_t CKK = d.ckk();
    cols.resize(static_cast<size_t>(P * CKK));
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < P; ++p) {
        const int n = static_cast<int>(p / (static_cast<int64_t>(d.OH) * d.OW));
        const int rem = static_cast<int>(p % (static_cast<int64_t>(d.OH) * d.OW));
        const int oy = rem / d.OW;
        const int ox = rem % d.OW;
        const float* xn = x.data() + static_cast<int64_t>(n) * d.Ci * d.H * d.W;
        float* col = cols.data();
        int64_t row = 0;
        for (int c = 0; c < d.Ci; ++c) {
            const float* xc = xn + static_cast<int64_t>(c) * d.H * d.W;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = oy * d.stride - d.pad + ky;
                for (int kx = 0; kx < d.kw; ++kx, ++row) {
                    const int ix = ox * d.stride - d.pad + kx;
                    float v = 0.0f;
                    if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) v = xc[iy * d.W + ix];
                    col[row * P + p] = v;
                }
            }
        }
    }
}

} // namespace

Value conv2d(const Value& x, const Value& w, const Value* b, int stride, int pad) {
    const ConvDims d = conv_dims(x->value, w->value, stride, pad);
    const int64_t P = d.positions();
    const int64_t CKK = d.ckk();

    static thread_local std::vector<float> cols;
    im2col(x->value, d, cols);

    Tensor out({d.N, d.Co, d.OH, d.OW});
    // Y [Co, P] in a scratch buffer, then scatter to NCHW layout.
    static thread_local std::vector<float> ybuf;
    ybuf.resize(static_cast<size_t>(d.Co) * P);
    {
        MapConst W(w->value.data(), d.Co, CKK);
        MapConst C(cols.data(), CKK, P);
        const int blocks = column_block_count();
#pragma omp parallel for schedule(static)
        for (int blk = 0; blk < blocks; ++blk) {
            const int64_t c0 = P * blk / blocks;
            const int64_t c1 = P * (blk + 1) / blocks;
            if (c1 > c0) {
                MapMat Y(ybuf.data(), d.Co, P);
                Y.middleCols(c0, c1 - c0).noalias() = W * C.middleCols(c0, c1 - c0);
            }
        }
    }
    const float* bias = b ? (*b)->value.data() : nullptr;
    const int64_t hw = static_cast<int64_t>(d.OH) * d.OW;
    for (int n = 0; n < d.N; ++n)
        for (int co = 0; co < d.Co; ++co) {
            const float* src = ybuf.data() + co * P + static_cast<int64_t>(n) * hw;
            float* dst = out.data() + (static_cast<int64_t>(n) * d.Co + co) * hw;
            if (bias) {
                const float bv = bias[co];
                for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
            } else {
                std::memcpy(dst, src, static_cast<size_t>(hw) * sizeof(float));
            }
        }

    std::vector<Value> inputs{x, w};
    Value bias_v = b ? *b : nullptr;
    if (bias_v) inputs.push_back(bias_v);
    return make_node(std::move(out), std::move(inputs), [x, w, bias_v, d](Node& n) {
        const int64_t P = d.positions();
        const int64_t CKK = d.ckk();
        const int64_t hw = static_cast<int64_t>(d.OH) * d.OW;

        // Regroup dY into [Co, P].
        static thread_local std::vector<float> dybuf;
        dybuf.resize(static_cast<size_t>(d.Co) * P);
        for (int nn = 0; nn < d.N; ++nn)
            for (int co = 0; co < d.Co; ++co)
                std::memcpy(dybuf.data() + co * P + static_cast<int64_t>(nn) * hw,
                            n.grad.data() + (static_cast<int64_t>(nn) * d.Co + co) * hw,
                            static_cast<size_t>(hw) * sizeof(float));
        MapConst dY(dybuf.data(), d.Co, P);

        if (w->requires_grad || x->requires_grad) {
            static thread_local std::vector<float> cols_b;
            if (w->requires_grad) {
                im2col(x->value, d, cols_b);
                MapConst C(cols_b.data(), CKK, P);
                MapMat dW(w->ensure_grad().data(), d.Co, CKK);
                const int blocks = column_block_count();
#pragma omp parallel for schedule(static)
                for (int blk = 0; blk < blocks; ++blk) {
                    const int64_t r0 = d.Co * blk / blocks;
                    const int64_t r1 = d.Co * (blk + 1) / blocks;
                    if (r1 > r0) dW.middleRows(r0, r1 - r0).noalias() += dY.middleRows(r0, r1 - r0) * C.transpose();
                }
            }
            if (x->requires_grad) {
                static thread_local std::vector<float> dcols;
                dcols.resize(static_cast<size_t>(CKK) * P);
                MapConst W(w->value.data(), d.Co, CKK);
                {
                    const int blocks = column_block_count();
#pragma omp parallel for schedule(static)
                    for (int blk = 0; blk < blocks; ++blk) {
                        const int64_t c0 = P * blk / blocks;
                        const int64_t c1 = P * (blk + 1) / blocks;
                        if (c1 > c0) {
                            MapMat dC(dcols.data(), CKK, P);
                            dC.middleCols(c0, c1 - c0).noalias() = W.transpose() * dY.middleCols(c0, c1 - c0);
                        }
                    }
                }
                Tensor& gx = x->ensure_grad();
                // col2im scatter; samples are disjoint so the n-loop parallelizes.
#pragma omp parallel for schedule(static)
                for (int nn = 0; nn < d.N; ++nn) {
                    float* gxn = gx.data() + static_cast<int64_t>(nn) * d.Ci * d.H * d.W;
                    for (int oy = 0; oy < d.OH; ++oy)
                        for (int ox = 0; ox < d.OW; ++ox) {
                            const int64_t p = (static_cast<int64_t>(nn) * d.OH + oy) * d.OW + ox;
                            int64_t row = 0;
                            for (int c = 0; c < d.Ci; ++c) {
                                float* gc = gxn + static_cast<int64_t>(c) * d.H * d.W;
                                for (int ky = 0; ky < d.kh; ++ky) {
                                    const int iy = oy * d.stride - d.pad + ky;
                                    for (int kx = 0; kx < d.kw; ++kx, ++row) {
                                        const int ix = ox * d.stride - d.pad + kx;
                                        if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                                            gc[iy * d.W + ix] += dcols[row * P + p];
                                    }
                                }
                            }
                        }
                }
            }
        }
        if (bias_v && bias_v->requires_grad) {
            Tensor& gb = bias_v->ensure_grad();
            for (int co = 0; co < d.Co; ++co) {
                double s = 0.0;
                const float* row = dybuf.data() + co * P;
                for (int64_t i = 0; i < P; ++i) s += row[i];
                gb[co] += static_cast<float>(s);
            }
        }
    });
}

// --- group norm ---------------------------------------------------------------

Value group_norm(const Value& x, const Value& gamma, const Value& beta, int groups, float eps) {
    if (x->value.rank() != 4) throw ShapeError("group_norm expects [N,C,H,W]");
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    if (C % groups != 0) throw ParameterError("group_norm: channels not divisible by groups");
    if (gamma->value.numel() != C || beta->value.numel() != C) throw ShapeError("group_norm: affine params must be [C]");
    const int cpg = C / groups;
    const int64_t gsz = static_cast<int64_t>(cpg) * H * W;
    const int64_t hw = static_cast<int64_t>(H) * W;

    Tensor out(x->value.dims());
    auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(N) * groups * 2); // mean, rstd
    const float* px = x->value.data();
    const float* pg = gamma->value.data();
    const float* pb = beta->value.data();
    float* po = out.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const float* base = px + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * hw;
            double mean = 0.0;
            for (int64_t i = 0; i < gsz; ++i) mean += base[i];
            mean /= static_cast<double>(gsz);
            double var = 0.0;
            for (int64_t i = 0; i < gsz; ++i) {
                double dd = base[i] - mean;
                var += dd * dd;
            }
            var /= static_cast<double>(gsz);
            const float m = static_cast<float>(mean);
            const float rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2] = m;
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1] = rstd;
            float* ob = po + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * hw;
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const float* xc = base + cc * hw;
                float* oc = ob + cc * hw;
                for (int64_t i = 0; i < hw; ++i) oc[i] = (xc[i] - m) * rstd * pg[c] + pb[c];
            }
        }

    return make_node(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats, N, C, groups, cpg, hw, gsz](Node& n) {
        const float* px = x->value.data();
        const float* pg = gamma->value.data();
        const float* dy = n.grad.data();
        if (gamma->requires_grad || beta->requires_grad) {
            Tensor& ggam = gamma->ensure_grad();
            Tensor& gbet = beta->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const int g = c / cpg;
                double sg = 0.0, sb = 0.0;
                for (int nn = 0; nn < N; ++nn) {
                    const float m = (*stats)[(static_cast<size_t>(nn) * groups + g) * 2];
                    const float rstd = (*stats)[(static_cast<size_t>(nn) * groups + g) * 2 + 1];
                    const float* xc = px + (static_cast<int64_t>(nn) * C + c) * hw;
                    const float* dc = dy + (static_cast<int64_t>(nn) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        sg += dc[i] * (xc[i] - m) * rstd;
                        sb += dc[i];
                    }
                }
                ggam[c] += static_cast<float>(sg);
                gbet[c] += static_cast<float>(sb);
            }
        }
        if (x->requires_grad) {
            Tensor& gx = x->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
            for (int nn = 0; nn < N; ++nn)
                for (int g = 0; g < groups; ++g) {
                    const float m = (*stats)[(static_cast<size_t>(nn) * groups + g) * 2];
                    const float rstd = (*stats)[(static_cast<size_t>(nn) * groups + g) * 2 + 1];
                    const float* xb = px + (static_cast<int64_t>(nn) * C + static_cast<int64_t>(g) * cpg) * hw;
                    const float* db = dy + (static_cast<int64_t>(nn) * C + static_cast<int64_t>(g) * cpg) * hw;
                    float* gb = gx.data() + (static_cast<int64_t>(nn) * C + static_cast<int64_t>(g) * cpg) * hw;
                    // dxhat = dy * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double s1 = 0.0, s2 = 0.0;
                    for (int cc = 0; cc < cpg; ++cc) {
                        const float gmc = pg[g * cpg + cc];
                        const float* xc = xb + cc * hw;
                        const float* dc = db + cc * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            const float xhat = (xc[i] - m) * rstd;
                            const float dxh = dc[i] * gmc;
                            s1 += dxh;
                            s2 += dxh * xhat;
                        }
                    }
                    const float mean_dxh = static_cast<float>(s1 / static_cast<double>(gsz));
                    const float mean_dxh_xhat = static_cast<float>(s2 / static_cast<double>(gsz));
                    for (int cc = 0; cc < cpg; ++cc) {
                        const float gmc = pg[g * cpg + cc];
                        const float* xc = xb + cc * hw;
                        const float* dc = db + cc * hw;
                        float* gc = gb + cc * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            const float xhat = (xc[i] - m) * rstd;
                            const float dxh = dc[i] * gmc;
                            gc[i] += rstd * (dxh - mean_dxh - xhat * mean_dxh_xhat);
                        }
                    }
                }
        }
    });
}

// --- softmax -------------------------------------------------------------------

Value softmax_lastdim(const Value& x) {
    const int last = x->value.dim(x->value.rank() - 1);
    const int64_t rows = x->value.numel() / last;
    Tensor out(x->value.dims());
    const float* px = x->value.data();
    float* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * last;
        float* orow = po + r * last;
        float mx = xr[0];
        for (int i = 1; i < last; ++i) mx = std::max(mx, xr[i]);
        double s = 0.0;
        for (int i = 0; i < last; ++i) {
            orow[i] = std::exp(xr[i] - mx);
            s += orow[i];
        }
        const float inv = static_cast<float>(1.0 / s);
        for (int i = 0; i < last; ++i) orow[i] *= inv;
    }
    return make_node(std::move(out), {x}, [x, rows, last](Node& n) {
        Tensor& g = x->ensure_grad();
        const float* y = n.value.data();
        const float* dy = n.grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
            const float* yr = y + r * last;
            const float* dr = dy + r * last;
            float* gr = g.data() + r * last;
            double dot = 0.0;
            for (int i = 0; i < last; ++i) dot += static_cast<double>(dr[i]) * yr[i];
            for (int i = 0; i < last; ++i) gr[i] += yr[i] * (dr[i] - static_cast<float>(dot));
        }
    });
}

// --- resampling ----------------------------------------------------------------

Value upsample2x_nearest(const Value& x) {
    if (x->value.rank() != 4) throw ShapeError("upsample2x_nearest expects [N,C,H,W]");
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    const float* src = x->value.data();
    float* dst = out.data();
    const int64_t planes = static_cast<int64_t>(N) * C;
    for (int64_t p = 0; p < planes; ++p) {
        const float* sp = src + p * H * W;
        float* dp = dst + p * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx) dp[y * 2 * W + xx] = sp[(y / 2) * W + (xx / 2)];
    }
    return make_node(std::move(out), {x}, [x, planes, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        const float* dy = n.grad.data();
        for (int64_t p = 0; p < planes; ++p) {
            const float* dp = dy + p * 4 * H * W;
            float* gp = g.data() + p * H * W;
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx) gp[(y / 2) * W + (xx / 2)] += dp[y * 2 * W + xx];
        }
    });
}

namespace {

struct LerpWeight {
    int i0, i1;
    float w1; // weight of i1; (1-w1) for i0
};

std::vector<LerpWeight> axis_weights(int in, int out) {
    std::vector<LerpWeight> ws(static_cast<size_t>(out));
    const float s = static_cast<float>(in) / static_cast<float>(out);
    for (int o = 0; o < out; ++o) {
        float f = (static_cast<float>(o) + 0.5f) * s - 0.5f;
        f = std::max(0.0f, std::min(f, static_cast<float>(in - 1)));
        int i0 = static_cast<int>(f);
        ws[static_cast<size_t>(o)] = {i0, std::min(i0 + 1, in - 1), f - static_cast<float>(i0)};
    }
    return ws;
}

} // namespace

Value resize_bilinear(const Value& x, int oh, int ow) {
    if (x->value.rank() != 4) throw ShapeError("resize_bilinear expects [N,C,H,W]");
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    if (H == oh && W == ow) return make_node(Tensor(x->value), {x}, [x](Node& n) { x->accumulate_grad(n.grad); });
    auto wy = std::make_shared<std::vector<LerpWeight>>(axis_weights(H, oh));
    auto wx = std::make_shared<std::vector<LerpWeight>>(axis_weights(W, ow));
    Tensor out({N, C, oh, ow});
    const int64_t planes = static_cast<int64_t>(N) * C;
    const float* src = x->value.data();
    float* dst = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
        const float* sp = src + p * H * W;
        float* dp = dst + p * static_cast<int64_t>(oh) * ow;
        for (int y = 0; y < oh; ++y) {
            const auto& ly = (*wy)[static_cast<size_t>(y)];
            for (int xo = 0; xo < ow; ++xo) {
                const auto& lx = (*wx)[static_cast<size_t>(xo)];
                const float v00 = sp[ly.i0 * W + lx.i0], v01 = sp[ly.i0 * W + lx.i1];
                const float v10 = sp[ly.i1 * W + lx.i0], v11 = sp[ly.i1 * W + lx.i1];
                dp[y * ow + xo] =
                    (1 - ly.w1) * ((1 - lx.w1) * v00 + lx.w1 * v01) + ly.w1 * ((1 - lx.w1) * v10 + lx.w1 * v11);
            }
        }
    }
    return make_node(std::move(out), {x}, [x, wy, wx, planes, H, W, oh, ow](Node& n) {
        Tensor& g = x->ensure_grad();
        const float* dy = n.grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t p = 0; p < planes; ++p) {
            const float* dp = dy + p * static_cast<int64_t>(oh) * ow;
            float* gp = g.data() + p * H * W;
            for (int y = 0; y < oh; ++y) {
                const auto& ly = (*wy)[static_cast<size_t>(y)];
                for (int xo = 0; xo < ow; ++xo) {
                    const auto& lx = (*wx)[static_cast<size_t>(xo)];
                    const float d = dp[y * ow + xo];
                    gp[ly.i0 * W + lx.i0] += (1 - ly.w1) * (1 - lx.w1) * d;
                    gp[ly.i0 * W + lx.i1] += (1 - ly.w1) * lx.w1 * d;
                    gp[ly.i1 * W + lx.i0] += ly.w1 * (1 - lx.w1) * d;
                    gp[ly.i1 * W + lx.i1] += ly.w1 * lx.w1 * d;
                }
            }
        }
    });
}

Value gather_rows(const Value& table, const std::vector<int>& indices, std::vector<int> out_dims) {
    if (table->value.rank() != 2) throw ShapeError("gather_rows expects a [rows, d] table");
    const int rows = table->value.dim(0), dfeat = table->value.dim(1);
    int64_t n = 1;
    for (int v : out_dims) n *= v;
    if (out_dims.empty() || out_dims.back() != dfeat || n != static_cast<int64_t>(indices.size()) * dfeat)
        throw ShapeError("gather_rows: out_dims inconsistent with indices");
    Tensor out(out_dims);
    for (size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        if (idx < 0 || idx >= rows) throw ParameterError("gather_rows: index out of range");
        std::memcpy(out.data() + static_cast<int64_t>(i) * dfeat, table->value.data() + static_cast<int64_t>(idx) * dfeat,
                    static_cast<size_t>(dfeat) * sizeof(float));
    }
    auto idx_copy = std::make_shared<std::vector<int>>(indices);
    return make_node(std::move(out), {table}, [table, idx_copy, dfeat](Node& n) {
        Tensor& g = table->ensure_grad();
        for (size_t i = 0; i < idx_copy->size(); ++i) {
            float* dst = g.data() + static_cast<int64_t>((*idx_copy)[i]) * dfeat;
            const float* src = n.grad.data() + static_cast<int64_t>(i) * dfeat;
            for (int j = 0; j < dfeat; ++j) dst[j] += src[j];
        }
    });
}

// --- reductions / losses ---------------------------------------------------------

Value sum_all(const Value& x) {
    Tensor out({1});
    out[0] = static_cast<float>(x->value.sum());
    return make_node(std::move(out), {x}, [x](Node& n) {
        Tensor& g = x->ensure_grad();
        const float d = n.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
    });
}

Value mean_all(const Value& x) {
    const int64_t n = x->value.numel();
    Tensor out({1});
    out[0] = static_cast<float>(x->value.sum() / static_cast<double>(n));
    return make_node(std::move(out), {x}, [x, n](Node& node) {
        Tensor& g = x->ensure_grad();
        const float d = node.grad[0] / static_cast<float>(n);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
    });
}

Value mse_loss(const Value& a, const Value& b) {
    check_same_shape(a, b, "mse_loss");
    const int64_t n = a->value.numel();
    double s = 0.0;
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pa[i]) - pb[i];
        s += d * d;
    }
    Tensor out({1});
    out[0] = static_cast<float>(s / static_cast<double>(n));
    return make_node(std::move(out), {a, b}, [a, b, n](Node& node) {
        const float c = 2.0f * node.grad[0] / static_cast<float>(n);
        const float* pa = a->value.data();
        const float* pb = b->value.data();
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (int64_t i = 0; i < n; ++i) g[i] += c * (pa[i] - pb[i]);
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (int64_t i = 0; i < n; ++i) g[i] -= c * (pa[i] - pb[i]);
        }
    });
}

namespace {

void check_logit_label_shapes(const Tensor& logits, const LabelMap& labels) {
    if (logits.rank() != 4) throw ShapeError("loss expects logits [N,cls,H,W]");
    const int N = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
    const bool ok = (labels.dims.size() == 3 && labels.dims[0] == N && labels.dims[1] == H && labels.dims[2] == W) ||
                    (labels.dims.size() == 2 && N == 1 && labels.dims[0] == H && labels.dims[1] == W);
    if (!ok) throw ShapeError("labels do not match logits " + logits.shape_str());
}

} // namespace

Value cross_entropy_loss(const Value& logits, const LabelMap& labels, int ignore_index, bool* all_ignored) {
    check_logit_label_shapes(logits->value, labels);
    const int N = logits->value.dim(0), cls = logits->value.dim(1);
    const int H = logits->value.dim(2), W = logits->value.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    const float* pl = logits->value.data();
    double total = 0.0;
    int64_t count = 0;
    for (int n = 0; n < N; ++n)
        for (int64_t p = 0; p < hw; ++p) {
            const int32_t lab = labels.data[static_cast<size_t>(n * hw + p)];
            if (lab == ignore_index) continue;
            if (lab < 0 || lab >= cls) throw DataError("label value out of range: " + std::to_string(lab));
            const float* lp = pl + (static_cast<int64_t>(n) * cls) * hw + p;
            float mx = lp[0];
            for (int c = 1; c < cls; ++c) mx = std::max(mx, lp[c * hw]);
            double se = 0.0;
            for (int c = 0; c < cls; ++c) se += std::exp(static_cast<double>(lp[c * hw]) - mx);
            total += std::log(se) + mx - lp[lab * hw];
            ++count;
        }
    if (all_ignored) *all_ignored = (count == 0);
    Tensor out({1});
    out[0] = count ? static_cast<float>(total / static_cast<double>(count)) : 0.0f;
    auto labels_copy = std::make_shared<LabelMap>(labels);
    return make_node(std::move(out), {logits}, [logits, labels_copy, ignore_index, N, cls, hw, count](Node& node) {
        if (count == 0) return;
        Tensor& g = logits->ensure_grad();
        const float* pl = logits->value.data();
        const float c0 = node.grad[0] / static_cast<float>(count);
        for (int n = 0; n < N; ++n)
            for (int64_t p = 0; p < hw; ++p) {
                const int32_t lab = labels_copy->data[static_cast<size_t>(n * hw + p)];
                if (lab == ignore_index) continue;
                const float* lp = pl + (static_cast<int64_t>(n) * cls) * hw + p;
                float* gp = g.data() + (static_cast<int64_t>(n) * cls) * hw + p;
                float mx = lp[0];
                for (int c = 1; c < cls; ++c) mx = std::max(mx, lp[c * hw]);
                double se = 0.0;
                for (int c = 0; c < cls; ++c) se += std::exp(static_cast<double>(lp[c * hw]) - mx);
                for (int c = 0; c < cls; ++c) {
                    const float soft = static_cast<float>(std::exp(static_cast<double>(lp[c * hw]) - mx) / se);
                    gp[c * hw] += c0 * (soft - (c == lab ? 1.0f : 0.0f));
                }
            }
    });
}

Value kl_consistency_loss(const Tensor& teacher_logits, const Value& student_logits) {
    if (!teacher_logits.same_shape(student_logits->value))
        throw ShapeError("kl_consistency_loss: teacher " + teacher_logits.shape_str() + " vs student " +
                         student_logits->value.shape_str());
    if (teacher_logits.rank() != 4) throw ShapeError("kl_consistency_loss expects [N,cls,H,W]");
    const int N = teacher_logits.dim(0), cls = teacher_logits.dim(1);
    const int64_t hw = static_cast<int64_t>(teacher_logits.dim(2)) * teacher_logits.dim(3);
    const int64_t pixels = static_cast<int64_t>(N) * hw;

    auto log_softmax_at = [cls, hw](const float* base, int64_t plane_off, int64_t p, double* out_logp) {
        const float* lp = base + plane_off + p;
        float mx = lp[0];
        for (int c = 1; c < cls; ++c) mx = std::max(mx, lp[c * hw]);
        double se = 0.0;
        for (int c = 0; c < cls; ++c) se += std::exp(static_cast<double>(lp[c * hw]) - mx);
        const double lse = std::log(se) + mx;
        for (int c = 0; c < cls; ++c) out_logp[c] = static_cast<double>(lp[c * hw]) - lse;
    };

    double total = 0.0;
    std::vector<double> lpt(static_cast<size_t>(cls)), lps(static_cast<size_t>(cls));
    for (int n = 0; n < N; ++n)
        for (int64_t p = 0; p < hw; ++p) {
            const int64_t off = static_cast<int64_t>(n) * cls * hw;
            log_softmax_at(teacher_logits.data(), off, p, lpt.data());
            log_softmax_at(student_logits->value.data(), off, p, lps.data());
            for (int c = 0; c < cls; ++c) total += std::exp(lpt[static_cast<size_t>(c)]) *
                                                   (lpt[static_cast<size_t>(c)] - lps[static_cast<size_t>(c)]);
        }
    Tensor out({1});
    out[0] = static_cast<float>(total / static_cast<double>(pixels));
    auto teacher = std::make_shared<Tensor>(teacher_logits);
    return make_node(std::move(out), {student_logits}, [student_logits, teacher, N, cls, hw, pixels](Node& node) {
        Tensor& g = student_logits->ensure_grad();
        const float c0 = node.grad[0] / static_cast<float>(pixels);
        std::vector<double> lpt(static_cast<size_t>(cls)), lps(static_cast<size_t>(cls));
        auto log_softmax_at = [cls, hw = hw](const float* base, int64_t off, int64_t p, double* out_logp) {
            const float* lp = base + off + p;
            float mx = lp[0];
            for (int c = 1; c < cls; ++c) mx = std::max(mx, lp[c * hw]);
            double se = 0.0;
            for (int c = 0; c < cls; ++c) se += std::exp(static_cast<double>(lp[c * hw]) - mx);
            const double lse = std::log(se) + mx;
            for (int c = 0; c < cls; ++c) out_logp[c] = static_cast<double>(lp[c * hw]) - lse;
        };
        for (int n = 0; n < N; ++n)
            for (int64_t p = 0; p < hw; ++p) {
                const int64_t off = static_cast<int64_t>(n) * cls * hw;
                log_softmax_at(teacher->data(), off, p, lpt.data());
                log_softmax_at(student_logits->value.data(), off, p, lps.data());
                float* gp = g.data() + off + p;
                for (int c = 0; c < cls; ++c)
                    gp[c * hw] += c0 * static_cast<float>(std::exp(lps[static_cast<size_t>(c)]) -
                                                          std::exp(lpt[static_cast<size_t>(c)]));
            }
    });
}

} // namespace diffseg
