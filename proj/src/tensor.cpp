#include "petdiff/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "petdiff/errors.hpp"

namespace petdiff {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr float kGroupNormEps = 1e-5f;

std::shared_ptr<Node> make_node(Shape shape, OpKind op,
                                std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), 0.0f);
    n->op = op;
    n->parents = std::move(parents);
    for (const auto& p : n->parents) {
        if (p->requires_grad) n->requires_grad = true;
    }
    return n;
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
}

// Gradient buffer of `parent` as seen by one backward sweep: leaf gradients
// are redirected into the store when one is given.
std::vector<float>& grad_buf(Node* parent, GradStore* store) {
    if (store != nullptr && parent->op == OpKind::Leaf) {
        auto& g = store->grads[parent];
        if (g.empty()) g.assign(parent->numel(), 0.0f);
        return g;
    }
    if (parent->grad.empty()) parent->grad.assign(parent->numel(), 0.0f);
    return parent->grad;
}

struct Dims3 {
    int c, h, w;
};

Dims3 dims3(const Shape& s, const char* op) {
    if (s.size() != 3) throw DimError(std::string(op) + ": expected [C,H,W], got " + shape_str(s));
    return {s[0], s[1], s[2]};
}

void im2col(const float* x, int ci, int h, int w, int kh, int kw, int pad, int stride,
            int ho, int wo, float* cols) {
    // cols layout: [ci*kh*kw, ho*wo], row-major.
    const int plane = ho * wo;
    for (int c = 0; c < ci; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                float* row = cols + ((c * kh + ki) * kw + kj) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ki - pad;
                    float* out = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + wo, 0.0f);
                        continue;
                    }
                    const float* in = x + (c * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kj - pad;
                        out[ox] = (ix >= 0 && ix < w) ? in[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_accum(const float* cols, int ci, int h, int w, int kh, int kw, int pad, int stride,
                  int ho, int wo, float* dx) {
    const int plane = ho * wo;
    for (int c = 0; c < ci; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const float* row = cols + ((c * kh + ki) * kw + kj) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    float* out = dx + (c * h + iy) * w;
                    const float* in = row + oy * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kj - pad;
                        if (ix >= 0 && ix < w) out[ix] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimError("shape dims must be positive: " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0f, requires_grad);
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data.assign(shape_numel(shape), value);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimError("from_data: " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, bool requires_grad) {
    std::vector<float> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<float>(rng.normal());
    return from_data(shape, std::move(d), requires_grad);
}

const Shape& Tensor::shape() const {
    check_defined(*this, "shape");
    return n_->shape;
}

size_t Tensor::numel() const {
    check_defined(*this, "numel");
    return n_->numel();
}

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }
int Tensor::ndim() const { return static_cast<int>(shape().size()); }

const std::vector<float>& Tensor::data() const {
    check_defined(*this, "data");
    return n_->data;
}

std::vector<float>& Tensor::mutable_data() {
    check_defined(*this, "mutable_data");
    return n_->data;
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor is not scalar, " + shape_str(shape()));
    return n_->data[0];
}

bool Tensor::requires_grad() const {
    check_defined(*this, "requires_grad");
    return n_->requires_grad;
}

bool Tensor::has_grad() const {
    check_defined(*this, "has_grad");
    return !n_->grad.empty();
}

const std::vector<float>& Tensor::grad() const {
    check_defined(*this, "grad");
    if (n_->grad.empty()) throw ContractError("grad: no gradient present");
    return n_->grad;
}

void Tensor::clear_grad() {
    check_defined(*this, "clear_grad");
    n_->grad.clear();
}

Tensor Tensor::clone() const {
    check_defined(*this, "clone");
    return from_data(n_->shape, n_->data, n_->requires_grad);
}

void Tensor::assert_finite(const std::string& what) const {
    for (float v : data()) {
        if (!std::isfinite(v)) throw NumericError(what + ": non-finite value");
    }
}

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    auto n = make_node(a.shape(), OpKind::Add, {a.node(), b.node()});
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i) n->data[i] = ad[i] + bd[i];
    return Tensor::wrap(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    auto n = make_node(a.shape(), OpKind::Sub, {a.node(), b.node()});
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i) n->data[i] = ad[i] - bd[i];
    return Tensor::wrap(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    auto n = make_node(a.shape(), OpKind::Mul, {a.node(), b.node()});
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i) n->data[i] = ad[i] * bd[i];
    return Tensor::wrap(n);
}

Tensor scale(const Tensor& a, float s) {
    check_defined(a, "scale");
    auto n = make_node(a.shape(), OpKind::Scale, {a.node()});
    n->scalar = s;
    const auto& ad = a.data();
    for (size_t i = 0; i < ad.size(); ++i) n->data[i] = ad[i] * s;
    return Tensor::wrap(n);
}

// ---- matrix ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n_cols = b.dim(1);
    auto n = make_node({m, n_cols}, OpKind::Matmul, {a.node(), b.node()});
    MutMap(n->data.data(), m, n_cols).noalias() =
        ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n_cols);
    return Tensor::wrap(n);
}

Tensor transpose(const Tensor& a) {
    check_defined(a, "transpose");
    if (a.ndim() != 2) throw DimError("transpose: expected 2-D, got " + shape_str(a.shape()));
    const int m = a.dim(0), k = a.dim(1);
    auto n = make_node({k, m}, OpKind::Transpose2D, {a.node()});
    MutMap(n->data.data(), k, m).noalias() = ConstMap(a.data().data(), m, k).transpose();
    return Tensor::wrap(n);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    check_defined(a, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw DimError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                       shape_str(shape));
    }
    auto n = make_node(shape, OpKind::Reshape, {a.node()});
    n->data = a.data();
    return Tensor::wrap(n);
}

// ---- nonlinearities ----

Tensor softmax_lastdim(const Tensor& a) {
    check_defined(a, "softmax");
    if (a.ndim() < 1) throw DimError("softmax: needs at least 1 axis");
    const int cols = a.dim(a.ndim() - 1);
    const size_t rows = a.numel() / static_cast<size_t>(cols);
    auto n = make_node(a.shape(), OpKind::SoftmaxLast, {a.node()});
    const float* x = a.data().data();
    float* y = n->data.data();
    for (size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        float* yr = y + r * cols;
        float mx = xr[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        float sum = 0.0f;
        for (int j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < cols; ++j) yr[j] *= inv;
    }
    return Tensor::wrap(n);
}

Tensor silu(const Tensor& a) {
    check_defined(a, "silu");
    auto n = make_node(a.shape(), OpKind::Silu, {a.node()});
    const auto& ad = a.data();
    for (size_t i = 0; i < ad.size(); ++i) {
        const float s = 1.0f / (1.0f + std::exp(-ad[i]));
        n->data[i] = ad[i] * s;
    }
    return Tensor::wrap(n);
}

// ---- conv ----

Tensor conv2d(const Tensor& input, const Tensor& kernel, int padding, int stride) {
    check_defined(input, "conv2d");
    check_defined(kernel, "conv2d");
    const auto [ci, h, w] = dims3(input.shape(), "conv2d input");
    if (kernel.ndim() != 4) {
        throw DimError("conv2d kernel: expected [C_out,C_in,kh,kw], got " +
                       shape_str(kernel.shape()));
    }
    const int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kci != ci) {
        throw DimError("conv2d: input channels " + std::to_string(ci) + " vs kernel " +
                       std::to_string(kci));
    }
    if (kh % 2 == 0 || kw % 2 == 0) throw DimError("conv2d: kernel dims must be odd");
    if (padding < 0) throw DimError("conv2d: padding must be >= 0");
    if (stride < 1) throw DimError("conv2d: stride must be >= 1");
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw DimError("conv2d: kernel larger than padded input");
    }
    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (w + 2 * padding - kw) / stride + 1;

    auto n = make_node({co, ho, wo}, OpKind::Conv2d, {input.node(), kernel.node()});
    n->i0 = padding;
    n->i1 = stride;

    const int ckk = ci * kh * kw;
    thread_local std::vector<float> cols;
    cols.resize(static_cast<size_t>(ckk) * ho * wo);
    im2col(input.data().data(), ci, h, w, kh, kw, padding, stride, ho, wo, cols.data());
    MutMap(n->data.data(), co, ho * wo).noalias() =
        ConstMap(kernel.data().data(), co, ckk) * ConstMap(cols.data(), ckk, ho * wo);
    return Tensor::wrap(n);
}

// ---- bias adds ----

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    check_defined(x, "add_channel_bias");
    check_defined(b, "add_channel_bias");
    const auto [c, h, w] = dims3(x.shape(), "add_channel_bias");
    if (b.numel() != static_cast<size_t>(c)) {
        throw DimError("add_channel_bias: bias numel " + std::to_string(b.numel()) +
                       " vs channels " + std::to_string(c));
    }
    auto n = make_node(x.shape(), OpKind::AddChannelBias, {x.node(), b.node()});
    const float* xd = x.data().data();
    const float* bd = b.data().data();
    float* y = n->data.data();
    const int plane = h * w;
    for (int ch = 0; ch < c; ++ch) {
        const float bias = bd[ch];
        for (int i = 0; i < plane; ++i) y[ch * plane + i] = xd[ch * plane + i] + bias;
    }
    return Tensor::wrap(n);
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    check_defined(x, "add_row_bias");
    check_defined(b, "add_row_bias");
    if (x.ndim() != 2) throw DimError("add_row_bias: expected 2-D, got " + shape_str(x.shape()));
    const int m = x.dim(0), cols = x.dim(1);
    if (b.numel() != static_cast<size_t>(cols)) {
        throw DimError("add_row_bias: bias numel " + std::to_string(b.numel()) + " vs cols " +
                       std::to_string(cols));
    }
    auto n = make_node(x.shape(), OpKind::AddRowBias, {x.node(), b.node()});
    const float* xd = x.data().data();
    const float* bd = b.data().data();
    float* y = n->data.data();
    for (int r = 0; r < m; ++r) {
        for (int j = 0; j < cols; ++j) y[r * cols + j] = xd[r * cols + j] + bd[j];
    }
    return Tensor::wrap(n);
}

// ---- group norm ----

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups) {
    check_defined(x, "group_norm");
    check_defined(gamma, "group_norm");
    check_defined(beta, "group_norm");
    const auto [c, h, w] = dims3(x.shape(), "group_norm");
    if (groups < 1 || c % groups != 0) {
        throw ConfigError("group_norm: channels " + std::to_string(c) +
                          " not divisible by groups " + std::to_string(groups));
    }
    if (gamma.numel() != static_cast<size_t>(c) || beta.numel() != static_cast<size_t>(c)) {
        throw DimError("group_norm: gamma/beta must have one value per channel");
    }
    auto n = make_node(x.shape(), OpKind::GroupNorm, {x.node(), gamma.node(), beta.node()});
    n->i0 = groups;
    n->saved.resize(2 * static_cast<size_t>(groups));

    const int cpg = c / groups;
    const int plane = h * w;
    const size_t gsize = static_cast<size_t>(cpg) * plane;
    const float* xd = x.data().data();
    const float* gd = gamma.data().data();
    const float* bd = beta.data().data();
    float* y = n->data.data();
    for (int g = 0; g < groups; ++g) {
        const float* xg = xd + static_cast<size_t>(g) * gsize;
        double sum = 0.0, sq = 0.0;
        for (size_t i = 0; i < gsize; ++i) {
            sum += xg[i];
            sq += static_cast<double>(xg[i]) * xg[i];
        }
        const double mean = sum / static_cast<double>(gsize);
        const double var = sq / static_cast<double>(gsize) - mean * mean;
        const float m = static_cast<float>(mean);
        const float inv = static_cast<float>(1.0 / std::sqrt(std::max(var, 0.0) + kGroupNormEps));
        n->saved[2 * g] = m;
        n->saved[2 * g + 1] = inv;
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const float* xr = xd + static_cast<size_t>(ch) * plane;
            float* yr = y + static_cast<size_t>(ch) * plane;
            const float sc = gd[ch] * inv;
            const float sh = bd[ch] - m * sc;
            for (int i = 0; i < plane; ++i) yr[i] = xr[i] * sc + sh;
        }
    }
    return Tensor::wrap(n);
}

// ---- spatial ----

Tensor upsample_nearest_2x(const Tensor& x) {
    check_defined(x, "upsample_nearest_2x");
    const auto [c, h, w] = dims3(x.shape(), "upsample_nearest_2x");
    auto n = make_node({c, 2 * h, 2 * w}, OpKind::UpsampleNearest2x, {x.node()});
    const float* xd = x.data().data();
    float* y = n->data.data();
    for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                const float v = xd[(ch * h + i) * w + j];
                float* base = y + ((ch * 2 * h + 2 * i) * 2 * w + 2 * j);
                base[0] = v;
                base[1] = v;
                base[2 * w] = v;
                base[2 * w + 1] = v;
            }
        }
    }
    return Tensor::wrap(n);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_defined(a, "concat_channels");
    check_defined(b, "concat_channels");
    const auto [ca, ha, wa] = dims3(a.shape(), "concat_channels");
    const auto [cb, hb, wb] = dims3(b.shape(), "concat_channels");
    if (ha != hb || wa != wb) {
        throw DimError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    auto n = make_node({ca + cb, ha, wa}, OpKind::ConcatChannels, {a.node(), b.node()});
    std::copy(a.data().begin(), a.data().end(), n->data.begin());
    std::copy(b.data().begin(), b.data().end(), n->data.begin() + a.data().size());
    return Tensor::wrap(n);
}

Tensor hconcat(const Tensor& a, const Tensor& b) {
    check_defined(a, "hconcat");
    check_defined(b, "hconcat");
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0)) {
        throw DimError("hconcat: incompatible " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    const int m = a.dim(0), n1 = a.dim(1), n2 = b.dim(1);
    auto n = make_node({m, n1 + n2}, OpKind::HConcat, {a.node(), b.node()});
    const float* ad = a.data().data();
    const float* bd = b.data().data();
    for (int r = 0; r < m; ++r) {
        std::copy(ad + r * n1, ad + (r + 1) * n1, n->data.begin() + r * (n1 + n2));
        std::copy(bd + r * n2, bd + (r + 1) * n2, n->data.begin() + r * (n1 + n2) + n1);
    }
    return Tensor::wrap(n);
}

Tensor slice_cols(const Tensor& a, int start, int len) {
    check_defined(a, "slice_cols");
    if (a.ndim() != 2) throw DimError("slice_cols: expected 2-D, got " + shape_str(a.shape()));
    const int m = a.dim(0), cols = a.dim(1);
    if (start < 0 || len < 1 || start + len > cols) {
        throw DimError("slice_cols: range [" + std::to_string(start) + "," +
                       std::to_string(start + len) + ") outside " + std::to_string(cols));
    }
    auto n = make_node({m, len}, OpKind::SliceCols, {a.node()});
    n->i0 = start;
    n->i1 = len;
    const float* ad = a.data().data();
    for (int r = 0; r < m; ++r) {
        std::copy(ad + r * cols + start, ad + r * cols + start + len, n->data.begin() + r * len);
    }
    return Tensor::wrap(n);
}

// ---- reductions ----

Tensor sum_all(const Tensor& a) {
    check_defined(a, "sum_all");
    auto n = make_node({}, OpKind::SumAll, {a.node()});
    double s = 0.0;
    for (float v : a.data()) s += v;
    n->data[0] = static_cast<float>(s);
    return Tensor::wrap(n);
}

Tensor mean_all(const Tensor& a) {
    check_defined(a, "mean_all");
    auto n = make_node({}, OpKind::MeanAll, {a.node()});
    double s = 0.0;
    for (float v : a.data()) s += v;
    n->data[0] = static_cast<float>(s / static_cast<double>(a.numel()));
    return Tensor::wrap(n);
}

// ---- backward ----

namespace {

void backprop_node(Node* n, GradStore* store) {
    const auto& g = n->grad;
    switch (n->op) {
        case OpKind::Leaf:
            return;
        case OpKind::Add: {
            for (int side = 0; side < 2; ++side) {
                Node* p = n->parents[side].get();
                if (!p->requires_grad) continue;
                auto& pg = grad_buf(p, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            return;
        }
        case OpKind::Sub: {
            Node* a = n->parents[0].get();
            Node* b = n->parents[1].get();
            if (a->requires_grad) {
                auto& pg = grad_buf(a, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
            }
            return;
        }
        case OpKind::Mul: {
            Node* a = n->parents[0].get();
            Node* b = n->parents[1].get();
            if (a->requires_grad) {
                auto& pg = grad_buf(a, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * b->data[i];
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * a->data[i];
            }
            return;
        }
        case OpKind::Scale: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            auto& pg = grad_buf(a, store);
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * n->scalar;
            return;
        }
        case OpKind::Matmul: {
            Node* a = n->parents[0].get();
            Node* b = n->parents[1].get();
            const int m = a->shape[0], k = a->shape[1], c = b->shape[1];
            if (a->requires_grad) {
                auto& pg = grad_buf(a, store);
                MutMap(pg.data(), m, k).noalias() +=
                    ConstMap(g.data(), m, c) * ConstMap(b->data.data(), k, c).transpose();
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                MutMap(pg.data(), k, c).noalias() +=
                    ConstMap(a->data.data(), m, k).transpose() * ConstMap(g.data(), m, c);
            }
            return;
        }
        case OpKind::Transpose2D: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            const int m = a->shape[0], k = a->shape[1];
            auto& pg = grad_buf(a, store);
            MutMap(pg.data(), m, k).noalias() += ConstMap(g.data(), k, m).transpose();
            return;
        }
        case OpKind::Reshape: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            auto& pg = grad_buf(a, store);
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            return;
        }
        case OpKind::SoftmaxLast: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            const int cols = n->shape.back();
            const size_t rows = n->numel() / static_cast<size_t>(cols);
            auto& pg = grad_buf(a, store);
            for (size_t r = 0; r < rows; ++r) {
                const float* yr = n->data.data() + r * cols;
                const float* gr = g.data() + r * cols;
                float dot = 0.0f;
                for (int j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                float* pr = pg.data() + r * cols;
                for (int j = 0; j < cols; ++j) pr[j] += yr[j] * (gr[j] - dot);
            }
            return;
        }
        case OpKind::Silu: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            auto& pg = grad_buf(a, store);
            for (size_t i = 0; i < g.size(); ++i) {
                const float x = a->data[i];
                const float s = 1.0f / (1.0f + std::exp(-x));
                pg[i] += g[i] * s * (1.0f + x * (1.0f - s));
            }
            return;
        }
        case OpKind::Conv2d: {
            Node* x = n->parents[0].get();
            Node* k = n->parents[1].get();
            const int ci = x->shape[0], h = x->shape[1], w = x->shape[2];
            const int co = k->shape[0], kh = k->shape[2], kw = k->shape[3];
            const int pad = n->i0, stride = n->i1;
            const int ho = n->shape[1], wo = n->shape[2];
            const int ckk = ci * kh * kw;
            const int plane = ho * wo;
            if (k->requires_grad) {
                thread_local std::vector<float> cols;
                cols.resize(static_cast<size_t>(ckk) * plane);
                im2col(x->data.data(), ci, h, w, kh, kw, pad, stride, ho, wo, cols.data());
                auto& pg = grad_buf(k, store);
                MutMap(pg.data(), co, ckk).noalias() +=
                    ConstMap(g.data(), co, plane) * ConstMap(cols.data(), ckk, plane).transpose();
            }
            if (x->requires_grad) {
                thread_local std::vector<float> dcols;
                dcols.resize(static_cast<size_t>(ckk) * plane);
                MutMap(dcols.data(), ckk, plane).noalias() =
                    ConstMap(k->data.data(), co, ckk).transpose() * ConstMap(g.data(), co, plane);
                auto& pg = grad_buf(x, store);
                col2im_accum(dcols.data(), ci, h, w, kh, kw, pad, stride, ho, wo, pg.data());
            }
            return;
        }
        case OpKind::AddChannelBias: {
            Node* x = n->parents[0].get();
            Node* b = n->parents[1].get();
            const int c = n->shape[0];
            const int plane = n->shape[1] * n->shape[2];
            if (x->requires_grad) {
                auto& pg = grad_buf(x, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                for (int ch = 0; ch < c; ++ch) {
                    float s = 0.0f;
                    const float* gr = g.data() + static_cast<size_t>(ch) * plane;
                    for (int i = 0; i < plane; ++i) s += gr[i];
                    pg[ch] += s;
                }
            }
            return;
        }
        case OpKind::AddRowBias: {
            Node* x = n->parents[0].get();
            Node* b = n->parents[1].get();
            const int m = n->shape[0], cols = n->shape[1];
            if (x->requires_grad) {
                auto& pg = grad_buf(x, store);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                for (int r = 0; r < m; ++r) {
                    const float* gr = g.data() + static_cast<size_t>(r) * cols;
                    for (int j = 0; j < cols; ++j) pg[j] += gr[j];
                }
            }
            return;
        }
        case OpKind::GroupNorm: {
            Node* x = n->parents[0].get();
            Node* gamma = n->parents[1].get();
            Node* beta = n->parents[2].get();
            const int c = n->shape[0];
            const int plane = n->shape[1] * n->shape[2];
            const int groups = n->i0;
            const int cpg = c / groups;
            const size_t gsize = static_cast<size_t>(cpg) * plane;
            if (beta->requires_grad) {
                auto& pg = grad_buf(beta, store);
                for (int ch = 0; ch < c; ++ch) {
                    float s = 0.0f;
                    const float* gr = g.data() + static_cast<size_t>(ch) * plane;
                    for (int i = 0; i < plane; ++i) s += gr[i];
                    pg[ch] += s;
                }
            }
            if (gamma->requires_grad) {
                auto& pg = grad_buf(gamma, store);
                for (int grp = 0; grp < groups; ++grp) {
                    const float mean = n->saved[2 * grp];
                    const float inv = n->saved[2 * grp + 1];
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int ch = grp * cpg + cc;
                        const float* xr = x->data.data() + static_cast<size_t>(ch) * plane;
                        const float* gr = g.data() + static_cast<size_t>(ch) * plane;
                        float s = 0.0f;
                        for (int i = 0; i < plane; ++i) s += gr[i] * (xr[i] - mean) * inv;
                        pg[ch] += s;
                    }
                }
            }
            if (x->requires_grad) {
                auto& pg = grad_buf(x, store);
                for (int grp = 0; grp < groups; ++grp) {
                    const float mean = n->saved[2 * grp];
                    const float inv = n->saved[2 * grp + 1];
                    // dxhat = g * gamma ; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int ch = grp * cpg + cc;
                        const float gm = gamma->data[ch];
                        const float* xr = x->data.data() + static_cast<size_t>(ch) * plane;
                        const float* gr = g.data() + static_cast<size_t>(ch) * plane;
                        for (int i = 0; i < plane; ++i) {
                            const float dxh = gr[i] * gm;
                            sum_dxh += dxh;
                            sum_dxh_xh += static_cast<double>(dxh) * ((xr[i] - mean) * inv);
                        }
                    }
                    const float mean_dxh = static_cast<float>(sum_dxh / static_cast<double>(gsize));
                    const float mean_dxh_xh =
                        static_cast<float>(sum_dxh_xh / static_cast<double>(gsize));
                    for (int cc = 0; cc < cpg; ++cc) {
                        const int ch = grp * cpg + cc;
                        const float gm = gamma->data[ch];
                        const float* xr = x->data.data() + static_cast<size_t>(ch) * plane;
                        const float* gr = g.data() + static_cast<size_t>(ch) * plane;
                        float* pr = pg.data() + static_cast<size_t>(ch) * plane;
                        for (int i = 0; i < plane; ++i) {
                            const float xh = (xr[i] - mean) * inv;
                            pr[i] += inv * (gr[i] * gm - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
            }
            return;
        }
        case OpKind::UpsampleNearest2x: {
            Node* x = n->parents[0].get();
            if (!x->requires_grad) return;
            const int c = x->shape[0], h = x->shape[1], w = x->shape[2];
            auto& pg = grad_buf(x, store);
            for (int ch = 0; ch < c; ++ch) {
                for (int i = 0; i < h; ++i) {
                    for (int j = 0; j < w; ++j) {
                        const float* base = g.data() + ((ch * 2 * h + 2 * i) * 2 * w + 2 * j);
                        pg[(ch * h + i) * w + j] +=
                            base[0] + base[1] + base[2 * w] + base[2 * w + 1];
                    }
                }
            }
            return;
        }
        case OpKind::ConcatChannels: {
            Node* a = n->parents[0].get();
            Node* b = n->parents[1].get();
            const size_t na = a->numel();
            if (a->requires_grad) {
                auto& pg = grad_buf(a, store);
                for (size_t i = 0; i < na; ++i) pg[i] += g[i];
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                for (size_t i = 0; i < b->numel(); ++i) pg[i] += g[na + i];
            }
            return;
        }
        case OpKind::HConcat: {
            Node* a = n->parents[0].get();
            Node* b = n->parents[1].get();
            const int m = n->shape[0];
            const int n1 = a->shape[1], n2 = b->shape[1];
            if (a->requires_grad) {
                auto& pg = grad_buf(a, store);
                for (int r = 0; r < m; ++r)
                    for (int j = 0; j < n1; ++j) pg[r * n1 + j] += g[r * (n1 + n2) + j];
            }
            if (b->requires_grad) {
                auto& pg = grad_buf(b, store);
                for (int r = 0; r < m; ++r)
                    for (int j = 0; j < n2; ++j) pg[r * n2 + j] += g[r * (n1 + n2) + n1 + j];
            }
            return;
        }
        case OpKind::SliceCols: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            const int m = n->shape[0], len = n->i1, cols = a->shape[1], start = n->i0;
            auto& pg = grad_buf(a, store);
            for (int r = 0; r < m; ++r)
                for (int j = 0; j < len; ++j) pg[r * cols + start + j] += g[r * len + j];
            return;
        }
        case OpKind::SumAll: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            auto& pg = grad_buf(a, store);
            const float gv = g[0];
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += gv;
            return;
        }
        case OpKind::MeanAll: {
            Node* a = n->parents[0].get();
            if (!a->requires_grad) return;
            auto& pg = grad_buf(a, store);
            const float gv = g[0] / static_cast<float>(a->numel());
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += gv;
            return;
        }
    }
    throw ContractError("backprop: unhandled op kind");
}

}  // namespace

void backward(const Tensor& scalar_output, GradStore* store) {
    check_defined(scalar_output, "backward");
    Node* root = scalar_output.node().get();
    if (root->numel() != 1) {
        throw ContractError("backward: output must be scalar, got " + shape_str(root->shape));
    }
    if (root->backward_done) {
        throw ContractError("backward: already called on this output; build a fresh graph");
    }
    root->backward_done = true;
    if (!root->requires_grad) return;

    // Iterative DFS postorder over the requires_grad subgraph; reversed
    // postorder processes every consumer before its inputs.
    std::vector<Node*> order;
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_map<Node*, bool> visited;
    stack.emplace_back(root, 0);
    visited[root] = true;
    while (!stack.empty()) {
        auto [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            stack.back().second = idx + 1;
            Node* p = node->parents[idx].get();
            if (p->requires_grad && !visited[p]) {
                visited[p] = true;
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Seed d(out)/d(out) = 1.
    if (store != nullptr && root->op == OpKind::Leaf) {
        auto& g = store->grads[root];
        if (g.empty()) g.assign(1, 0.0f);
        g[0] += 1.0f;
        return;
    }
    if (root->grad.empty()) root->grad.assign(1, 0.0f);
    root->grad[0] += 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->op == OpKind::Leaf) continue;
        if (node->grad.empty()) continue;  // no gradient flowed here
        backprop_node(node, store);
        if (node != root) node->grad.clear();  // interior grads are scratch
    }
}

// ---- Adam ----

AdamState AdamState::init(const std::vector<Tensor>& params, float lr_) {
    AdamState st;
    st.lr = lr_;
    st.first_moment.reserve(params.size());
    st.second_moment.reserve(params.size());
    for (const auto& p : params) {
        st.first_moment.emplace_back(p.numel(), 0.0f);
        st.second_moment.emplace_back(p.numel(), 0.0f);
    }
    return st;
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw ContractError("adam_step: state does not match parameter list");
    }
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1),
                                      static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2),
                                      static_cast<double>(state.step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.has_grad()) {
            throw ContractError("adam_step: parameter " + std::to_string(i) + " has no grad");
        }
        const auto& g = p.grad();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        if (m.size() != g.size() || v.size() != g.size()) {
            throw ContractError("adam_step: moment shape mismatch at parameter " +
                                std::to_string(i));
        }
        auto& w = p.mutable_data();
        for (size_t j = 0; j < g.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0f - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0f - state.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] = static_cast<float>(w[j] - state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
        }
        p.clear_grad();
    }
}

}  // namespace petdiff
