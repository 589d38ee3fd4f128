#pragma once

// Differentiable operators recorded on a Tape.
//
// Matrix products go through gemm_acc, which accumulates every output element
// over k in ascending order. The per-element result therefore does not depend
// on how many rows or columns are computed together, so a layer evaluated in
// channel slices is bit-identical to the same layer evaluated whole.

#include <vipcnn/autograd.hpp>
#include <vipcnn/geometry.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace vipcnn::nn {

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major with explicit leading dimensions.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
              T* C, std::size_t ldc)
{
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        const T* a = A + i * lda;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = a[k];
            if (av == T(0)) continue;
            const T* b = B + k * ldb;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols)
{
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
    return out;
}

struct ConvGeometry {
    std::size_t C, H, W, kh, kw, stride, pad, OH, OW;
};

// cols[(c*kh+i)*kw+j, oy*OW+ox] = x[c, oy*s+i-pad, ox*s+j-pad]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols)
{
    const std::size_t P = g.OH * g.OW;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = cols + ((c * g.kh + i) * g.kw + j) * P;
                for (std::size_t oy = 0; oy < g.OH; ++oy) {
                    const long y = long(oy * g.stride + i) - long(g.pad);
                    T* dst = row + oy * g.OW;
                    if (y < 0 || y >= long(g.H)) {
                        std::fill(dst, dst + g.OW, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.H + std::size_t(y)) * g.W;
                    for (std::size_t ox = 0; ox < g.OW; ++ox) {
                        const long xx = long(ox * g.stride + j) - long(g.pad);
                        dst[ox] = (xx < 0 || xx >= long(g.W)) ? T(0) : src[xx];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx)
{
    const std::size_t P = g.OH * g.OW;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = cols + ((c * g.kh + i) * g.kw + j) * P;
                for (std::size_t oy = 0; oy < g.OH; ++oy) {
                    const long y = long(oy * g.stride + i) - long(g.pad);
                    if (y < 0 || y >= long(g.H)) continue;
                    T* dst = dx + (c * g.H + std::size_t(y)) * g.W;
                    for (std::size_t ox = 0; ox < g.OW; ++ox) {
                        const long xx = long(ox * g.stride + j) - long(g.pad);
                        if (xx >= 0 && xx < long(g.W)) dst[xx] += row[oy * g.OW + ox];
                    }
                }
            }
}

inline void require_rank(const Shape& s, std::size_t r, const char* op, const char* operand)
{
    if (s.size() != r)
        throw DimensionError(std::string(op) + ": " + operand + " must have rank " + std::to_string(r) + ", got " +
                             shape_str(s));
}

} // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b)
{
    Tape<T>& tape = *a.tape;
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.shape() != bv.shape())
        throw DimensionError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<T> out = av;
    out += bv;
    const std::size_t ia = a.id, ib = b.id;
    return tape.push(std::move(out), a.needs_grad() || b.needs_grad(), [ia, ib](Tape<T>& t, std::size_t self) {
        if (t.needs_grad(ia)) t.grad(ia) += t.grad(self);
        if (t.needs_grad(ib)) t.grad(ib) += t.grad(self);
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor)
{
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= factor;
    const std::size_t ia = a.id;
    return a.tape->push(std::move(out), a.needs_grad(), [ia, factor](Tape<T>& t, std::size_t self) {
        auto& g = t.grad(ia);
        const auto& go = t.grad(self);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * go[i];
    });
}

// y[B,out] = x[B,in] W[out,in]^T + b[out]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt)
{
    Tape<T>& tape = *x.tape;
    const auto& xv = x.value();
    const auto& wv = w.value();
    detail::require_rank(xv.shape(), 2, "linear", "input");
    detail::require_rank(wv.shape(), 2, "linear", "weight");
    const std::size_t B = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
    if (wv.dim(1) != in)
        throw DimensionError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                             shape_str(wv.shape()));
    if (b && (b->value().rank() != 1 || b->value().dim(0) != out))
        throw DimensionError("linear: bias " + shape_str(b->value().shape()) + " does not match weight " +
                             shape_str(wv.shape()));
    Tensor<T> y({B, out});
    const auto wt = detail::transpose(wv.data(), out, in);
    detail::gemm_acc(B, out, in, xv.data(), in, wt.data(), out, y.data(), out);
    if (b) {
        const auto& bv = b->value();
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < out; ++j) y[r * out + j] += bv[j];
    }
    const std::size_t ix = x.id, iw = w.id;
    const std::optional<std::size_t> ib = b ? std::optional<std::size_t>(b->id) : std::nullopt;
    const bool ng = x.needs_grad() || w.needs_grad() || (b && b->needs_grad());
    return tape.push(std::move(y), ng, [=](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        if (t.needs_grad(ix)) {
            auto& gx = t.grad(ix);
            detail::gemm_acc(B, in, out, gy.data(), out, t.value(iw).data(), in, gx.data(), in);
        }
        if (t.needs_grad(iw)) {
            const auto gyt = detail::transpose(gy.data(), B, out);
            detail::gemm_acc(out, in, B, gyt.data(), B, t.value(ix).data(), in, t.grad(iw).data(), in);
        }
        if (ib && t.needs_grad(*ib)) {
            auto& gb = t.grad(*ib);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t j = 0; j < out; ++j) gb[j] += gy[r * out + j];
        }
    });
}

// Cross-correlation: x[N,C,H,W], w[O,C,kh,kw], b[O].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt, std::size_t stride = 1,
              std::size_t pad = 0)
{
    Tape<T>& tape = *x.tape;
    const auto& xv = x.value();
    const auto& wv = w.value();
    detail::require_rank(xv.shape(), 4, "conv2d", "input");
    detail::require_rank(wv.shape(), 4, "conv2d", "weight");
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != C)
        throw DimensionError("conv2d: input " + shape_str(xv.shape()) + " incompatible with weight " +
                             shape_str(wv.shape()));
    if (kh > H + 2 * pad || kw > W + 2 * pad)
        throw DimensionError("conv2d: kernel " + shape_str(wv.shape()) + " larger than padded input " +
                             shape_str(xv.shape()));
    if (b && (b->value().rank() != 1 || b->value().dim(0) != O))
        throw DimensionError("conv2d: bias " + shape_str(b->value().shape()) + " does not match weight " +
                             shape_str(wv.shape()));
    const detail::ConvGeometry g{C, H, W, kh, kw, stride, pad, (H + 2 * pad - kh) / stride + 1,
                                 (W + 2 * pad - kw) / stride + 1};
    const std::size_t P = g.OH * g.OW, CKK = C * kh * kw;
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

    Tensor<T> y({N, O, g.OH, g.OW});
    std::vector<T> cols(pointwise ? 0 : CKK * P);
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = xv.data() + n * C * H * W;
        const T* src = xn;
        if (!pointwise) {
            detail::im2col(xn, g, cols.data());
            src = cols.data();
        }
        T* yn = y.data() + n * O * P;
        detail::gemm_acc(O, P, CKK, wv.data(), CKK, src, P, yn, P);
        if (b) {
            const auto& bv = b->value();
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t p = 0; p < P; ++p) yn[o * P + p] += bv[o];
        }
    }

    const std::size_t ix = x.id, iw = w.id;
    const std::optional<std::size_t> ib = b ? std::optional<std::size_t>(b->id) : std::nullopt;
    const bool ng = x.needs_grad() || w.needs_grad() || (b && b->needs_grad());
    return tape.push(std::move(y), ng, [=](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        const auto& xv2 = t.value(ix);
        const auto& wv2 = t.value(iw);
        const bool gx_on = t.needs_grad(ix), gw_on = t.needs_grad(iw);
        std::vector<T> wt;
        if (gx_on) wt = detail::transpose(wv2.data(), O, CKK);
        std::vector<T> buf(CKK * P);
        for (std::size_t n = 0; n < N; ++n) {
            const T* gyn = gy.data() + n * O * P;
            const T* xn = xv2.data() + n * C * H * W;
            if (gw_on) {
                // dW[O,CKK] += gy[O,P] * cols^T[P,CKK]
                std::vector<T> colsT;
                if (pointwise) {
                    colsT = detail::transpose(xn, CKK, P);
                } else {
                    detail::im2col(xn, g, buf.data());
                    colsT = detail::transpose(buf.data(), CKK, P);
                }
                detail::gemm_acc(O, CKK, P, gyn, P, colsT.data(), CKK, t.grad(iw).data(), CKK);
            }
            if (gx_on) {
                T* gxn = t.grad(ix).data() + n * C * H * W;
                if (pointwise) {
                    detail::gemm_acc(CKK, P, O, wt.data(), O, gyn, P, gxn, P);
                } else {
                    std::fill(buf.begin(), buf.end(), T(0));
                    detail::gemm_acc(CKK, P, O, wt.data(), O, gyn, P, buf.data(), P);
                    detail::col2im_add(buf.data(), g, gxn);
                }
            }
        }
        if (ib && t.needs_grad(*ib)) {
            auto& gb = t.grad(*ib);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T* row = gy.data() + (n * O + o) * P;
                    T s = 0;
                    for (std::size_t p = 0; p < P; ++p) s += row[p];
                    gb[o] += s;
                }
        }
    });
}

template <typename T>
Var<T> relu(Var<T> x)
{
    Tensor<T> y = x.value();
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
    const std::size_t ix = x.id;
    return x.tape->push(std::move(y), x.needs_grad(), [ix](Tape<T>& t, std::size_t self) {
        const auto& xv = t.value(ix);
        const auto& gy = t.grad(self);
        auto& gx = t.grad(ix);
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xv[i] > T(0)) gx[i] += gy[i];
    });
}

// Window max over x[N,C,H,W]; backward routes to the first argmax cell.
template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t k, std::size_t stride)
{
    const auto& xv = x.value();
    detail::require_rank(xv.shape(), 4, "max_pool2d", "input");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (k == 0 || stride == 0 || k > H || k > W)
        throw DimensionError("max_pool2d: window " + std::to_string(k) + " exceeds input " + shape_str(xv.shape()));
    const std::size_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
    Tensor<T> y({N, C, OH, OW});
    std::vector<std::size_t> arg(y.size());
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* src = xv.data() + nc * H * W;
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                std::size_t best = (oy * stride) * W + ox * stride;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t idx = (oy * stride + i) * W + ox * stride + j;
                        if (src[idx] > src[best]) best = idx;
                    }
                const std::size_t o = (nc * OH + oy) * OW + ox;
                y[o] = src[best];
                arg[o] = nc * H * W + best;
            }
    }
    const std::size_t ix = x.id;
    return x.tape->push(std::move(y), x.needs_grad(), [ix, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        auto& gx = t.grad(ix);
        for (std::size_t o = 0; o < gy.size(); ++o) gx[arg[o]] += gy[o];
    });
}

struct Roi {
    std::size_t batch = 0;
    Box box; // image coordinates
};

// Integer cell window an ROI covers on a feature map: floor of the scaled
// top-left corner, ceil of the scaled bottom-right corner, clipped to the map.
struct RoiWindow {
    long x1, y1, x2, y2; // half-open [x1, x2) x [y1, y2)
};

inline std::optional<RoiWindow> roi_window(const Box& box, double spatial_scale, std::size_t H, std::size_t W)
{
    RoiWindow r{long(std::floor(box.x1 * spatial_scale)), long(std::floor(box.y1 * spatial_scale)),
                long(std::ceil(box.x2 * spatial_scale)), long(std::ceil(box.y2 * spatial_scale))};
    r.x1 = std::max(r.x1, 0L);
    r.y1 = std::max(r.y1, 0L);
    r.x2 = std::min(r.x2, long(W));
    r.y2 = std::min(r.y2, long(H));
    if (r.x2 <= r.x1 || r.y2 <= r.y1) return std::nullopt;
    return r;
}

// Bin edge: start + round(i * extent / bins), rounding half up.
inline long roi_bin_edge(long start, long extent, std::size_t i, std::size_t bins)
{
    return start + long(std::floor(double(i) * double(extent) / double(bins) + 0.5));
}

// feat[N,C,H,W] -> [R,C,out_h,out_w]; empty bins produce 0 and no gradient.
template <typename T>
Var<T> roi_pool(Var<T> feat, std::span<const Roi> rois, double spatial_scale, std::size_t out_h, std::size_t out_w)
{
    const auto& fv = feat.value();
    detail::require_rank(fv.shape(), 4, "roi_pool", "feature map");
    const std::size_t N = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
    const std::size_t R = rois.size();
    Tensor<T> y({R, C, out_h, out_w});
    constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> arg(y.size(), kNone);
    for (std::size_t r = 0; r < R; ++r) {
        if (rois[r].batch >= N) throw InputError("roi_pool: batch index out of range");
        const auto win = roi_window(rois[r].box, spatial_scale, H, W);
        if (!win) throw InputError("roi_pool: roi lies entirely outside the feature map");
        const long rw = win->x2 - win->x1, rh = win->y2 - win->y1;
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (rois[r].batch * C + c) * H * W;
            for (std::size_t by = 0; by < out_h; ++by) {
                const long ys = roi_bin_edge(win->y1, rh, by, out_h), ye = roi_bin_edge(win->y1, rh, by + 1, out_h);
                for (std::size_t bx = 0; bx < out_w; ++bx) {
                    const long xs = roi_bin_edge(win->x1, rw, bx, out_w),
                               xe = roi_bin_edge(win->x1, rw, bx + 1, out_w);
                    const std::size_t o = ((r * C + c) * out_h + by) * out_w + bx;
                    if (ye <= ys || xe <= xs) continue;
                    std::size_t best = base + std::size_t(ys) * W + std::size_t(xs);
                    for (long yy = ys; yy < ye; ++yy)
                        for (long xx = xs; xx < xe; ++xx) {
                            const std::size_t idx = base + std::size_t(yy) * W + std::size_t(xx);
                            if (fv[idx] > fv[best]) best = idx;
                        }
                    y[o] = fv[best];
                    arg[o] = best;
                }
            }
        }
    }
    const std::size_t ifeat = feat.id;
    return feat.tape->push(std::move(y), feat.needs_grad(), [ifeat, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        auto& gf = t.grad(ifeat);
        for (std::size_t o = 0; o < gy.size(); ++o)
            if (arg[o] != kNone) gf[arg[o]] += gy[o];
    });
}

// Channel range [begin, end) of x[N, C, ...].
template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end)
{
    const auto& xv = x.value();
    if (xv.rank() < 2 || begin >= end || end > xv.dim(1))
        throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for " + shape_str(xv.shape()));
    const std::size_t N = xv.dim(0), C = xv.dim(1), inner = xv.size() / (N * C), w = end - begin;
    Shape s = xv.shape();
    s[1] = w;
    Tensor<T> y(s);
    for (std::size_t n = 0; n < N; ++n)
        std::copy_n(xv.data() + (n * C + begin) * inner, w * inner, y.data() + n * w * inner);
    const std::size_t ix = x.id;
    return x.tape->push(std::move(y), x.needs_grad(), [=](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        auto& gx = t.grad(ix);
        for (std::size_t n = 0; n < N; ++n) {
            T* dst = gx.data() + (n * C + begin) * inner;
            const T* src = gy.data() + n * w * inner;
            for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
        }
    });
}

// Concatenate along axis 1; all other extents must agree.
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts)
{
    if (parts.empty()) throw DimensionError("concat_channels: no inputs");
    const Shape& s0 = parts[0].shape();
    std::size_t C = 0;
    bool ng = false;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != s0.size() || s.size() < 2) throw DimensionError("concat_channels: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != 1 && s[d] != s0[d])
                throw DimensionError("concat_channels: " + shape_str(s) + " vs " + shape_str(s0));
        C += s[1];
        ng = ng || p.needs_grad();
    }
    const std::size_t N = s0[0], inner = shape_size(s0) / (s0[0] * s0[1]);
    Shape s = s0;
    s[1] = C;
    Tensor<T> y(s);
    std::vector<std::size_t> ids, widths;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const auto& pv = p.value();
        const std::size_t w = pv.dim(1);
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(pv.data() + n * w * inner, w * inner, y.data() + (n * C + off) * inner);
        off += w;
        ids.push_back(p.id);
        widths.push_back(w);
    }
    return parts[0].tape->push(std::move(y), ng, [=](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t w = widths[k];
            if (t.needs_grad(ids[k])) {
                auto& gx = t.grad(ids[k]);
                for (std::size_t n = 0; n < N; ++n) {
                    const T* src = gy.data() + (n * C + o) * inner;
                    T* dst = gx.data() + n * w * inner;
                    for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
                }
            }
            o += w;
        }
    });
}

template <typename T>
Var<T> concat_channels(std::initializer_list<Var<T>> parts)
{
    std::vector<Var<T>> v(parts);
    return concat_channels<T>(std::span<const Var<T>>(v));
}

// [N, ...] -> [N, prod(...)]
template <typename T>
Var<T> flatten(Var<T> x)
{
    const auto& xv = x.value();
    const std::size_t N = xv.dim(0);
    Tensor<T> y = xv.reshaped({N, xv.size() / N});
    const std::size_t ix = x.id;
    return x.tape->push(std::move(y), x.needs_grad(), [ix](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        auto& gx = t.grad(ix);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
}

// Flat-index gather: y.flat[i] = x.flat[idx[i]], reshaped to `shape`.
template <typename T>
Var<T> gather(Var<T> x, std::vector<std::size_t> idx, Shape shape)
{
    const auto& xv = x.value();
    if (shape_size(shape) != idx.size()) throw DimensionError("gather: index count does not match output shape");
    Tensor<T> y(std::move(shape));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= xv.size()) throw DimensionError("gather: index out of range");
        y[i] = xv[idx[i]];
    }
    const std::size_t ix = x.id;
    return x.tape->push(std::move(y), x.needs_grad(), [ix, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad(self);
        auto& gx = t.grad(ix);
        for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += gy[i];
    });
}

// Row-wise softmax of [B,K] logits, computed in double with max subtraction.
template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits)
{
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    std::vector<double> p(B * K);
    for (std::size_t r = 0; r < B; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) m = std::max(m, double(logits[r * K + k]));
        double z = 0;
        for (std::size_t k = 0; k < K; ++k) z += (p[r * K + k] = std::exp(double(logits[r * K + k]) - m));
        for (std::size_t k = 0; k < K; ++k) p[r * K + k] /= z;
    }
    return p;
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::size_t> labels)
{
    const auto& lv = logits.value();
    detail::require_rank(lv.shape(), 2, "softmax_cross_entropy", "logits");
    const std::size_t B = lv.dim(0), K = lv.dim(1);
    if (labels.size() != B) throw DimensionError("softmax_cross_entropy: label count differs from batch");
    for (auto l : labels)
        if (l >= K) throw InputError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
    if (B == 0) return logits.tape->constant(Tensor<T>({1}));
    double loss = 0;
    std::vector<double> probs(B * K);
    for (std::size_t r = 0; r < B; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) m = std::max(m, double(lv[r * K + k]));
        double z = 0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(double(lv[r * K + k]) - m);
        const double logz = m + std::log(z);
        loss += logz - double(lv[r * K + labels[r]]);
        for (std::size_t k = 0; k < K; ++k) probs[r * K + k] = std::exp(double(lv[r * K + k]) - logz);
    }
    Tensor<T> y({1}, T(loss / double(B)));
    const std::size_t il = logits.id;
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return logits.tape->push(std::move(y), logits.needs_grad(),
                             [=, probs = std::move(probs), lab = std::move(lab)](Tape<T>& t, std::size_t self) {
                                 const double g = double(t.grad(self)[0]) / double(B);
                                 auto& gl = t.grad(il);
                                 for (std::size_t r = 0; r < B; ++r)
                                     for (std::size_t k = 0; k < K; ++k) {
                                         const double d = probs[r * K + k] - (k == lab[r] ? 1.0 : 0.0);
                                         gl[r * K + k] += T(g * d);
                                     }
                             });
}

// Masked smooth-L1 (transition at |d| = 1), normalised by the number of
// unmasked elements; an all-masked input yields exactly 0.
template <typename T>
Var<T> smooth_l1(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask)
{
    const auto& pv = pred.value();
    if (pv.shape() != target.shape() || pv.shape() != mask.shape())
        throw DimensionError("smooth_l1: pred " + shape_str(pv.shape()) + ", target " + shape_str(target.shape()) +
                             ", mask " + shape_str(mask.shape()) + " disagree");
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (mask[i] == T(0)) continue;
        ++count;
        const double d = double(pv[i]) - double(target[i]);
        const double a = std::abs(d);
        sum += a < 1.0 ? 0.5 * d * d : a - 0.5;
    }
    const double norm = count ? 1.0 / double(count) : 0.0;
    Tensor<T> y({1}, T(sum * norm));
    const std::size_t ip = pred.id;
    return pred.tape->push(std::move(y), pred.needs_grad() && count > 0,
                           [=, target = target, mask = mask](Tape<T>& t, std::size_t self) {
                               const double g = double(t.grad(self)[0]) * norm;
                               const auto& pv2 = t.value(ip);
                               auto& gp = t.grad(ip);
                               for (std::size_t i = 0; i < gp.size(); ++i) {
                                   if (mask[i] == T(0)) continue;
                                   const double d = double(pv2[i]) - double(target[i]);
                                   gp[i] += T(g * std::clamp(d, -1.0, 1.0));
                               }
                           });
}

} // namespace vipcnn::nn
