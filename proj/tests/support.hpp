#pragma once

// Reference implementations used as oracles by the unit tests and the
// acceptance runner. They are written independently of the library code
// they check and favour obviousness over speed.

#include <vipcnn/evaluation.hpp>
#include <vipcnn/gradcheck.hpp>
#include <vipcnn/model.hpp>
#include <vipcnn/pmps.hpp>
#include <vipcnn/training.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace support {

using vipcnn::Box;
using vipcnn::Rng;
using vipcnn::Triplet;

inline Box random_box(Rng& rng, double extent = 50)
{
    const double x = rng.uniform(0, extent), y = rng.uniform(0, extent);
    return {x, y, x + rng.uniform(0.5, extent / 2), y + rng.uniform(0.5, extent / 2)};
}

inline double ref_iou(const Box& a, const Box& b)
{
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

inline Box ref_union(const Box& a, const Box& b)
{
    return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
}

// O(n^2) greedy suppression: selection-sort by (score desc, index asc), then
// keep a candidate iff no kept one overlaps it by more than thr.
inline std::vector<std::size_t> brute_greedy(std::size_t n, const std::vector<double>& scores, double thr,
                                             const std::function<double(std::size_t, std::size_t)>& overlap)
{
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b)
            if (scores[idx[b]] > scores[idx[a]] || (scores[idx[b]] == scores[idx[a]] && idx[b] < idx[a]))
                std::swap(idx[a], idx[b]);
    std::vector<std::size_t> keep;
    for (auto i : idx) {
        bool ok = true;
        for (auto k : keep)
            if (overlap(k, i) > thr) {
                ok = false;
                break;
            }
        if (ok) keep.push_back(i);
    }
    return keep;
}

inline std::vector<std::size_t> brute_triplet_nms(const std::vector<Triplet>& ts, const std::vector<double>& scores,
                                                  double thr)
{
    return brute_greedy(ts.size(), scores, thr, [&](std::size_t i, std::size_t j) {
        return ref_iou(ts[i].subject, ts[j].subject) * ref_iou(ts[i].object, ts[j].object);
    });
}

// Random triplet NMS instance of at most max_n triplets; boxes are drawn
// from a small pool so overlaps (and exact duplicates) are common.
struct NmsInstance {
    std::vector<Triplet> triplets;
    std::vector<double> scores;
    double threshold = 0.25;
};

inline NmsInstance random_nms_instance(Rng& rng, std::size_t max_n)
{
    NmsInstance in;
    std::vector<Box> pool;
    const std::size_t pool_size = 2 + rng.below(14);
    for (std::size_t i = 0; i < pool_size; ++i) pool.push_back(random_box(rng, 30));
    const std::size_t n = rng.below(max_n + 1);
    for (std::size_t i = 0; i < n; ++i) {
        const Box s = rng.below(4) ? pool[rng.below(pool.size())] : random_box(rng, 30);
        const Box o = rng.below(4) ? pool[rng.below(pool.size())] : random_box(rng, 30);
        in.triplets.push_back(Triplet::make(s, o, rng.uniform(), rng.uniform()));
        // coarse scores force ties
        in.scores.push_back(rng.below(2) ? double(rng.below(5)) / 4 : vipcnn::triplet_score(in.triplets.back()));
    }
    const double choices[] = {0.0, 0.1, 0.25, 0.5, 0.7, 1.0};
    in.threshold = rng.below(3) ? choices[rng.below(6)] : rng.uniform();
    return in;
}

// ---------------------------------------------------------------------------
// Labeling

using vipcnn::eval::GtRelationship;

struct RefLabels {
    std::array<std::size_t, 3> u{0, 0, 0};
    std::array<std::optional<std::size_t>, 3> matched; // gt index per branch
};

inline Box ref_branch_box(const Triplet& t, int b)
{
    return b == 0 ? t.subject : b == 1 ? ref_union(t.subject, t.object) : t.object;
}

inline Box ref_gt_box(const GtRelationship& g, int b)
{
    return b == 0 ? g.subject : b == 1 ? ref_union(g.subject, g.object) : g.object;
}

inline std::size_t ref_gt_label(const GtRelationship& g, int b) { return b == 0 ? g.s : b == 1 ? g.p : g.o; }

// Per-branch: the first gt reaching the maximal IoU, foreground iff that IoU
// is at least thr.
inline RefLabels ref_stage1(const Triplet& t, const std::vector<GtRelationship>& gt, double thr)
{
    RefLabels r;
    for (int b = 0; b < 3; ++b) {
        double mx = -1;
        for (const auto& g : gt) mx = std::max(mx, ref_iou(ref_branch_box(t, b), ref_gt_box(g, b)));
        if (mx < thr) continue;
        for (std::size_t k = 0; k < gt.size(); ++k)
            if (ref_iou(ref_branch_box(t, b), ref_gt_box(gt[k], b)) == mx) {
                r.u[b] = ref_gt_label(gt[k], b);
                r.matched[b] = k;
                break;
            }
    }
    return r;
}

// Exhaustive per-relationship matcher: a relationship qualifies when all
// three overlaps are at least thr; among qualifiers the largest minimum
// overlap wins, first index on ties. Non-qualifying triplets are background
// on all three branches.
inline RefLabels ref_stage2(const Triplet& t, const std::vector<GtRelationship>& gt, double thr)
{
    RefLabels r;
    std::vector<std::pair<double, std::size_t>> qualifying;
    for (std::size_t k = 0; k < gt.size(); ++k) {
        const double a = ref_iou(t.subject, gt[k].subject);
        const double b = ref_iou(ref_union(t.subject, t.object), ref_union(gt[k].subject, gt[k].object));
        const double c = ref_iou(t.object, gt[k].object);
        if (a >= thr && b >= thr && c >= thr) qualifying.push_back({std::min({a, b, c}), k});
    }
    if (qualifying.empty()) return r;
    auto best = qualifying.front();
    for (const auto& q : qualifying)
        if (q.first > best.first) best = q;
    for (int b = 0; b < 3; ++b) {
        r.u[b] = ref_gt_label(gt[best.second], b);
        r.matched[b] = best.second;
    }
    return r;
}

// Random labeling configuration: gt relationships over a few object boxes and
// a triplet that is either jittered from a gt pair or random.
struct LabelCase {
    Triplet triplet;
    std::vector<GtRelationship> gt;
};

inline LabelCase random_label_case(Rng& rng)
{
    LabelCase c;
    std::vector<Box> objects;
    const std::size_t n_obj = 1 + rng.below(4);
    for (std::size_t i = 0; i < n_obj; ++i) objects.push_back(random_box(rng, 40));
    const std::size_t n_rel = 1 + rng.below(5);
    for (std::size_t i = 0; i < n_rel; ++i) {
        const auto& s = objects[rng.below(n_obj)];
        const auto& o = objects[rng.below(n_obj)];
        c.gt.push_back({1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), s, o});
    }
    auto jitter = [&](const Box& b) {
        const double w = b.x2 - b.x1, h = b.y2 - b.y1;
        const double k = rng.below(3) == 0 ? 0.0 : 0.25;
        return Box{b.x1 + rng.normal(0, k) * w, b.y1 + rng.normal(0, k) * h, b.x2 + rng.normal(0, k) * w,
                   b.y2 + rng.normal(0, k) * h};
    };
    for (;;) {
        Box s, o;
        if (rng.below(4)) {
            const auto& g = c.gt[rng.below(c.gt.size())];
            s = jitter(g.subject);
            o = jitter(g.object);
        } else {
            s = random_box(rng, 40);
            o = random_box(rng, 40);
        }
        if (s.valid() && o.valid()) {
            c.triplet = Triplet::make(s, o);
            return c;
        }
    }
}

// ---------------------------------------------------------------------------
// Recall

// Maximum one-to-one assignment between the top-n detections and gt with
// equal labels and overlap >= thr, by exhaustive search.
inline std::size_t brute_max_matching(const std::vector<vipcnn::eval::RelDetection>& dets,
                                      const std::vector<GtRelationship>& gt, bool relationship, double thr)
{
    auto ok = [&](std::size_t d, std::size_t g) {
        const auto& a = dets[d];
        const auto& b = gt[g];
        if (a.s != b.s || a.p != b.p || a.o != b.o) return false;
        const double ov = relationship ? std::min(ref_iou(a.subject, b.subject), ref_iou(a.object, b.object))
                                       : ref_iou(a.phrase, ref_union(b.subject, b.object));
        return ov >= thr;
    };
    std::vector<bool> used(dets.size(), false);
    std::function<std::size_t(std::size_t)> go = [&](std::size_t g) -> std::size_t {
        if (g == gt.size()) return 0;
        std::size_t best = go(g + 1);
        for (std::size_t d = 0; d < dets.size(); ++d)
            if (!used[d] && ok(d, g)) {
                used[d] = true;
                best = std::max(best, 1 + go(g + 1));
                used[d] = false;
            }
        return best;
    };
    return go(0);
}

// Top-n by score (stable) then exhaustive matching, summed over images.
inline double brute_recall(const std::vector<vipcnn::eval::ImageResult>& images, std::size_t n, bool relationship,
                           double thr = 0.5)
{
    std::size_t hit = 0, total = 0;
    for (const auto& im : images) {
        auto dets = im.detections;
        std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
        if (dets.size() > n) dets.resize(n);
        hit += brute_max_matching(dets, im.gt, relationship, thr);
        total += im.gt.size();
    }
    return double(hit) / double(total);
}

// Three hand-built images with duplicates, wrong labels, near misses that
// only pass the phrase test, and two same-label ground truths competing for
// detections. Expected recalls were worked out by hand.
struct HandCorpus {
    std::vector<vipcnn::eval::ImageResult> images;
    // (n, phrase recall, relationship recall)
    std::vector<std::tuple<std::size_t, double, double>> expected;
};

inline HandCorpus hand_corpus()
{
    using vipcnn::eval::RelDetection;
    auto det = [](std::size_t s, std::size_t p, std::size_t o, Box sb, Box ob, double score) {
        return RelDetection{s, p, o, ref_union(sb, ob), sb, ob, score};
    };
    HandCorpus c;
    c.images.push_back({"a",
                        {det(1, 1, 2, {0, 0, 10, 10}, {20, 0, 30, 10}, 0.9),
                         det(1, 1, 2, {0, 0, 10, 10}, {20, 0, 30, 10}, 0.8),
                         det(2, 2, 3, {0, 20, 10, 30}, {24, 20, 34, 30}, 0.7),
                         det(2, 1, 3, {0, 20, 10, 30}, {20, 20, 30, 30}, 0.95)},
                        {{1, 1, 2, {0, 0, 10, 10}, {20, 0, 30, 10}}, {2, 2, 3, {0, 20, 10, 30}, {20, 20, 30, 30}}}});
    c.images.push_back({"b",
                        {det(3, 2, 1, {10, 5, 20, 15}, {10, 10, 40, 40}, 0.6),
                         det(3, 2, 1, {5, 5, 15, 15}, {10, 10, 40, 40}, 0.3)},
                        {{3, 2, 1, {5, 5, 15, 15}, {10, 10, 40, 40}}}});
    c.images.push_back({"c",
                        {det(1, 2, 1, {0, 0, 8, 8}, {8, 1, 16, 9}, 0.5), det(1, 2, 1, {0, 0, 8, 8}, {8, 0, 16, 8}, 0.4)},
                        {{1, 2, 1, {0, 0, 8, 8}, {8, 0, 16, 8}}, {1, 2, 1, {0, 0, 8, 8}, {8, 1, 16, 9}}}});
    c.expected = {{1, 0.4, 0.2}, {2, 0.8, 0.8}, {4, 1.0, 0.8}, {50, 1.0, 0.8}, {100, 1.0, 0.8}};
    return c;
}

// ---------------------------------------------------------------------------
// Gradient suite

using vipcnn::nn::Parameter;
using vipcnn::nn::ParameterStore;
using vipcnn::nn::Tape;
using vipcnn::nn::Tensor;
using vipcnn::nn::Var;

// Scalar sum(v * w) for a fixed weight tensor; gives every output element a
// distinct, nonzero downstream gradient.
inline Var<double> weighted_sum(Var<double> v, const Tensor<double>& w)
{
    double s = 0;
    for (std::size_t i = 0; i < v.value().size(); ++i) s += v.value()[i] * w[i];
    const std::size_t iv = v.id;
    return v.tape->push(Tensor<double>({1}, s), v.needs_grad(), [iv, w](Tape<double>& t, std::size_t self) {
        const double g = t.grad(self)[0];
        auto& gv = t.grad(iv);
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g * w[i];
    });
}

inline Tensor<double> random_tensor(Rng& rng, vipcnn::nn::Shape shape, double scale = 1.0)
{
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = rng.normal(0, scale);
    return t;
}

// Values spread on a grid with small noise so that max and ReLU decisions
// sit far from ties and kinks relative to the finite-difference step.
inline Tensor<double> spread_tensor(Rng& rng, vipcnn::nn::Shape shape)
{
    Tensor<double> t(std::move(shape));
    std::vector<double> vals(t.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (double(i) - double(vals.size()) / 2 + 0.5) * 0.05;
    rng.shuffle(vals.begin(), vals.end());
    for (std::size_t i = 0; i < vals.size(); ++i) t[i] = vals[i] + rng.uniform(-0.01, 0.01);
    return t;
}

struct GradCase {
    std::string name;
    double max_rel_error = 0;
    std::size_t checked = 0;
};

struct PmpsFixture {
    ParameterStore<double> store;
    vipcnn::pmps::PmpsLayerParams<double> first, second;
};

// Main and message parameters of one or two PMPS layers of the given kind.
// Subject/object main parameters are shared objects when tied.
inline void make_pmps_layer(ParameterStore<double>& store, Rng& rng, const std::string& prefix,
                            vipcnn::pmps::LayerKind kind, std::size_t in, std::size_t out, std::size_t g,
                            std::size_t b, bool tied, vipcnn::pmps::PmpsLayerParams<double>& L, bool parallel)
{
    using vipcnn::pmps::LayerKind;
    const std::size_t k = kind == LayerKind::conv ? 3 : 1;
    auto wshape = [&](std::size_t o, std::size_t i, std::size_t kk) {
        return kind == LayerKind::conv ? vipcnn::nn::Shape{o, i, kk, kk} : vipcnn::nn::Shape{o, i};
    };
    const double ws = 0.6 / std::sqrt(double(in * k * k));
    auto main = [&](const std::string& br) {
        vipcnn::pmps::MainParams<double> m;
        m.w = &store.create(prefix + br + ".w", random_tensor(rng, wshape(out, in, k), ws));
        m.b = &store.create(prefix + br + ".b", random_tensor(rng, {out}, 0.1));
        return m;
    };
    L.kind = kind;
    L.pad = kind == LayerKind::conv ? 1 : 0;
    L.s = main("s");
    L.p = main("p");
    L.o = tied ? L.s : main("o");
    const std::size_t gw = parallel ? g : out, bw = parallel ? b : out;
    const double ms = 0.5 / std::sqrt(double(gw));
    L.p_from_s = &store.create(prefix + "p_from_s", random_tensor(rng, wshape(gw, gw, 1), ms));
    L.p_from_o = &store.create(prefix + "p_from_o", random_tensor(rng, wshape(gw, gw, 1), ms));
    L.s_from_p = &store.create(prefix + "s_from_p", random_tensor(rng, wshape(bw, bw, 1), ms));
    L.o_from_p = &store.create(prefix + "o_from_p", random_tensor(rng, wshape(bw, bw, 1), ms));
}

inline GradCase check_case(const std::string& name, const std::function<Var<double>(Tape<double>&)>& build,
                           std::vector<Parameter<double>*> params, vipcnn::nn::GradCheckOptions opt = {})
{
    const auto r = vipcnn::nn::grad_check(build, std::span<Parameter<double>* const>(params), opt);
    return {name + (r.worst.empty() ? "" : " (worst " + r.worst + ")"), r.max_rel_error, r.checked};
}

inline std::vector<Parameter<double>*> unique_params(ParameterStore<double>& store) { return store.all(); }

// Every differentiable layer, both losses, and every PMPS form with and
// without subject/object tying, checked by central differences in double.
inline std::vector<GradCase> gradient_suite(std::uint64_t seed = 1)
{
    using namespace vipcnn;
    using namespace vipcnn::nn;
    using pmps::LayerKind;
    std::vector<GradCase> out;
    Rng rng(seed);

    {
        ParameterStore<double> st;
        auto& x = st.create("x", random_tensor(rng, {3, 5}));
        auto& w = st.create("w", random_tensor(rng, {4, 5}));
        auto& b = st.create("b", random_tensor(rng, {4}));
        const auto wo = random_tensor(rng, {3, 4});
        out.push_back(check_case("fc", [&](Tape<double>& t) {
            return weighted_sum(linear(t.param(x), t.param(w), t.param(b)), wo);
        }, st.all()));
    }
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {1, 0}}) {
        ParameterStore<double> st;
        auto& x = st.create("x", random_tensor(rng, {2, 3, 6, 5}));
        auto& w = st.create("w", random_tensor(rng, {4, 3, 3, 3}, 0.3));
        auto& b = st.create("b", random_tensor(rng, {4}));
        const std::size_t oh = (6 + 2 * pad - 3) / stride + 1, ow = (5 + 2 * pad - 3) / stride + 1;
        const auto wo = random_tensor(rng, {2, 4, oh, ow});
        out.push_back(check_case("conv stride " + std::to_string(stride) + " pad " + std::to_string(pad),
                                 [&](Tape<double>& t) {
                                     return weighted_sum(conv2d(t.param(x), t.param(w), t.param(b), stride, pad), wo);
                                 },
                                 st.all()));
    }
    {
        ParameterStore<double> st;
        auto& x = st.create("x", random_tensor(rng, {2, 4, 3, 3}));
        auto& w = st.create("w", random_tensor(rng, {5, 4, 1, 1}));
        const auto wo = random_tensor(rng, {2, 5, 3, 3});
        out.push_back(check_case("conv 1x1", [&](Tape<double>& t) {
            return weighted_sum(conv2d(t.param(x), t.param(w)), wo);
        }, st.all()));
    }
    {
        ParameterStore<double> st;
        auto& x = st.create("x", spread_tensor(rng, {4, 7}));
        const auto wo = random_tensor(rng, {4, 7});
        out.push_back(check_case("relu", [&](Tape<double>& t) { return weighted_sum(relu(t.param(x)), wo); },
                                 st.all()));
    }
    {
        ParameterStore<double> st;
        auto& x = st.create("x", spread_tensor(rng, {2, 3, 6, 6}));
        const auto wo2 = random_tensor(rng, {2, 3, 3, 3});
        out.push_back(check_case("max pool 2x2", [&](Tape<double>& t) {
            return weighted_sum(max_pool2d(t.param(x), 2, 2), wo2);
        }, st.all()));
        const auto wo3 = random_tensor(rng, {2, 3, 4, 4});
        out.push_back(check_case("max pool 3x3 stride 1", [&](Tape<double>& t) {
            return weighted_sum(max_pool2d(t.param(x), 3, 1), wo3);
        }, st.all()));
    }
    {
        ParameterStore<double> st;
        auto& x = st.create("x", spread_tensor(rng, {2, 3, 8, 8}));
        const std::vector<Roi> rois{{0, {0, 0, 32, 32}}, {1, {4.5, 6, 20, 13}}, {0, {10, 10, 40, 50}},
                                    {1, {28, 0, 31, 31}}, {0, {-6, -6, 7, 9}}};
        const auto wo = random_tensor(rng, {rois.size(), 3, 3, 3});
        out.push_back(check_case("roi pool", [&](Tape<double>& t) {
            return weighted_sum(roi_pool(t.param(x), std::span<const Roi>(rois), 0.25, 3, 3), wo);
        }, st.all()));
    }
    {
        ParameterStore<double> st;
        auto& x = st.create("x", random_tensor(rng, {2, 6, 2, 2}));
        auto& y = st.create("y", random_tensor(rng, {2, 2, 2, 2}));
        const auto wo = random_tensor(rng, {2, 5, 2, 2});
        out.push_back(check_case("slice and concat", [&](Tape<double>& t) {
            auto a = slice_channels(t.param(x), 1, 4);
            return weighted_sum(concat_channels<double>({a, t.param(y)}), wo);
        }, st.all()));
        const auto wf = random_tensor(rng, {2, 24});
        out.push_back(check_case("flatten and scale", [&](Tape<double>& t) {
            return weighted_sum(flatten(scale(t.param(x), 0.7)), wf);
        }, st.all()));
        const auto wg = random_tensor(rng, {3, 2});
        out.push_back(check_case("gather", [&](Tape<double>& t) {
            return weighted_sum(gather(t.param(x), {0, 5, 5, 17, 23, 2}, {3, 2}), wg);
        }, st.all()));
    }
    {
        ParameterStore<double> st;
        auto& z = st.create("logits", random_tensor(rng, {5, 4}, 2.0));
        const std::vector<std::size_t> labels{0, 3, 1, 1, 2};
        out.push_back(check_case("softmax cross-entropy", [&](Tape<double>& t) {
            return softmax_cross_entropy(t.param(z), std::span<const std::size_t>(labels));
        }, st.all()));
    }
    {
        ParameterStore<double> st;
        auto& p = st.create("pred", random_tensor(rng, {4, 6}));
        Tensor<double> target({4, 6}), mask({4, 6});
        for (std::size_t i = 0; i < 24; ++i) {
            // residuals kept clear of the |d| = 1 transition
            const double d = (rng.below(2) ? 1 : -1) * (rng.below(2) ? rng.uniform(0.05, 0.9) : rng.uniform(1.1, 3.0));
            target[i] = p.value[i] - d;
            mask[i] = rng.below(4) ? 1.0 : 0.0;
        }
        out.push_back(check_case("smooth l1", [&](Tape<double>& t) {
            return smooth_l1(t.param(p), target, mask);
        }, st.all()));
    }
    {
        // multi-task loss over three branches with mixed fg/bg labels
        ParameterStore<double> st;
        std::array<Parameter<double>*, 3> cls, reg;
        const std::size_t n = 5;
        for (int b = 0; b < 3; ++b) {
            const std::size_t k = b == 1 ? 4 : 3;
            cls[b] = &st.create("cls" + std::to_string(b), random_tensor(rng, {n, k}));
            reg[b] = &st.create("reg" + std::to_string(b), random_tensor(rng, {n, 4 * (k - 1)}, 0.2));
        }
        std::vector<train::LabeledTriplet> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i].triplet = Triplet::make({0, 0, 4, 4}, {2, 2, 6, 6});
            for (int b = 0; b < 3; ++b) {
                const std::size_t k = b == 1 ? 4 : 3;
                labels[i].u[b] = i % 2 == 0 ? 0 : 1 + (i + std::size_t(b)) % (k - 1);
                if (labels[i].u[b]) labels[i].v[b] = BoxOffsets{0.9 * double(i) - 2, 0.1, -0.2, 0.15};
            }
        }
        train::LossConfig lc;
        out.push_back(check_case("multi-task loss", [&](Tape<double>& t) {
            std::array<Var<double>, 3> c{t.param(*cls[0]), t.param(*cls[1]), t.param(*cls[2])};
            std::array<Var<double>, 3> r{t.param(*reg[0]), t.param(*reg[1]), t.param(*reg[2])};
            return train::multi_task_loss(c, r, std::span<const train::LabeledTriplet>(labels), lc).total;
        }, st.all()));
    }

    {
        ParameterStore<double> st;
        auto& x = st.create("projected", random_tensor(rng, {4, 3}));
        train::EmbeddingTable table;
        table.add("red circle", {0.5, -1.0, 2.0});
        table.add("above", {-0.3, 0.2, 0.9});
        const std::vector<std::string> labels{"red circle", "above", train::kBackgroundLabel, "above"};
        for (std::size_t i = 0; i < 4; ++i) {
            // residuals kept clear of the smooth-L1 transition
            const auto v = table.at(labels[i]);
            for (std::size_t j = 0; j < 3; ++j)
                x.value.at(i, j) = v[j] + (rng.below(2) ? 1 : -1) * (rng.below(2) ? rng.uniform(0.05, 0.9) : rng.uniform(1.1, 2.5));
        }
        out.push_back(check_case("word-vector loss", [&](Tape<double>& t) {
            return train::word_vector_loss(t.param(x), table, std::span<const std::string>(labels));
        }, st.all()));
    }

    // PMPS forms
    for (auto kind : {LayerKind::fc, LayerKind::conv}) {
        const std::string kname = kind == LayerKind::fc ? "fc" : "conv";
        auto input = [&](std::size_t c) {
            return kind == LayerKind::fc ? spread_tensor(rng, {3, c}) : spread_tensor(rng, {2, c, 4, 4});
        };
        for (bool tied : {false, true}) {
            const std::string tname = tied ? " tied" : " untied";
            {
                ParameterStore<double> st;
                pmps::PmpsLayerParams<double> L;
                make_pmps_layer(st, rng, "g.", kind, 3, 4, 4, 4, tied, L, false);
                auto& xs = st.create("xs", input(3));
                auto& xp = st.create("xp", input(3));
                auto& xo = st.create("xo", input(3));
                const Tensor<double> wo = random_tensor(rng, kind == LayerKind::fc ? Shape{3, 4} : Shape{2, 4, 4, 4});
                out.push_back(check_case("pmps gather " + kname + tname, [&](Tape<double>& t) {
                    auto s = pmps::plain_layer(kind, t.param(xs), L.s, L.pad);
                    auto o = pmps::plain_layer(kind, t.param(xo), L.o, L.pad);
                    auto p = pmps::gather_layer(kind, t.param(xp), s, o, L.p, *L.p_from_s, *L.p_from_o, L.pad);
                    return weighted_sum(p, wo);
                }, st.all()));
            }
            {
                ParameterStore<double> st;
                pmps::PmpsLayerParams<double> L;
                make_pmps_layer(st, rng, "b.", kind, 3, 4, 4, 4, tied, L, false);
                auto& xs = st.create("xs", input(3));
                auto& xo = st.create("xo", input(3));
                auto& pn = st.create("p_next", input(4));
                const Tensor<double> w1 = random_tensor(rng, kind == LayerKind::fc ? Shape{3, 4} : Shape{2, 4, 4, 4});
                const Tensor<double> w2 = random_tensor(rng, kind == LayerKind::fc ? Shape{3, 4} : Shape{2, 4, 4, 4});
                out.push_back(check_case("pmps broadcast " + kname + tname, [&](Tape<double>& t) {
                    auto [s, o] = pmps::broadcast_layer(kind, t.param(xs), t.param(xo), t.param(pn), L.s, L.o,
                                                        *L.s_from_p, *L.o_from_p, L.pad);
                    return add(weighted_sum(s, w1), weighted_sum(o, w2));
                }, st.all()));
            }
            {
                ParameterStore<double> st;
                pmps::PmpsLayerParams<double> L1, L2;
                make_pmps_layer(st, rng, "l1.", kind, 3, 4, 4, 4, tied, L1, false);
                make_pmps_layer(st, rng, "l2.", kind, 4, 4, 4, 4, tied, L2, false);
                auto& xs = st.create("xs", input(3));
                auto& xp = st.create("xp", input(3));
                auto& xo = st.create("xo", input(3));
                const Tensor<double> ws = random_tensor(rng, kind == LayerKind::fc ? Shape{3, 4} : Shape{2, 4, 4, 4});
                const Tensor<double> wp = random_tensor(rng, ws.shape());
                const Tensor<double> wo = random_tensor(rng, ws.shape());
                out.push_back(check_case("pmps sequential " + kname + tname, [&](Tape<double>& t) {
                    auto y = pmps::sequential_pmps<double>({t.param(xs), t.param(xp), t.param(xo)}, L1, L2);
                    return add(add(weighted_sum(y.s, ws), weighted_sum(y.p, wp)), weighted_sum(y.o, wo));
                }, st.all()));
            }
            {
                ParameterStore<double> st;
                pmps::PmpsLayerParams<double> L;
                make_pmps_layer(st, rng, "par.", kind, 3, 6, 2, 4, tied, L, true);
                auto& xs = st.create("xs", input(3));
                auto& xp = st.create("xp", input(3));
                auto& xo = st.create("xo", input(3));
                const Tensor<double> ws = random_tensor(rng, kind == LayerKind::fc ? Shape{3, 6} : Shape{2, 6, 4, 4});
                const Tensor<double> wp = random_tensor(rng, ws.shape());
                const Tensor<double> wo = random_tensor(rng, ws.shape());
                out.push_back(check_case("pmps parallel " + kname + tname, [&](Tape<double>& t) {
                    auto y = pmps::parallel_pmps<double>({t.param(xs), t.param(xp), t.param(xo)}, L, 2, 4);
                    return add(add(weighted_sum(y.s, ws), weighted_sum(y.p, wp)), weighted_sum(y.o, wo));
                }, st.all()));
            }
        }
    }

    // whole detector, sampled coordinates
    for (bool tied : {false, true}) {
        ModelConfig mc;
        mc.trunk_channels = {3, 4};
        mc.trunk_pools = 1;
        mc.branch_channels = {4};
        mc.fc_widths = {6, 6};
        mc.roi_size = 2;
        mc.image_min_side = 16;
        mc.object_classes = 2;
        mc.predicate_classes = 2;
        mc.tie_subject_object = tied;
        VipModel<double> model(mc, seed + 5);
        // give the zero-initialised messages and small heads a real signal
        for (auto* p : model.params().all())
            if (p->name.rfind("pmps.", 0) == 0 || p->name.find(".reg.") != std::string::npos ||
                p->name.find(".cls.") != std::string::npos)
                for (auto& v : p->value.values()) v = rng.normal(0, 0.3);
        Tensor<double> image = random_tensor(rng, {1, 3, 16, 16});
        const std::vector<Triplet> ts{Triplet::make({1, 1, 9, 8}, {6, 5, 15, 15}), Triplet::make({0, 2, 7, 14}, {3, 0, 12, 6})};
        std::vector<train::LabeledTriplet> labels(2);
        labels[0].triplet = ts[0];
        labels[0].u = {1, 2, 2};
        for (int b = 0; b < 3; ++b) labels[0].v[b] = BoxOffsets{0.1, -0.2, 0.05, 0.3};
        labels[1].triplet = ts[1];
        train::LossConfig lc;
        std::vector<Parameter<double>*> params = model.params().all();
        GradCheckOptions opt;
        opt.max_coords = 6;
        opt.seed = seed;
        out.push_back(check_case(std::string("detector loss") + (tied ? " tied" : " untied"), [&](Tape<double>& t) {
            const auto maps = model.feature_maps(t, image);
            const auto h = model.heads(t, maps, ts, 1.0);
            return train::multi_task_loss(h.cls, h.reg, std::span<const train::LabeledTriplet>(labels), lc).total;
        }, params, opt));
    }
    return out;
}

} // namespace support
