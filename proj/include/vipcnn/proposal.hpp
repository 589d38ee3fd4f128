#pragma once

// Object proposals, N x N triplet pairing and pre-detection triplet NMS.

#include <vipcnn/errors.hpp>
#include <vipcnn/geometry.hpp>
#include <vipcnn/layers.hpp>
#include <vipcnn/optim.hpp>
#include <vipcnn/rng.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace vipcnn::proposal {

struct ScoredBox {
    Box box;
    double objectness = 0;
    friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

enum class Source { oracle_jitter, anchor_scorer };

struct ProposalConfig {
    Source source = Source::oracle_jitter;
    std::size_t top_n = 200;
    double nms_threshold = 0.25;
    bool include_self_pairs = true;
    // oracle-jitter
    std::size_t copies_per_gt = 6;
    double center_jitter = 0.12; // std, fraction of box width/height
    double scale_jitter = 0.15;  // std of log-scale change
    double score_noise = 0.1;    // objectness = IoU with source gt minus U(0, score_noise)
    std::size_t negatives = 8;   // random background boxes
    double negative_max_score = 0.4;
    double negative_min_size = 6;

    void validate() const
    {
        if (top_n < 1) throw ConfigError("proposal top_n must be >= 1");
        if (!(nms_threshold >= 0 && nms_threshold <= 1)) throw ConfigError("proposal nms_threshold must lie in [0,1]");
        if (center_jitter < 0 || scale_jitter < 0 || score_noise < 0)
            throw ConfigError("proposal jitter parameters must be non-negative");
    }
};

// Sort by objectness (descending, stable), drop exact duplicate boxes,
// truncate to top_n.
inline std::vector<ScoredBox> rank_and_truncate(std::vector<ScoredBox> boxes, std::size_t top_n)
{
    std::stable_sort(boxes.begin(), boxes.end(),
                     [](const ScoredBox& a, const ScoredBox& b) { return a.objectness > b.objectness; });
    std::vector<ScoredBox> out;
    for (const auto& b : boxes) {
        if (out.size() == top_n) break;
        if (std::any_of(out.begin(), out.end(), [&](const ScoredBox& o) { return o.box == b.box; })) continue;
        out.push_back(b);
    }
    return out;
}

// Ground-truth boxes perturbed by Gaussian centre/scale noise, plus random
// negatives. Deterministic in `seed`.
inline std::vector<ScoredBox> oracle_jitter(ImageSize image, std::span<const Box> gt, const ProposalConfig& cfg,
                                            std::uint64_t seed)
{
    cfg.validate();
    if (gt.empty()) throw InputError("oracle-jitter proposals need ground-truth boxes");
    Rng rng(seed);
    std::vector<ScoredBox> out;
    for (const auto& g : gt) {
        require_valid(g, "ground-truth box");
        for (std::size_t c = 0; c < std::max<std::size_t>(cfg.copies_per_gt, 1); ++c) {
            const double cx = g.cx() + rng.normal(0, cfg.center_jitter) * g.width();
            const double cy = g.cy() + rng.normal(0, cfg.center_jitter) * g.height();
            const double w = g.width() * std::exp(rng.normal(0, cfg.scale_jitter));
            const double h = g.height() * std::exp(rng.normal(0, cfg.scale_jitter));
            const Box b = clip_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, image.width, image.height);
            const double noise = cfg.score_noise * rng.uniform();
            if (!b.valid()) continue;
            out.push_back({b, std::clamp(iou_unchecked(b, g) - noise, 0.0, 1.0)});
        }
    }
    for (std::size_t i = 0; i < cfg.negatives; ++i) {
        const double mn = std::min(cfg.negative_min_size, std::min(image.width, image.height) / 2);
        const double w = rng.uniform(mn, image.width / 2), h = rng.uniform(mn, image.height / 2);
        const double x = rng.uniform(0, image.width - w), y = rng.uniform(0, image.height - h);
        const double score = rng.uniform(0, cfg.negative_max_score);
        const Box b{x, y, x + w, y + h};
        if (b.valid()) out.push_back({b, score});
    }
    return rank_and_truncate(std::move(out), cfg.top_n);
}

// Proposal sets shaped like detector output on a cluttered image: n boxes
// jittered around `clusters` random object boxes, scored by closeness to
// their cluster center.
inline std::vector<ScoredBox> clustered_proposals(ImageSize image, std::size_t n, std::size_t clusters,
                                                  std::uint64_t seed, double jitter = 0.22)
{
    if (clusters == 0) throw ConfigError("clustered proposals need at least one cluster");
    Rng rng(seed);
    std::vector<Box> centers;
    const double lo = std::min(image.width, image.height) / 8, hi = std::min(image.width, image.height) / 3;
    for (std::size_t c = 0; c < clusters; ++c) {
        const double w = rng.uniform(lo, hi), h = rng.uniform(lo, hi);
        const double x = rng.uniform(0, image.width - w), y = rng.uniform(0, image.height - h);
        centers.push_back({x, y, x + w, y + h});
    }
    std::vector<ScoredBox> out;
    while (out.size() < n) {
        const Box& g = centers[out.size() % clusters];
        const double cx = g.cx() + rng.normal(0, jitter) * g.width();
        const double cy = g.cy() + rng.normal(0, jitter) * g.height();
        const double w = g.width() * std::exp(rng.normal(0, jitter)), h = g.height() * std::exp(rng.normal(0, jitter));
        const Box b = clip_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, image.width, image.height);
        if (b.valid()) out.push_back({b, iou_unchecked(b, g)});
    }
    std::stable_sort(out.begin(), out.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.objectness > b.objectness; });
    return out;
}

// All ordered (subject, object) pairs; predicate = union box.
inline std::vector<Triplet> pair_into_triplets(std::span<const ScoredBox> boxes, bool include_self_pairs = true)
{
    std::vector<Triplet> out;
    out.reserve(boxes.size() * boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i)
        for (std::size_t j = 0; j < boxes.size(); ++j) {
            if (i == j && !include_self_pairs) continue;
            out.push_back(Triplet::make(boxes[i].box, boxes[j].box, boxes[i].objectness, boxes[j].objectness));
        }
    return out;
}

// Triplet NMS at cfg.nms_threshold; survivors in descending triplet score.
inline std::vector<Triplet> filter_triplets(std::span<const Triplet> triplets, const ProposalConfig& cfg)
{
    const auto keep = triplet_nms(triplets, cfg.nms_threshold);
    std::vector<Triplet> out;
    out.reserve(keep.size());
    for (auto i : keep) out.push_back(triplets[i]);
    return out;
}

// Proposal dump: image_id TAB x1 TAB y1 TAB x2 TAB y2 TAB objectness
inline void write_proposals(std::ostream& os, const std::string& image_id, std::span<const ScoredBox> boxes)
{
    for (const auto& b : boxes)
        os << image_id << '\t' << b.box.x1 << '\t' << b.box.y1 << '\t' << b.box.x2 << '\t' << b.box.y2 << '\t'
           << b.objectness << '\n';
}

// ---------------------------------------------------------------------------
// Minimal learned source: single-scale anchors scored by a small conv net.

struct AnchorScorerConfig {
    std::vector<std::size_t> channels{8, 16, 16}; // each stage: 3x3 conv + ReLU + 2x2 pool
    double anchor_size = 16;
    std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
    double fg_iou = 0.5, bg_iou = 0.3;
    std::size_t batch_anchors = 64;
    double nms = 0.7;

    std::size_t stride() const { return std::size_t(1) << channels.size(); }
};

template <typename T>
class AnchorScorer {
public:
    AnchorScorer(AnchorScorerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg))
    {
        if (cfg_.channels.empty() || cfg_.aspect_ratios.empty()) throw ConfigError("anchor scorer config empty");
        Rng rng(seed);
        std::size_t in = 3;
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            const std::size_t out = cfg_.channels[i];
            add_he("rpn.conv" + std::to_string(i) + ".w", {out, in, 3, 3}, in * 9, rng);
            store_.create("rpn.conv" + std::to_string(i) + ".b", nn::Tensor<T>({out}));
            in = out;
        }
        const std::size_t A = cfg_.aspect_ratios.size();
        add_normal("rpn.cls.w", {2 * A, in, 1, 1}, 0.01, rng);
        store_.create("rpn.cls.b", nn::Tensor<T>({2 * A}));
        add_normal("rpn.reg.w", {4 * A, in, 1, 1}, 0.001, rng);
        store_.create("rpn.reg.b", nn::Tensor<T>({4 * A}));
    }

    nn::ParameterStore<T>& params() { return store_; }
    const AnchorScorerConfig& config() const { return cfg_; }

    // Anchor boxes for an HxW feature map, ordered (y, x, a).
    std::vector<Box> anchors(std::size_t fh, std::size_t fw) const
    {
        std::vector<Box> out;
        const double s = double(cfg_.stride());
        for (std::size_t y = 0; y < fh; ++y)
            for (std::size_t x = 0; x < fw; ++x)
                for (double r : cfg_.aspect_ratios) {
                    const double cx = (double(x) + 0.5) * s, cy = (double(y) + 0.5) * s;
                    const double w = cfg_.anchor_size / std::sqrt(r), h = cfg_.anchor_size * std::sqrt(r);
                    out.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
                }
        return out;
    }

    struct Heads {
        nn::Var<T> cls; // [1, 2A, fh, fw]
        nn::Var<T> reg; // [1, 4A, fh, fw]
        std::size_t fh, fw;
    };

    // image: [1,3,H,W] as produced by preprocess()
    Heads forward(nn::Tape<T>& tape, const nn::Tensor<T>& image)
    {
        nn::Var<T> h = tape.constant(image);
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            const auto n = "rpn.conv" + std::to_string(i);
            h = nn::relu(nn::conv2d(h, tape.param(store_.get(n + ".w")), tape.param(store_.get(n + ".b")), 1, 1));
            h = nn::max_pool2d(h, 2, 2);
        }
        Heads out;
        out.cls = nn::conv2d(h, tape.param(store_.get("rpn.cls.w")), tape.param(store_.get("rpn.cls.b")));
        out.reg = nn::conv2d(h, tape.param(store_.get("rpn.reg.w")), tape.param(store_.get("rpn.reg.b")));
        out.fh = h.shape()[2];
        out.fw = h.shape()[3];
        return out;
    }

    // One SGD step on an image; returns the loss.
    double train_step(const nn::Tensor<T>& image, std::span<const Box> gt, const nn::Sgd& sgd, Rng& rng)
    {
        nn::Tape<T> tape;
        auto heads = forward(tape, image);
        const auto anc = anchors(heads.fh, heads.fw);
        const std::size_t A = cfg_.aspect_ratios.size(), HW = heads.fh * heads.fw;

        std::vector<int> label(anc.size(), -1);
        std::vector<std::size_t> match(anc.size(), 0);
        std::vector<double> best_for_gt(gt.size(), 0.0);
        std::vector<std::vector<double>> ov(anc.size(), std::vector<double>(gt.size()));
        for (std::size_t i = 0; i < anc.size(); ++i) {
            double best = 0;
            for (std::size_t g = 0; g < gt.size(); ++g) {
                ov[i][g] = iou_unchecked(anc[i], gt[g]);
                if (ov[i][g] > best) best = ov[i][g], match[i] = g;
                best_for_gt[g] = std::max(best_for_gt[g], ov[i][g]);
            }
            if (best >= cfg_.fg_iou) label[i] = 1;
            else if (best < cfg_.bg_iou) label[i] = 0;
        }
        for (std::size_t g = 0; g < gt.size(); ++g)
            for (std::size_t i = 0; i < anc.size(); ++i)
                if (best_for_gt[g] > 0 && ov[i][g] == best_for_gt[g]) label[i] = 1, match[i] = g;

        std::vector<std::size_t> fg, bg;
        for (std::size_t i = 0; i < anc.size(); ++i) {
            if (label[i] == 1) fg.push_back(i);
            if (label[i] == 0) bg.push_back(i);
        }
        rng.shuffle(fg.begin(), fg.end());
        rng.shuffle(bg.begin(), bg.end());
        fg.resize(std::min(fg.size(), cfg_.batch_anchors / 2));
        bg.resize(std::min(bg.size(), cfg_.batch_anchors - fg.size()));
        std::vector<std::size_t> picked = fg;
        picked.insert(picked.end(), bg.begin(), bg.end());
        if (picked.empty()) return 0.0;

        // anchor i = (cell, a) -> logits at channels (2a, 2a+1), regs at 4a..4a+3
        std::vector<std::size_t> cls_idx, labels;
        for (auto i : picked) {
            const std::size_t cell = i / A, a = i % A;
            cls_idx.push_back((2 * a) * HW + cell);
            cls_idx.push_back((2 * a + 1) * HW + cell);
            labels.push_back(label[i] == 1 ? 1 : 0);
        }
        auto logits = nn::gather(heads.cls, cls_idx, {picked.size(), 2});
        nn::Var<T> loss = nn::softmax_cross_entropy(logits, labels);
        if (!fg.empty()) {
            std::vector<std::size_t> reg_idx;
            nn::Tensor<T> target({fg.size(), 4}), mask({fg.size(), 4}, T(1));
            for (std::size_t k = 0; k < fg.size(); ++k) {
                const std::size_t i = fg[k], cell = i / A, a = i % A;
                for (std::size_t c = 0; c < 4; ++c) reg_idx.push_back((4 * a + c) * HW + cell);
                const auto t = encode_offsets(anc[i], gt[match[i]]);
                target.at(k, 0) = T(t.tx), target.at(k, 1) = T(t.ty), target.at(k, 2) = T(t.tw), target.at(k, 3) = T(t.th);
            }
            auto reg = nn::gather(heads.reg, reg_idx, {fg.size(), 4});
            loss = nn::add(loss, nn::smooth_l1(reg, target, mask));
        }
        store_.zero_grad();
        tape.backward(loss);
        sgd.step(store_);
        return double(loss.value()[0]);
    }

    // Scored, decoded, clipped anchors after greedy NMS, best first.
    std::vector<ScoredBox> propose(const nn::Tensor<T>& image, std::size_t top_n)
    {
        nn::Tape<T> tape;
        tape.set_frozen([](const nn::Parameter<T>&) { return true; });
        auto heads = forward(tape, image);
        const auto anc = anchors(heads.fh, heads.fw);
        const std::size_t A = cfg_.aspect_ratios.size(), HW = heads.fh * heads.fw;
        const double W = double(image.dim(3)), H = double(image.dim(2));
        const auto& cls = heads.cls.value();
        const auto& reg = heads.reg.value();
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (std::size_t i = 0; i < anc.size(); ++i) {
            const std::size_t cell = i / A, a = i % A;
            const double l0 = double(cls[(2 * a) * HW + cell]), l1 = double(cls[(2 * a + 1) * HW + cell]);
            const double p = 1.0 / (1.0 + std::exp(l0 - l1));
            BoxOffsets off{double(reg[(4 * a) * HW + cell]), double(reg[(4 * a + 1) * HW + cell]),
                           double(reg[(4 * a + 2) * HW + cell]), double(reg[(4 * a + 3) * HW + cell])};
            const auto d = decode_offsets(anc[i], off, ImageSize{W, H});
            if (!d.box.valid() || d.box.width() < 2 || d.box.height() < 2) continue;
            boxes.push_back(d.box);
            scores.push_back(p);
        }
        const auto keep = greedy_nms(boxes, scores, cfg_.nms);
        std::vector<ScoredBox> out;
        for (auto k : keep) {
            if (out.size() == top_n) break;
            out.push_back({boxes[k], scores[k]});
        }
        return out;
    }

private:
    void add_he(const std::string& name, nn::Shape shape, std::size_t fan_in, Rng& rng)
    {
        nn::Tensor<T> w(std::move(shape));
        const double bound = std::sqrt(6.0 / double(fan_in));
        for (auto& v : w.values()) v = T(rng.uniform(-bound, bound));
        store_.create(name, std::move(w));
    }
    void add_normal(const std::string& name, nn::Shape shape, double std, Rng& rng)
    {
        nn::Tensor<T> w(std::move(shape));
        for (auto& v : w.values()) v = T(rng.normal(0, std));
        store_.create(name, std::move(w));
    }

    AnchorScorerConfig cfg_;
    nn::ParameterStore<T> store_;
};

} // namespace vipcnn::proposal
