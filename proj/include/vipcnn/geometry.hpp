#pragma once

// Box algebra, bbox-offset coding and greedy NMS over boxes and triplets.
// Coordinates are continuous; area is (x2 - x1) * (y2 - y1) with no +1.

#include <vipcnn/errors.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

namespace vipcnn {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }

    bool valid() const
    {
        return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
               x2 > x1 && y2 > y1;
    }

    bool contains(const Box& o) const { return x1 <= o.x1 && y1 <= o.y1 && x2 >= o.x2 && y2 >= o.y2; }

    friend bool operator==(const Box&, const Box&) = default;

    // Validating constructor.
    static Box make(double x1, double y1, double x2, double y2)
    {
        Box b{x1, y1, x2, y2};
        if (!b.valid()) {
            std::ostringstream os;
            os << "degenerate box (" << x1 << "," << y1 << "," << x2 << "," << y2 << ")";
            throw InputError(os.str());
        }
        return b;
    }
};

inline void require_valid(const Box& b, const char* what = "box")
{
    if (!b.valid()) {
        std::ostringstream os;
        os << what << " is degenerate (" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << ")";
        throw InputError(os.str());
    }
}

struct BoxOffsets {
    double tx = 0, ty = 0, tw = 0, th = 0;
    friend bool operator==(const BoxOffsets&, const BoxOffsets&) = default;
};

// Unchecked IoU; callers guarantee valid boxes.
inline double iou_unchecked(const Box& a, const Box& b)
{
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    if (iw <= 0) return 0.0;
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ih <= 0) return 0.0;
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

inline double iou(const Box& a, const Box& b)
{
    require_valid(a, "iou lhs");
    require_valid(b, "iou rhs");
    return iou_unchecked(a, b);
}

inline Box union_box(const Box& a, const Box& b)
{
    require_valid(a, "union_box lhs");
    require_valid(b, "union_box rhs");
    return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
}

inline Box clip_box(const Box& b, double width, double height)
{
    return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
            std::clamp(b.y2, 0.0, height)};
}

inline BoxOffsets encode_offsets(const Box& anchor, const Box& target)
{
    require_valid(anchor, "anchor");
    require_valid(target, "target");
    const double wa = anchor.width(), ha = anchor.height();
    return {(target.cx() - anchor.cx()) / wa, (target.cy() - anchor.cy()) / ha, std::log(target.width() / wa),
            std::log(target.height() / ha)};
}

// Largest log-scale shift accepted before exp(); matches the usual log(1000/16).
inline constexpr double kMaxLogShift = 4.135166556742356;

struct DecodedBox {
    Box box;
    bool clamped = false; // tw or th exceeded kMaxLogShift
    bool clipped = false; // image bounds changed the box
};

struct ImageSize {
    double width = 0, height = 0;
};

inline DecodedBox decode_offsets(const Box& anchor, const BoxOffsets& off,
                                 std::optional<ImageSize> image = std::nullopt)
{
    require_valid(anchor, "anchor");
    if (!std::isfinite(off.tx) || !std::isfinite(off.ty) || !std::isfinite(off.tw) || !std::isfinite(off.th))
        throw InputError("decode_offsets: non-finite offsets");
    DecodedBox out;
    double tw = off.tw, th = off.th;
    if (tw > kMaxLogShift) tw = kMaxLogShift, out.clamped = true;
    if (th > kMaxLogShift) th = kMaxLogShift, out.clamped = true;
    const double wa = anchor.width(), ha = anchor.height();
    const double cx = anchor.cx() + off.tx * wa;
    const double cy = anchor.cy() + off.ty * ha;
    const double w = wa * std::exp(tw);
    const double h = ha * std::exp(th);
    out.box = {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    if (image) {
        const Box c = clip_box(out.box, image->width, image->height);
        out.clipped = !(c == out.box);
        out.box = c;
    }
    return out;
}

namespace detail {

// Indices ordered by score descending, ties by lower index.
inline std::vector<std::size_t> score_order(std::span<const double> scores)
{
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

// Greedy suppression driven by an overlap callback; survivors in score order.
template <typename Overlap>
std::vector<std::size_t> greedy_suppress(std::span<const double> scores, double threshold, Overlap&& overlap)
{
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw InputError("nms threshold must lie in [0, 1]");
    const auto order = score_order(scores);
    std::vector<char> dead(scores.size(), 0);
    std::vector<std::size_t> keep;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (dead[i]) continue;
        keep.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (!dead[j] && overlap(i, j) > threshold) dead[j] = 1;
        }
    }
    return keep;
}

} // namespace detail

inline std::vector<std::size_t> greedy_nms(std::span<const Box> boxes, std::span<const double> scores,
                                           double threshold)
{
    if (boxes.size() != scores.size()) throw InputError("greedy_nms: boxes and scores differ in length");
    for (const auto& b : boxes) require_valid(b, "greedy_nms box");
    return detail::greedy_suppress(scores, threshold,
                                   [&](std::size_t i, std::size_t j) { return iou_unchecked(boxes[i], boxes[j]); });
}

// Subject/predicate/object ROI triple. The predicate is the union of the
// other two; use make() to build one.
struct Triplet {
    Box subject;
    Box object;
    Box predicate;
    double subject_score = 1.0;
    double object_score = 1.0;

    static Triplet make(const Box& s, const Box& o, double s_score = 1.0, double o_score = 1.0)
    {
        if (!(s_score >= 0.0 && s_score <= 1.0) || !(o_score >= 0.0 && o_score <= 1.0))
            throw InputError("triplet objectness scores must lie in [0, 1]");
        return {s, o, union_box(s, o), s_score, o_score};
    }

    friend bool operator==(const Triplet&, const Triplet&) = default;
};

inline double triplet_overlap(const Triplet& a, const Triplet& b)
{
    return iou(a.subject, b.subject) * iou(a.object, b.object);
}

inline double triplet_score(const Triplet& t) { return t.subject_score * t.object_score; }

// Triplet NMS ranked by caller-supplied scores (e.g. detection phrase scores
// when suppression runs after detection).
inline std::vector<std::size_t> triplet_nms(std::span<const Triplet> triplets, std::span<const double> scores,
                                            double threshold)
{
    if (triplets.size() != scores.size()) throw InputError("triplet_nms: triplets and scores differ in length");
    for (const auto& t : triplets) {
        require_valid(t.subject, "triplet subject");
        require_valid(t.object, "triplet object");
    }
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw InputError("nms threshold must lie in [0, 1]");
    // Triplets built by pairing share few distinct boxes. Index them, tabulate
    // box IoUs, and let each kept triplet suppress only the triplets whose
    // subject and object both touch its own; anything else has overlap 0.
    std::map<std::array<double, 4>, std::uint32_t> ids;
    std::vector<Box> distinct;
    std::vector<std::uint32_t> sid(triplets.size()), oid(triplets.size());
    auto id_of = [&](const Box& b) {
        auto [it, fresh] = ids.try_emplace({b.x1, b.y1, b.x2, b.y2}, std::uint32_t(distinct.size()));
        if (fresh) distinct.push_back(b);
        return it->second;
    };
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        sid[i] = id_of(triplets[i].subject);
        oid[i] = id_of(triplets[i].object);
    }
    const std::size_t D = distinct.size();
    if (D <= 1024 && D * D <= 4 * triplets.size() + 4096) {
        std::vector<double> m(D * D);
        std::vector<std::vector<std::uint32_t>> touch(D);
        for (std::size_t a = 0; a < D; ++a)
            for (std::size_t b = 0; b < D; ++b) {
                m[a * D + b] = iou_unchecked(distinct[a], distinct[b]);
                if (m[a * D + b] > 0.0) touch[a].push_back(std::uint32_t(b));
            }
        std::vector<std::size_t> start(D * D + 1, 0), members(triplets.size());
        for (std::size_t i = 0; i < triplets.size(); ++i) ++start[sid[i] * D + oid[i] + 1];
        for (std::size_t k = 0; k < D * D; ++k) start[k + 1] += start[k];
        std::vector<std::size_t> fill(start.begin(), start.end() - 1);
        for (std::size_t i = 0; i < triplets.size(); ++i) members[fill[sid[i] * D + oid[i]]++] = i;

        const auto order = detail::score_order(scores);
        std::vector<std::size_t> rank(triplets.size());
        for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;
        std::vector<char> dead(triplets.size(), 0);
        std::vector<std::size_t> keep;
        for (const std::size_t i : order) {
            if (dead[i]) continue;
            keep.push_back(i);
            for (const auto a : touch[sid[i]]) {
                const double so = m[sid[i] * D + a];
                for (const auto b : touch[oid[i]]) {
                    if (!(so * m[oid[i] * D + b] > threshold)) continue;
                    for (std::size_t k = start[a * D + b]; k < start[a * D + b + 1]; ++k)
                        if (rank[members[k]] > rank[i]) dead[members[k]] = 1;
                }
            }
        }
        return keep;
    }
    return detail::greedy_suppress(scores, threshold, [&](std::size_t i, std::size_t j) {
        const double s = iou_unchecked(triplets[i].subject, triplets[j].subject);
        if (s == 0.0) return 0.0;
        return s * iou_unchecked(triplets[i].object, triplets[j].object);
    });
}

inline std::vector<std::size_t> triplet_nms(std::span<const Triplet> triplets, double threshold)
{
    std::vector<double> scores(triplets.size());
    for (std::size_t i = 0; i < triplets.size(); ++i) scores[i] = triplet_score(triplets[i]);
    return triplet_nms(triplets, scores, threshold);
}

} // namespace vipcnn
