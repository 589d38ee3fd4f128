#pragma once

// Recall@N for phrase and relationship detection, object-detection AP, and
// the detection / results file formats.

#include <vipcnn/data.hpp>
#include <vipcnn/errors.hpp>
#include <vipcnn/geometry.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vipcnn::eval {

struct GtRelationship {
    std::size_t s = 0, p = 0, o = 0;
    Box subject, object;

    Box phrase() const { return union_box(subject, object); }
};

struct RelDetection {
    std::size_t s = 0, p = 0, o = 0;
    Box phrase, subject, object;
    double score = 0;
    friend bool operator==(const RelDetection&, const RelDetection&) = default;
};

enum class MatchKind { phrase, relationship };

inline constexpr double kDefaultIouThreshold = 0.5;

// Descending score, lower index first on ties.
inline std::vector<std::size_t> score_order(std::span<const RelDetection> dets)
{
    std::vector<double> s;
    s.reserve(dets.size());
    for (const auto& d : dets) s.push_back(d.score);
    return detail::score_order(s);
}

// Greedy one-to-one matching in score order. A detection takes the unmatched
// ground truth with equal labels and the highest overlap at or above thr
// (phrase: IoU of phrase boxes; relationship: min of subject and object
// IoUs), lowest gt index on ties. Returns the matched gt index per detection.
inline std::vector<std::optional<std::size_t>> match(std::span<const RelDetection> dets,
                                                     std::span<const GtRelationship> gt, MatchKind kind,
                                                     double thr = kDefaultIouThreshold)
{
    std::vector<std::optional<std::size_t>> out(dets.size());
    std::vector<bool> taken(gt.size(), false);
    for (auto i : score_order(dets)) {
        const auto& d = dets[i];
        double best = -1;
        std::optional<std::size_t> pick;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            if (taken[g] || gt[g].s != d.s || gt[g].p != d.p || gt[g].o != d.o) continue;
            const double ov = kind == MatchKind::phrase
                                  ? iou(d.phrase, gt[g].phrase())
                                  : std::min(iou(d.subject, gt[g].subject), iou(d.object, gt[g].object));
            if (ov >= thr && ov > best) best = ov, pick = g;
        }
        if (pick) {
            taken[*pick] = true;
            out[i] = pick;
        }
    }
    return out;
}

inline std::vector<bool> match_phrase(std::span<const RelDetection> dets, std::span<const GtRelationship> gt,
                                      double thr = kDefaultIouThreshold)
{
    std::vector<bool> out;
    for (const auto& m : match(dets, gt, MatchKind::phrase, thr)) out.push_back(m.has_value());
    return out;
}

inline std::vector<bool> match_relationship(std::span<const RelDetection> dets, std::span<const GtRelationship> gt,
                                            double thr = kDefaultIouThreshold)
{
    std::vector<bool> out;
    for (const auto& m : match(dets, gt, MatchKind::relationship, thr)) out.push_back(m.has_value());
    return out;
}

struct ImageResult {
    std::string image_id;
    std::vector<RelDetection> detections;
    std::vector<GtRelationship> gt;
};

struct EvalResult {
    std::map<std::size_t, std::optional<double>> rec_at;
    std::map<std::size_t, std::size_t> matched_at;
    std::size_t total_gt = 0;
    std::size_t total_detections = 0;
    // per image, per N: number of matched gt
    std::vector<std::map<std::size_t, std::size_t>> per_image;
};

inline EvalResult recall_at_n(std::span<const ImageResult> images, std::span<const std::size_t> ns, MatchKind kind,
                              double thr = kDefaultIouThreshold)
{
    EvalResult r;
    for (auto n : ns) r.matched_at[n] = 0;
    for (const auto& im : images) {
        r.total_gt += im.gt.size();
        r.total_detections += im.detections.size();
        const auto order = score_order(im.detections);
        auto& per = r.per_image.emplace_back();
        for (auto n : ns) {
            std::vector<RelDetection> top;
            for (std::size_t k = 0; k < std::min(n, order.size()); ++k) top.push_back(im.detections[order[k]]);
            std::size_t m = 0;
            for (const auto& x : match(top, im.gt, kind, thr)) m += x.has_value();
            per[n] = m;
            r.matched_at[n] += m;
        }
    }
    for (auto n : ns)
        r.rec_at[n] = r.total_gt ? std::optional<double>(double(r.matched_at[n]) / double(r.total_gt)) : std::nullopt;
    return r;
}

// Object detection AP for one class.
struct ScoredDetection {
    std::string image_id;
    Box box;
    double score = 0;
};

struct PrPoint {
    double recall, precision;
};

// Score-sorted greedy matching (each gt at most once, highest-IoU unmatched
// gt wins); AP is the area under the monotone precision envelope over every
// recall step.
inline std::optional<double> average_precision(std::span<const ScoredDetection> dets,
                                               const std::map<std::string, std::vector<Box>>& gt,
                                               double thr = kDefaultIouThreshold, std::vector<PrPoint>* curve = nullptr)
{
    std::size_t npos = 0;
    for (const auto& [id, boxes] : gt) npos += boxes.size();
    if (npos == 0) return std::nullopt;
    std::vector<double> scores;
    for (const auto& d : dets) scores.push_back(d.score);
    const auto order = detail::score_order(scores);
    std::map<std::string, std::vector<bool>> taken;
    for (const auto& [id, boxes] : gt) taken[id].assign(boxes.size(), false);

    std::vector<PrPoint> pr;
    std::size_t tp = 0, fp = 0;
    for (auto i : order) {
        const auto& d = dets[i];
        bool hit = false;
        if (auto it = gt.find(d.image_id); it != gt.end()) {
            double best = -1;
            std::optional<std::size_t> pick;
            auto& tk = taken[d.image_id];
            for (std::size_t g = 0; g < it->second.size(); ++g) {
                if (tk[g]) continue;
                const double ov = iou(d.box, it->second[g]);
                if (ov >= thr && ov > best) best = ov, pick = g;
            }
            if (pick) tk[*pick] = true, hit = true;
        }
        hit ? ++tp : ++fp;
        pr.push_back({double(tp) / double(npos), double(tp) / double(tp + fp)});
    }
    if (curve) *curve = pr;
    std::vector<double> env(pr.size());
    double run = 0;
    for (std::size_t k = pr.size(); k-- > 0;) env[k] = run = std::max(run, pr[k].precision);
    double ap = 0, prev_r = 0;
    for (std::size_t k = 0; k < pr.size(); ++k) {
        ap += (pr[k].recall - prev_r) * env[k];
        prev_r = pr[k].recall;
    }
    return ap;
}

// Per object class AP over the subject and object boxes of relationship
// detections (identical boxes merged, best score kept); ground truth is the
// distinct boxes of each class per image.
// Index c-1 holds class c.
inline std::vector<std::optional<double>> object_class_ap(std::span<const ImageResult> images,
                                                          std::size_t object_classes,
                                                          double thr = kDefaultIouThreshold)
{
    std::vector<std::optional<double>> out;
    for (std::size_t c = 1; c <= object_classes; ++c) {
        std::vector<ScoredDetection> dets;
        std::map<std::string, std::vector<Box>> gt;
        for (const auto& im : images) {
            auto& g = gt[im.image_id];
            for (const auto& r : im.gt) {
                if (r.s == c && std::find(g.begin(), g.end(), r.subject) == g.end()) g.push_back(r.subject);
                if (r.o == c && std::find(g.begin(), g.end(), r.object) == g.end()) g.push_back(r.object);
            }
            // a box shared by several relationships is one object detection
            std::vector<ScoredDetection> mine;
            auto add = [&](const Box& b, double score) {
                for (auto& m : mine)
                    if (m.box == b) {
                        m.score = std::max(m.score, score);
                        return;
                    }
                mine.push_back({im.image_id, b, score});
            };
            for (const auto& d : im.detections) {
                if (d.s == c) add(d.subject, d.score);
                if (d.o == c) add(d.object, d.score);
            }
            dets.insert(dets.end(), mine.begin(), mine.end());
        }
        out.push_back(average_precision(dets, gt, thr));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files

// Detection file, one record per line:
//   image_id TAB subject TAB predicate TAB object TAB phrase box TAB
//   subject box TAB object box TAB score        (boxes as x1,y1,x2,y2)
inline void write_detections(std::ostream& os, std::span<const ImageResult> images, const data::Vocabulary& vocab)
{
    for (const auto& im : images)
        for (const auto& d : im.detections)
            os << im.image_id << '\t' << vocab.objects.at(d.s - 1) << '\t' << vocab.predicates.at(d.p - 1) << '\t'
               << vocab.objects.at(d.o - 1) << '\t' << data::detail::format_box(d.phrase) << '\t'
               << data::detail::format_box(d.subject) << '\t' << data::detail::format_box(d.object) << '\t'
               << data::detail::format_number(d.score) << '\n';
}

struct DetectionRecord {
    std::string image_id;
    RelDetection det;
};

inline std::vector<DetectionRecord> read_detections(std::istream& is, const data::Vocabulary& vocab)
{
    std::vector<DetectionRecord> out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(is, line)) {
        ++no;
        if (line.empty()) continue;
        const auto f = data::detail::split(line, '\t');
        if (f.size() != 8) throw ParseError("detection record needs 8 fields, got " + std::to_string(f.size()), no);
        DetectionRecord r;
        r.image_id = std::string(f[0]);
        try {
            r.det.s = vocab.object_id(std::string(f[1]));
            r.det.p = vocab.predicate_id(std::string(f[2]));
            r.det.o = vocab.object_id(std::string(f[3]));
        } catch (const InputError& e) {
            throw ParseError(e.what(), no);
        }
        const auto pb = data::detail::parse_box(f[4]), sb = data::detail::parse_box(f[5]), ob = data::detail::parse_box(f[6]);
        if (!pb || !sb || !ob) throw ParseError("malformed box", no);
        r.det.phrase = *pb;
        r.det.subject = *sb;
        r.det.object = *ob;
        try {
            r.det.score = std::stod(std::string(f[7]));
        } catch (const std::exception&) {
            throw ParseError("malformed score", no);
        }
        out.push_back(std::move(r));
    }
    return out;
}

// Results file: metric TAB value per line; undefined values are "NA".
using Results = std::vector<std::pair<std::string, std::optional<double>>>;

inline void write_results(std::ostream& os, const Results& results)
{
    for (const auto& [k, v] : results) os << k << '\t' << (v ? data::detail::format_number(*v) : "NA") << '\n';
}

inline Results read_results(std::istream& is)
{
    Results out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(is, line)) {
        ++no;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("results: expected metric TAB value", no);
        const auto v = line.substr(tab + 1);
        if (v == "NA") {
            out.push_back({line.substr(0, tab), std::nullopt});
            continue;
        }
        try {
            out.push_back({line.substr(0, tab), std::stod(v)});
        } catch (const std::exception&) {
            throw ParseError("results: bad value", no);
        }
    }
    return out;
}

} // namespace vipcnn::eval
