#pragma once

// Image -> proposals -> triplets -> (NMS placement) -> detections -> ranked
// relationship predictions.

#include <vipcnn/data.hpp>
#include <vipcnn/evaluation.hpp>
#include <vipcnn/model.hpp>
#include <vipcnn/proposal.hpp>

#include <chrono>
#include <functional>
#include <cstdio>
#include <string>
#include <vector>

namespace vipcnn {

struct Sample {
    std::string image_id;
    data::Image image;
    std::vector<eval::GtRelationship> gt;
    std::vector<Box> objects; // distinct gt boxes, first-seen order
};

inline std::vector<Box> distinct_boxes(const std::vector<eval::GtRelationship>& gt)
{
    std::vector<Box> out;
    for (const auto& g : gt)
        for (const Box& b : {g.subject, g.object})
            if (std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
    return out;
}

inline Sample make_sample(std::string id, data::Image image, const std::vector<data::RelationshipAnnotation>& anns,
                          const data::Vocabulary& vocab)
{
    Sample s{std::move(id), std::move(image), {}, {}};
    for (const auto& a : anns)
        s.gt.push_back({vocab.object_id(a.subject), vocab.predicate_id(a.predicate), vocab.object_id(a.object),
                        a.subject_box, a.object_box});
    s.objects = distinct_boxes(s.gt);
    return s;
}

// Samples of an annotation file whose images live in image_dir as
// <image_id>.ppm; sample order follows first appearance in the file.
inline std::vector<Sample> load_samples(const std::string& annotations, const std::string& image_dir,
                                        const data::Vocabulary& vocab)
{
    std::vector<Sample> out;
    for (auto& [id, anns] : data::group_by_image(data::read_annotations(annotations).annotations))
        out.push_back(make_sample(id, data::read_ppm(image_dir + "/" + id + ".ppm"), anns, vocab));
    return out;
}

// Vocabulary covering every class the generator can emit.
inline data::Vocabulary synth_vocabulary(const data::SynthConfig& cfg)
{
    data::Vocabulary v;
    for (const auto& st : cfg.styles()) v.objects.push_back(st.name);
    v.predicates = cfg.predicates;
    std::sort(v.objects.begin(), v.objects.end());
    std::sort(v.predicates.begin(), v.predicates.end());
    return v;
}

inline std::string synth_image_id(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "img%06zu", i);
    return buf;
}

// Scene i uses a seed derived from (cfg.seed, i), so any prefix of a larger
// corpus is identical to the smaller corpus.
inline data::Scene synth_scene(const data::SynthConfig& cfg, std::size_t i)
{
    data::SynthConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, i).next();
    return data::generate_scene(c, synth_image_id(i));
}

inline std::vector<Sample> synth_samples(const data::SynthConfig& cfg, std::size_t first, std::size_t count,
                                         const data::Vocabulary& vocab)
{
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = first; i < first + count; ++i) {
        auto sc = synth_scene(cfg, i);
        out.push_back(make_sample(synth_image_id(i), std::move(sc.image), sc.relationships, vocab));
    }
    return out;
}

enum class NmsMode { pre, post, off, random_k };

inline NmsMode parse_nms_mode(const std::string& s)
{
    if (s == "pre") return NmsMode::pre;
    if (s == "post") return NmsMode::post;
    if (s == "off") return NmsMode::off;
    if (s == "random-k") return NmsMode::random_k;
    throw ConfigError("unknown nms mode '" + s + "' (pre|post|off|random-k)");
}

inline std::string to_string(NmsMode m)
{
    switch (m) {
    case NmsMode::pre: return "pre";
    case NmsMode::post: return "post";
    case NmsMode::off: return "off";
    case NmsMode::random_k: return "random-k";
    }
    return "?";
}

struct InferenceConfig {
    NmsMode nms = NmsMode::pre;
    std::size_t random_k = 2000;
    std::size_t labels_per_triplet = 1; // label triples kept per detected triplet
    std::size_t keep_top = 100;         // predictions kept per image
};

struct ImageTiming {
    double proposal_s = 0, nms_s = 0, detect_s = 0;
    std::size_t triplets_in = 0, triplets_detected = 0;
};

// Scored triplet set before detection, per the NMS placement.
inline std::vector<Triplet> candidate_triplets(std::span<const proposal::ScoredBox> boxes,
                                               const proposal::ProposalConfig& pc, const InferenceConfig& ic,
                                               std::uint64_t seed)
{
    auto all = proposal::pair_into_triplets(boxes, pc.include_self_pairs);
    if (ic.nms == NmsMode::pre) return proposal::filter_triplets(all, pc);
    if (ic.nms == NmsMode::random_k && all.size() > ic.random_k) {
        Rng rng(seed);
        rng.shuffle(all.begin(), all.end());
        all.resize(ic.random_k);
    }
    return all;
}

// Runs the detector on precomputed proposal boxes and returns the image's
// ranked predictions (top keep_top by phrase score).
template <typename T>
std::vector<eval::RelDetection> infer_image(VipModel<T>& model, const data::Image& image,
                                            std::span<const proposal::ScoredBox> boxes,
                                            const proposal::ProposalConfig& pc, const InferenceConfig& ic,
                                            std::uint64_t seed, ImageTiming* timing = nullptr)
{
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const auto pre = preprocess<T>(image, model.config().image_min_side);
    auto triplets = candidate_triplets(boxes, pc, ic, seed);
    const auto t1 = clock::now();
    auto dets = model.detect(pre, triplets);
    const auto t2 = clock::now();

    const ImageSize isz{double(image.width), double(image.height)};
    if (ic.nms == NmsMode::post) {
        std::vector<Triplet> ts;
        std::vector<double> scores;
        std::vector<std::size_t> src;
        for (std::size_t i = 0; i < dets.size(); ++i) {
            if (dets[i].skipped) continue;
            const auto top = top_phrase_predictions(dets[i], 1);
            ts.push_back(dets[i].triplet);
            scores.push_back(top.empty() ? 0.0 : top[0].score);
            src.push_back(i);
        }
        std::vector<Detection> kept;
        for (auto k : triplet_nms(ts, scores, pc.nms_threshold)) kept.push_back(std::move(dets[src[k]]));
        dets = std::move(kept);
    }
    const auto t3 = clock::now();

    std::vector<eval::RelDetection> out;
    for (const auto& d : dets) {
        if (d.skipped) continue;
        for (const auto& ph : top_phrase_predictions(d, ic.labels_per_triplet)) {
            const Triplet r = regress_boxes(d, ph.s, ph.p, ph.o, isz);
            out.push_back({ph.s, ph.p, ph.o, r.predicate, r.subject, r.object, ph.score});
        }
    }
    const auto order = eval::score_order(out);
    std::vector<eval::RelDetection> ranked;
    for (std::size_t k = 0; k < std::min(order.size(), ic.keep_top); ++k) ranked.push_back(out[order[k]]);
    if (timing) {
        timing->proposal_s += std::chrono::duration<double>(t1 - t0).count();
        timing->detect_s += std::chrono::duration<double>(t2 - t1).count();
        timing->nms_s += std::chrono::duration<double>(t3 - t2).count();
        timing->triplets_in += triplets.size();
        timing->triplets_detected += triplets.size();
    }
    return ranked;
}

// Seed of the proposal draw for an image at evaluation time.
inline std::uint64_t proposal_seed(std::uint64_t seed, const std::string& image_id, std::uint64_t round)
{
    return Rng::derive(seed ^ name_tag(image_id), round).next();
}

struct DatasetEval {
    eval::EvalResult phrase, relationship;
    std::vector<eval::ImageResult> images;
    ImageTiming timing;
};

// Proposal boxes of a sample for a given draw seed.
using ProposalFn = std::function<std::vector<proposal::ScoredBox>(const Sample&, std::uint64_t)>;

inline ProposalFn oracle_proposals(const proposal::ProposalConfig& pc)
{
    return [pc](const Sample& s, std::uint64_t seed) {
        return proposal::oracle_jitter({double(s.image.width), double(s.image.height)}, s.objects, pc, seed);
    };
}

template <typename T>
ProposalFn scorer_proposals(proposal::AnchorScorer<T>& scorer, std::size_t top_n)
{
    return [&scorer, top_n](const Sample& s, std::uint64_t) {
        const auto pre = preprocess<T>(s.image, std::min(s.image.width, s.image.height));
        return scorer.propose(pre.image, top_n);
    };
}

template <typename T>
DatasetEval evaluate_dataset(VipModel<T>& model, std::span<const Sample> samples, const proposal::ProposalConfig& pc,
                             const InferenceConfig& ic, std::uint64_t seed, std::span<const std::size_t> ns,
                             const ProposalFn& proposals = {})
{
    DatasetEval r;
    const ProposalFn source = proposals ? proposals : oracle_proposals(pc);
    for (const auto& s : samples) {
        const auto ps = proposal_seed(seed, s.image_id, 0);
        const auto boxes = source(s, ps);
        r.images.push_back({s.image_id, infer_image(model, s.image, boxes, pc, ic, ps + 1, &r.timing), s.gt});
    }
    r.phrase = eval::recall_at_n(r.images, ns, eval::MatchKind::phrase);
    r.relationship = eval::recall_at_n(r.images, ns, eval::MatchKind::relationship);
    return r;
}

} // namespace vipcnn
