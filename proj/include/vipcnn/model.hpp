#pragma once

// Desk-scale three-branch relationship detector.
//
//   image -> shared trunk -> per-branch convs (parallel PMPS at one layer)
//         -> per-branch ROI pool on its own box -> fc stack (sequential PMPS
//         at two adjacent fc layers) -> per-branch cls / class-specific reg.

#include <vipcnn/autograd.hpp>
#include <vipcnn/data.hpp>
#include <vipcnn/errors.hpp>
#include <vipcnn/geometry.hpp>
#include <vipcnn/layers.hpp>
#include <vipcnn/pmps.hpp>
#include <vipcnn/rng.hpp>

#include <array>
#include <cmath>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace vipcnn {

enum class TieScope { all, fc };

struct ModelConfig {
    std::size_t image_min_side = 64;
    std::vector<std::size_t> trunk_channels{16, 32, 64, 64};
    std::size_t trunk_pools = 2; // 2x2 pool after each of the first trunk_pools stages
    std::vector<std::size_t> branch_channels{64};
    std::size_t roi_size = 3;
    std::vector<std::size_t> fc_widths{128, 128};
    std::size_t object_classes = 6;    // foreground count; heads have +1
    std::size_t predicate_classes = 6; // foreground count; heads have +1
    std::optional<std::size_t> pmps_conv_layer = 0; // index into branch_channels
    std::optional<std::size_t> pmps_fc_layer = 0;   // gather here, broadcast at +1
    double pmps_split = 0.5;                        // gather share of the conv width
    bool tie_subject_object = true;
    TieScope tie_scope = TieScope::all;
    std::size_t word_vector_dim = 0; // 0 = no word-vector heads
    std::size_t triplet_chunk = 512;

    std::size_t stride() const { return std::size_t(1) << trunk_pools; }

    std::size_t gather_width() const
    {
        const std::size_t c = branch_channels.at(*pmps_conv_layer);
        return std::size_t(std::llround(pmps_split * double(c)));
    }

    void validate() const
    {
        if (image_min_side < 8) throw ConfigError("model.image_min_side must be >= 8");
        if (trunk_channels.empty()) throw ConfigError("model.trunk_channels must not be empty");
        if (trunk_pools > trunk_channels.size()) throw ConfigError("model.trunk_pools exceeds trunk stages");
        if (fc_widths.empty()) throw ConfigError("model.fc_widths must not be empty");
        if (roi_size < 1) throw ConfigError("model.roi_size must be >= 1");
        if (object_classes < 1 || predicate_classes < 1) throw ConfigError("model class counts must be >= 1");
        for (auto c : trunk_channels)
            if (c == 0) throw ConfigError("model.trunk_channels entries must be positive");
        for (auto c : branch_channels)
            if (c == 0) throw ConfigError("model.branch_channels entries must be positive");
        for (auto c : fc_widths)
            if (c == 0) throw ConfigError("model.fc_widths entries must be positive");
        if (pmps_conv_layer) {
            if (*pmps_conv_layer >= branch_channels.size())
                throw ConfigError("model.pmps_conv_layer " + std::to_string(*pmps_conv_layer) +
                                  " names no branch conv layer");
            const std::size_t g = gather_width(), c = branch_channels[*pmps_conv_layer];
            if (g == 0 || g >= c) throw ConfigError("model.pmps_split leaves an empty sub-branch");
        }
        if (pmps_fc_layer && *pmps_fc_layer + 1 >= fc_widths.size())
            throw ConfigError("model.pmps_fc_layer " + std::to_string(*pmps_fc_layer) +
                              " needs fc layers at " + std::to_string(*pmps_fc_layer) + " and " +
                              std::to_string(*pmps_fc_layer + 1));
        if (triplet_chunk == 0) throw ConfigError("model.triplet_chunk must be >= 1");
    }
};

// Per-triplet network outputs with softmax probabilities.
struct Detection {
    Triplet triplet;
    bool skipped = false; // ROI fell outside the feature map
    std::vector<double> subject_probs, predicate_probs, object_probs;
    // offsets[c - 1] belongs to foreground class c
    std::vector<BoxOffsets> subject_offsets, predicate_offsets, object_offsets;

    double phrase_score(std::size_t s, std::size_t p, std::size_t o) const
    {
        return subject_probs.at(s) * predicate_probs.at(p) * object_probs.at(o);
    }
};

struct PhrasePrediction {
    std::size_t s = 0, p = 0, o = 0;
    double score = 0;
    friend bool operator==(const PhrasePrediction&, const PhrasePrediction&) = default;
};

// k best foreground label triples by product score, ties in lexicographic
// (s, p, o) order. Enumerates the product lattice best-first in log space.
inline std::vector<PhrasePrediction> top_phrase_predictions(const Detection& d, std::size_t k)
{
    if (k == 0) throw InputError("top_phrase_predictions: k must be >= 1");
    if (d.skipped) return {};
    struct Ranked {
        std::vector<double> logp;
        std::vector<std::size_t> label;
    };
    auto rank = [](const std::vector<double>& probs) {
        Ranked r;
        for (std::size_t c = 1; c < probs.size(); ++c) r.label.push_back(c);
        std::stable_sort(r.label.begin(), r.label.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
        for (auto c : r.label) r.logp.push_back(probs[c] > 0 ? std::log(probs[c]) : -INFINITY);
        return r;
    };
    const std::array<Ranked, 3> R{rank(d.subject_probs), rank(d.predicate_probs), rank(d.object_probs)};
    if (R[0].label.empty() || R[1].label.empty() || R[2].label.empty()) return {};

    using Idx = std::array<std::size_t, 3>;
    struct Entry {
        double logp;
        std::array<std::size_t, 3> labels;
        Idx idx;
    };
    auto worse = [](const Entry& a, const Entry& b) {
        if (a.logp != b.logp) return a.logp < b.logp;
        return a.labels > b.labels;
    };
    auto make = [&](const Idx& i) {
        return Entry{R[0].logp[i[0]] + R[1].logp[i[1]] + R[2].logp[i[2]],
                     {R[0].label[i[0]], R[1].label[i[1]], R[2].label[i[2]]}, i};
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
    std::set<Idx> seen;
    heap.push(make({0, 0, 0}));
    seen.insert({0, 0, 0});
    // Entries tied with the k-th may still sit behind it in the lattice
    // (zero probabilities), so drain the whole tie before ordering.
    std::vector<Entry> popped;
    while (!heap.empty() && (popped.size() < k || heap.top().logp == popped.back().logp)) {
        const Entry e = heap.top();
        heap.pop();
        popped.push_back(e);
        for (int a = 0; a < 3; ++a) {
            Idx n = e.idx;
            if (++n[a] >= R[a].label.size()) continue;
            if (seen.insert(n).second) heap.push(make(n));
        }
    }
    std::stable_sort(popped.begin(), popped.end(), [&](const Entry& a, const Entry& b) { return worse(b, a); });
    std::vector<PhrasePrediction> out;
    for (std::size_t i = 0; i < std::min(k, popped.size()); ++i)
        out.push_back({popped[i].labels[0], popped[i].labels[1], popped[i].labels[2], std::exp(popped[i].logp)});
    return out;
}

// Refined boxes for labels (s, p, o); the predicate box is the phrase box.
inline Triplet regress_boxes(const Detection& d, std::size_t s, std::size_t p, std::size_t o,
                             std::optional<ImageSize> image = std::nullopt)
{
    if (s == 0 || p == 0 || o == 0) throw InputError("regress_boxes: background label has no offsets");
    if (s > d.subject_offsets.size() || o > d.object_offsets.size() || p > d.predicate_offsets.size())
        throw InputError("regress_boxes: label out of range");
    // A refinement clipped down to nothing keeps the (clipped) proposal box.
    auto refine = [&](const Box& b, const BoxOffsets& off) {
        const Box r = decode_offsets(b, off, image).box;
        if (r.valid()) return r;
        return image ? clip_box(b, image->width, image->height) : b;
    };
    Triplet t = d.triplet;
    t.subject = refine(d.triplet.subject, d.subject_offsets[s - 1]);
    t.predicate = refine(d.triplet.predicate, d.predicate_offsets[p - 1]);
    t.object = refine(d.triplet.object, d.object_offsets[o - 1]);
    return t;
}

template <typename T>
struct Preprocessed {
    nn::Tensor<T> image; // [1, 3, H, W], normalized
    double scale = 1.0;  // resized / original
    ImageSize original;
};

inline constexpr double kPixelMean = 128.0;
inline constexpr double kPixelScale = 1.0 / 64.0;

// Bilinear resize so the shorter side equals target (aspect ratio kept),
// then (v - 128) / 64 per channel.
template <typename T = float>
Preprocessed<T> preprocess(const data::Image& img, std::size_t target)
{
    if (img.width == 0 || img.height == 0 || img.rgb.size() != img.width * img.height * 3)
        throw InputError("preprocess: empty or malformed image");
    const double scale = double(target) / double(std::min(img.width, img.height));
    const auto W = std::size_t(std::llround(double(img.width) * scale));
    const auto H = std::size_t(std::llround(double(img.height) * scale));
    Preprocessed<T> out;
    out.scale = scale;
    out.original = {double(img.width), double(img.height)};
    out.image = nn::Tensor<T>({1, 3, H, W});
    const bool same = W == img.width && H == img.height;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double v;
                if (same) {
                    v = img.rgb[(y * img.width + x) * 3 + c];
                } else {
                    const double sx = std::clamp((double(x) + 0.5) / scale - 0.5, 0.0, double(img.width - 1));
                    const double sy = std::clamp((double(y) + 0.5) / scale - 0.5, 0.0, double(img.height - 1));
                    const auto x0 = std::size_t(sx), y0 = std::size_t(sy);
                    const auto x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
                    const double fx = sx - double(x0), fy = sy - double(y0);
                    auto px = [&](std::size_t xx, std::size_t yy) { return double(img.rgb[(yy * img.width + xx) * 3 + c]); };
                    v = (1 - fy) * ((1 - fx) * px(x0, y0) + fx * px(x1, y0)) + fy * ((1 - fx) * px(x0, y1) + fx * px(x1, y1));
                }
                out.image.at(0, c, y, x) = T((v - kPixelMean) * kPixelScale);
            }
    return out;
}

inline constexpr std::array<const char*, 3> kBranches{"subject", "predicate", "object"};

inline std::uint64_t name_tag(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}

template <typename T>
class VipModel {
public:
    struct Maps {
        nn::Var<T> s, p, o;
    };
    struct Heads {
        std::array<nn::Var<T>, 3> cls, reg;
        std::array<std::optional<nn::Var<T>>, 3> vec;
    };

    VipModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed)
    {
        cfg_.validate();
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParameterStore<T>& params() { return store_; }
    const nn::ParameterStore<T>& params() const { return store_; }

    // Runtime switch: stage 1 runs with message paths off.
    bool messages_enabled() const { return messages_; }
    void set_messages(bool on) { messages_ = on; }
    bool has_pmps() const { return cfg_.pmps_conv_layer || cfg_.pmps_fc_layer; }

    bool is_message_param(const std::string& name) const { return name.rfind("pmps.", 0) == 0; }

    std::size_t num_classes(std::size_t branch) const
    {
        return (branch == 1 ? cfg_.predicate_classes : cfg_.object_classes) + 1;
    }

    // Shared trunk and per-branch conv layers on the whole image.
    Maps feature_maps(nn::Tape<T>& tape, const nn::Tensor<T>& image)
    {
        nn::Var<T> h = tape.constant(image);
        for (std::size_t i = 0; i < cfg_.trunk_channels.size(); ++i) {
            const auto n = "trunk.conv" + std::to_string(i);
            h = nn::relu(nn::conv2d(h, P(tape, n + ".w"), P(tape, n + ".b"), 1, 1));
            if (i < cfg_.trunk_pools) h = nn::max_pool2d(h, 2, 2);
        }
        pmps::BranchFeatures<T> x{h, h, h};
        for (std::size_t j = 0; j < cfg_.branch_channels.size(); ++j) {
            auto lp = layer_params("conv" + std::to_string(j), pmps::LayerKind::conv, 1);
            if (cfg_.pmps_conv_layer == j && messages_) {
                const std::size_t g = cfg_.gather_width();
                x = pmps::parallel_pmps(x, lp, g, cfg_.branch_channels[j] - g, true);
            } else {
                x = {pmps::plain_layer(lp.kind, x.s, lp.s, 1, "subject"),
                     pmps::plain_layer(lp.kind, x.p, lp.p, 1, "predicate"),
                     pmps::plain_layer(lp.kind, x.o, lp.o, 1, "object")};
            }
        }
        return {x.s, x.p, x.o};
    }

    // ROI pooling of each branch on its own box, fc stack and heads.
    // Boxes are in original image coordinates; `scale` maps them onto the
    // preprocessed image.
    Heads heads(nn::Tape<T>& tape, const Maps& maps, std::span<const Triplet> triplets, double scale)
    {
        const double ss = scale / double(cfg_.stride());
        std::vector<nn::Roi> rs, rp, ro;
        for (const auto& t : triplets) {
            rs.push_back({0, t.subject});
            rp.push_back({0, t.predicate});
            ro.push_back({0, t.object});
        }
        const std::size_t r = cfg_.roi_size;
        pmps::BranchFeatures<T> x{nn::flatten(nn::roi_pool(maps.s, std::span<const nn::Roi>(rs), ss, r, r)),
                                  nn::flatten(nn::roi_pool(maps.p, std::span<const nn::Roi>(rp), ss, r, r)),
                                  nn::flatten(nn::roi_pool(maps.o, std::span<const nn::Roi>(ro), ss, r, r))};
        for (std::size_t j = 0; j < cfg_.fc_widths.size(); ++j) {
            if (cfg_.pmps_fc_layer == j) {
                auto first = layer_params("fc" + std::to_string(j), pmps::LayerKind::fc, 0);
                auto second = layer_params("fc" + std::to_string(j + 1), pmps::LayerKind::fc, 0);
                x = pmps::sequential_pmps(x, first, second, messages_);
                ++j;
                continue;
            }
            auto lp = layer_params("fc" + std::to_string(j), pmps::LayerKind::fc, 0);
            x = {pmps::plain_layer(lp.kind, x.s, lp.s, 0, "subject"), pmps::plain_layer(lp.kind, x.p, lp.p, 0, "predicate"),
                 pmps::plain_layer(lp.kind, x.o, lp.o, 0, "object")};
        }
        Heads h;
        const std::array<nn::Var<T>, 3> feats{x.s, x.p, x.o};
        for (std::size_t b = 0; b < 3; ++b) {
            const std::string n = kBranches[b];
            h.cls[b] = nn::linear(feats[b], P(tape, n + ".cls.w"), P(tape, n + ".cls.b"));
            h.reg[b] = nn::linear(feats[b], P(tape, n + ".reg.w"), P(tape, n + ".reg.b"));
            if (cfg_.word_vector_dim) h.vec[b] = nn::linear(feats[b], P(tape, n + ".vec.w"), P(tape, n + ".vec.b"));
        }
        return h;
    }

    // Whether every box of the triplet lands on the feature map.
    bool on_map(const Triplet& t, const Preprocessed<T>& pre) const
    {
        const std::size_t H = pre.image.dim(2), W = pre.image.dim(3);
        const std::size_t fh = feature_extent(H), fw = feature_extent(W);
        const double ss = pre.scale / double(cfg_.stride());
        return nn::roi_window(t.subject, ss, fh, fw) && nn::roi_window(t.predicate, ss, fh, fw) &&
               nn::roi_window(t.object, ss, fh, fw);
    }

    std::size_t feature_extent(std::size_t n) const
    {
        for (std::size_t i = 0; i < cfg_.trunk_pools; ++i) n /= 2;
        return n;
    }

    // Inference: one Detection per input triplet, in input order.
    std::vector<Detection> detect(const Preprocessed<T>& pre, std::span<const Triplet> triplets)
    {
        std::vector<Detection> out(triplets.size());
        std::vector<std::size_t> live;
        for (std::size_t i = 0; i < triplets.size(); ++i) {
            out[i].triplet = triplets[i];
            if (on_map(triplets[i], pre)) live.push_back(i);
            else out[i].skipped = true;
        }
        if (live.empty()) return out;

        nn::Tensor<T> ms, mp, mo;
        {
            nn::Tape<T> tape;
            tape.set_frozen([](const nn::Parameter<T>&) { return true; });
            const Maps m = feature_maps(tape, pre.image);
            ms = m.s.value();
            mp = m.p.value();
            mo = m.o.value();
        }
        for (std::size_t at = 0; at < live.size(); at += cfg_.triplet_chunk) {
            const std::size_t end = std::min(live.size(), at + cfg_.triplet_chunk);
            std::vector<Triplet> chunk;
            for (std::size_t k = at; k < end; ++k) chunk.push_back(triplets[live[k]]);
            nn::Tape<T> tape;
            tape.set_frozen([](const nn::Parameter<T>&) { return true; });
            const Maps m{tape.constant(ms), tape.constant(mp), tape.constant(mo)};
            const Heads h = heads(tape, m, chunk, pre.scale);
            for (std::size_t b = 0; b < 3; ++b) {
                const auto probs = nn::softmax_rows(h.cls[b].value());
                const auto& reg = h.reg[b].value();
                const std::size_t C = num_classes(b);
                for (std::size_t k = 0; k < chunk.size(); ++k) {
                    Detection& d = out[live[at + k]];
                    auto& pv = b == 0 ? d.subject_probs : b == 1 ? d.predicate_probs : d.object_probs;
                    auto& ov = b == 0 ? d.subject_offsets : b == 1 ? d.predicate_offsets : d.object_offsets;
                    pv.assign(probs.begin() + std::ptrdiff_t(k * C), probs.begin() + std::ptrdiff_t((k + 1) * C));
                    ov.resize(C - 1);
                    for (std::size_t c = 1; c < C; ++c) {
                        const std::size_t base = k * 4 * (C - 1) + 4 * (c - 1);
                        ov[c - 1] = {double(reg[base]), double(reg[base + 1]), double(reg[base + 2]), double(reg[base + 3])};
                    }
                }
            }
        }
        return out;
    }

    // Tied tensors compare equal by construction (shared storage); this
    // lists the alias pairs for inspection.
    const std::map<std::string, std::string>& ties() const { return store_.aliases(); }

private:
    nn::Var<T> P(nn::Tape<T>& tape, const std::string& name) { return tape.param(store_.get(name)); }

    pmps::PmpsLayerParams<T> layer_params(const std::string& layer, pmps::LayerKind kind, std::size_t pad)
    {
        pmps::PmpsLayerParams<T> lp;
        lp.kind = kind;
        lp.pad = pad;
        auto main = [&](const char* b) {
            return pmps::MainParams<T>{&store_.get(std::string(b) + "." + layer + ".w"),
                                       &store_.get(std::string(b) + "." + layer + ".b")};
        };
        lp.s = main("subject");
        lp.p = main("predicate");
        lp.o = main("object");
        auto msg = [&](const char* m) -> nn::Parameter<T>* {
            const std::string n = "pmps." + layer + "." + m;
            return store_.contains(n) ? &store_.get(n) : nullptr;
        };
        lp.p_from_s = msg("p_from_s");
        lp.p_from_o = msg("p_from_o");
        lp.s_from_p = msg("s_from_p");
        lp.o_from_p = msg("o_from_p");
        return lp;
    }

    void create(const std::string& name, nn::Shape shape, std::size_t fan_in, double normal_std = 0)
    {
        nn::Tensor<T> w(std::move(shape));
        Rng rng = Rng::derive(seed_, name_tag(name));
        if (normal_std > 0) {
            for (auto& v : w.values()) v = T(rng.normal(0, normal_std));
        } else if (fan_in > 0) {
            const double bound = std::sqrt(6.0 / double(fan_in));
            for (auto& v : w.values()) v = T(rng.uniform(-bound, bound));
        }
        store_.create(name, std::move(w));
    }

    bool tied(const std::string& suffix) const
    {
        if (!cfg_.tie_subject_object) return false;
        if (cfg_.tie_scope == TieScope::all) return true;
        return suffix.rfind("conv", 0) != 0;
    }

    // Main weights and bias of one layer for all three branches.
    void create_branch_layer(const std::string& layer, nn::Shape wshape, std::size_t fan_in, double normal_std = 0)
    {
        const std::size_t out = wshape[0];
        for (const char* b : kBranches) {
            const std::string n = std::string(b) + "." + layer;
            if (std::string(b) == "object" && tied(layer)) {
                store_.alias(n + ".w", "subject." + layer + ".w");
                store_.alias(n + ".b", "subject." + layer + ".b");
                continue;
            }
            create(n + ".w", wshape, fan_in, normal_std);
            create(n + ".b", {out}, 0);
        }
    }

    void build()
    {
        std::size_t in = 3;
        for (std::size_t i = 0; i < cfg_.trunk_channels.size(); ++i) {
            const auto c = cfg_.trunk_channels[i];
            const auto n = "trunk.conv" + std::to_string(i);
            create(n + ".w", {c, in, 3, 3}, in * 9);
            create(n + ".b", {c}, 0);
            in = c;
        }
        for (std::size_t j = 0; j < cfg_.branch_channels.size(); ++j) {
            const auto c = cfg_.branch_channels[j];
            const auto layer = "conv" + std::to_string(j);
            create_branch_layer(layer, {c, in, 3, 3}, in * 9);
            if (cfg_.pmps_conv_layer == j) {
                const std::size_t g = cfg_.gather_width(), b = c - g;
                create("pmps." + layer + ".p_from_s", {g, g, 1, 1}, 0);
                create("pmps." + layer + ".p_from_o", {g, g, 1, 1}, 0);
                create("pmps." + layer + ".s_from_p", {b, b, 1, 1}, 0);
                create("pmps." + layer + ".o_from_p", {b, b, 1, 1}, 0);
            }
            in = c;
        }
        in = in * cfg_.roi_size * cfg_.roi_size;
        for (std::size_t j = 0; j < cfg_.fc_widths.size(); ++j) {
            const auto w = cfg_.fc_widths[j];
            const auto layer = "fc" + std::to_string(j);
            create_branch_layer(layer, {w, in}, in);
            if (cfg_.pmps_fc_layer == j) {
                create("pmps." + layer + ".p_from_s", {w, w}, 0);
                create("pmps." + layer + ".p_from_o", {w, w}, 0);
            }
            if (cfg_.pmps_fc_layer && *cfg_.pmps_fc_layer + 1 == j) {
                create("pmps." + layer + ".s_from_p", {w, w}, 0);
                create("pmps." + layer + ".o_from_p", {w, w}, 0);
            }
            in = w;
        }
        const std::size_t no = cfg_.object_classes, np = cfg_.predicate_classes;
        // heads: class counts differ between predicate and subject/object
        for (const char* b : kBranches) {
            const bool pred = std::string(b) == "predicate";
            const std::size_t fg = pred ? np : no;
            const std::string n = b;
            if (!pred && std::string(b) == "object" && tied("cls")) {
                for (const char* h : {"cls", "reg", "vec"}) {
                    if (std::string(h) == "vec" && !cfg_.word_vector_dim) continue;
                    store_.alias(n + "." + h + ".w", std::string("subject.") + h + ".w");
                    store_.alias(n + "." + h + ".b", std::string("subject.") + h + ".b");
                }
                continue;
            }
            create(n + ".cls.w", {fg + 1, in}, 0, 0.01);
            create(n + ".cls.b", {fg + 1}, 0);
            create(n + ".reg.w", {4 * fg, in}, 0, 0.001);
            create(n + ".reg.b", {4 * fg}, 0);
            if (cfg_.word_vector_dim) {
                create(n + ".vec.w", {cfg_.word_vector_dim, in}, in);
                create(n + ".vec.b", {cfg_.word_vector_dim}, 0);
            }
        }
    }

    ModelConfig cfg_;
    std::uint64_t seed_;
    nn::ParameterStore<T> store_;
    bool messages_ = true;
};

} // namespace vipcnn
