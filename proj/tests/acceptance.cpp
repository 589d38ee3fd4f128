// Acceptance checks: one PASS/FAIL line per criterion.
//   acceptance            run all
//   acceptance 1 3 7      run a subset

#include "support.hpp"

#include <vipcnn/data.hpp>
#include <vipcnn/pipeline.hpp>
#include <vipcnn/proposal.hpp>
#include <vipcnn/training.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <set>
#include <sstream>

using namespace vipcnn;
using clock_type = std::chrono::steady_clock;

namespace {

double since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;
};

void require(Outcome& o, bool ok, const std::string& what)
{
    if (!ok) {
        o.pass = false;
        if (!o.detail.empty()) o.detail += "; ";
        o.detail += what;
    }
}

std::string num(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome triplet_nms_oracle()
{
    Outcome o;
    const auto t0 = clock_type::now();
    Rng rng(2024);
    std::size_t mismatches = 0, total = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto in = support::random_nms_instance(rng, 200);
        const auto got = triplet_nms(in.triplets, in.scores, in.threshold);
        const auto ref = support::brute_triplet_nms(in.triplets, in.scores, in.threshold);
        mismatches += got != ref;
        total += in.triplets.size();
    }
    const double secs = since(t0);
    require(o, mismatches == 0, num(double(mismatches)) + " instances differ from brute force");
    require(o, secs < 10, "took " + num(secs) + " s");
    o.detail = (o.pass ? "1000 instances, " + num(double(total)) + " triplets, identical, " : o.detail + ", ") +
               num(secs) + " s";
    return o;
}

Outcome suppression_walkthrough()
{
    Outcome o;
    // subject IoU 60/100, object IoU 50/100
    const auto hi = Triplet::make({0, 0, 10, 10}, {20, 0, 30, 10});
    const auto lo = Triplet::make({0, 0, 10, 6}, {20, 0, 30, 5});
    const double ov = triplet_overlap(hi, lo);
    require(o, std::abs(iou(hi.subject, lo.subject) - 0.6) < 1e-12, "subject IoU " + num(iou(hi.subject, lo.subject)));
    require(o, std::abs(iou(hi.object, lo.object) - 0.5) < 1e-12, "object IoU " + num(iou(hi.object, lo.object)));
    require(o, std::abs(ov - 0.30) < 1e-12, "overlap " + num(ov));
    const std::vector<Triplet> ts{lo, hi};
    const std::vector<double> scores{0.4, 0.9};
    const auto at25 = triplet_nms(ts, scores, 0.25);
    const auto at35 = triplet_nms(ts, scores, 0.35);
    require(o, at25 == std::vector<std::size_t>{1}, "threshold 0.25 kept " + num(double(at25.size())));
    require(o, at35 == (std::vector<std::size_t>{1, 0}), "threshold 0.35 kept " + num(double(at35.size())));
    if (o.pass) o.detail = "overlap " + num(ov) + ", 0.25 suppresses, 0.35 keeps both";
    return o;
}

Outcome pairing()
{
    Outcome o;
    const auto boxes = proposal::clustered_proposals({256, 256}, 250, 10, 3);
    const auto n = proposal::pair_into_triplets(boxes, true).size();
    require(o, n == 62500, "got " + num(double(n)));
    if (o.pass) o.detail = "250 proposals -> 62500 triplets";
    return o;
}

ModelConfig full_model(const data::Vocabulary& v)
{
    ModelConfig mc;
    mc.object_classes = v.objects.size();
    mc.predicate_classes = v.predicates.size();
    return mc;
}

Outcome nms_reduction_and_speed()
{
    Outcome o;
    const auto t0 = clock_type::now();
    data::SynthConfig sc;
    sc.seed = 42;
    const auto vocab = synth_vocabulary(sc);
    VipModel<float> model(full_model(vocab), 1);
    proposal::ProposalConfig pc;
    pc.top_n = 250;
    double before = 0, after = 0, pre = 0, post = 0;
    const std::size_t images = 2;
    for (std::size_t i = 0; i < images; ++i) {
        const auto scene = synth_scene(sc, i);
        const ImageSize isz{double(scene.image.width), double(scene.image.height)};
        const auto boxes = proposal::clustered_proposals(isz, 250, 10, 100 + i);
        const auto all = proposal::pair_into_triplets(boxes, true);
        before += double(all.size());
        after += double(triplet_nms(all, 0.25).size());
        for (auto mode : {NmsMode::pre, NmsMode::post}) {
            InferenceConfig ic;
            ic.nms = mode;
            const auto t = clock_type::now();
            infer_image(model, scene.image, boxes, pc, ic, 7);
            (mode == NmsMode::pre ? pre : post) += since(t);
        }
    }
    const double reduction = before / after, speedup = post / pre, secs = since(t0);
    require(o, reduction >= 10, "reduction " + num(reduction));
    require(o, speedup >= 5, "speedup " + num(speedup));
    require(o, secs < 300, "took " + num(secs) + " s");
    o.detail = "reduction " + num(reduction) + "x (" + num(before / images) + " -> " + num(after / images) +
               "), pre " + num(pre / images) + " s vs post " + num(post / images) + " s = " + num(speedup) + "x, " +
               num(secs) + " s";
    return o;
}

Outcome gradient_suite()
{
    Outcome o;
    const auto t0 = clock_type::now();
    const auto cases = support::gradient_suite(1);
    double worst = 0;
    std::string worst_name;
    for (const auto& c : cases) {
        if (c.max_rel_error > worst) worst = c.max_rel_error, worst_name = c.name;
        require(o, c.max_rel_error <= 1e-4 && c.checked > 0, c.name + " rel error " + num(c.max_rel_error));
    }
    const double secs = since(t0);
    require(o, secs < 120, "took " + num(secs) + " s");
    o.detail = num(double(cases.size())) + " cases, worst " + num(worst) + " (" + worst_name + "), " + num(secs) +
               " s" + (o.pass ? "" : "; " + o.detail);
    return o;
}

template <typename T>
bool same_heads(VipModel<T>& a, VipModel<T>& b, const data::Image& im, const std::vector<Triplet>& ts)
{
    auto run = [&](VipModel<T>& m, nn::Tape<T>& t) {
        const auto pre = preprocess<T>(im, m.config().image_min_side);
        return m.heads(t, m.feature_maps(t, pre.image), ts, pre.scale);
    };
    nn::Tape<T> ta, tb;
    const auto ha = run(a, ta), hb = run(b, tb);
    for (int k = 0; k < 3; ++k)
        for (const auto* pair : {&ha.cls, &ha.reg}) {
            const auto& x = (*pair)[k].value();
            const auto& y = (pair == &ha.cls ? hb.cls : hb.reg)[k].value();
            if (x.shape() != y.shape() || std::memcmp(x.data(), y.data(), x.size() * sizeof(T)) != 0) return false;
        }
    return true;
}

Outcome zero_message_reduction()
{
    Outcome o;
    data::SynthConfig sc;
    sc.seed = 42;
    const auto vocab = synth_vocabulary(sc);
    const auto scene = synth_scene(sc, 0);
    std::vector<Box> objs;
    for (const auto& ob : scene.objects) objs.push_back(ob.box);
    std::vector<Triplet> ts;
    for (const auto& s : objs)
        for (const auto& b : objs) ts.push_back(Triplet::make(s, b));
    std::size_t checked = 0;
    for (bool tied : {true, false}) {
        auto mc = full_model(vocab);
        mc.tie_subject_object = tied;
        auto base = mc;
        base.pmps_conv_layer.reset();
        base.pmps_fc_layer.reset();
        for (std::uint64_t seed : {1, 2}) {
            VipModel<float> vf(mc, seed), bf(base, seed);
            require(o, same_heads(vf, bf, scene.image, ts), "float tied=" + std::to_string(tied));
            VipModel<double> vd(mc, seed), bd(base, seed);
            require(o, same_heads(vd, bd, scene.image, ts), "double tied=" + std::to_string(tied));
            checked += 2;
        }
    }
    if (o.pass) o.detail = num(double(checked)) + " model pairs bit-identical (float and double, tied and untied)";
    return o;
}

Outcome labeling()
{
    Outcome o;
    Rng rng(77);
    std::size_t bad1 = 0, bad2 = 0, fg2 = 0;
    train::LossConfig s1, s2;
    s1.stage = 1;
    s2.stage = 2;
    for (int i = 0; i < 10000; ++i) {
        const auto c = support::random_label_case(rng);
        const auto a = train::assign_labels(c.triplet, c.gt, s1);
        const auto r1 = support::ref_stage1(c.triplet, c.gt, 0.5);
        bad1 += a.u != r1.u;
        const auto b = train::assign_labels(c.triplet, c.gt, s2);
        const auto r2 = support::ref_stage2(c.triplet, c.gt, 0.5);
        bad2 += b.u != r2.u || b.gt != r2.matched[0] || (b.any_foreground() && !b.all_foreground());
        fg2 += b.all_foreground();
    }
    require(o, bad1 == 0, num(double(bad1)) + " stage-1 mismatches");
    require(o, bad2 == 0, num(double(bad2)) + " stage-2 mismatches");
    if (o.pass) o.detail = "10000 configurations, " + num(double(fg2)) + " stage-2 foreground, all match";
    return o;
}

Outcome loss_identities()
{
    using namespace nn;
    Outcome o;
    Rng rng(5);
    auto heads = [&](Tape<double>& t, std::size_t n, std::array<Var<double>, 3>& cls, std::array<Var<double>, 3>& reg) {
        for (int b = 0; b < 3; ++b) {
            cls[b] = t.constant(support::random_tensor(rng, {n, 4}));
            reg[b] = t.constant(support::random_tensor(rng, {n, 12}));
        }
    };
    {
        Tape<double> t;
        std::array<Var<double>, 3> cls, reg;
        heads(t, 5, cls, reg);
        std::vector<train::LabeledTriplet> labels(5);
        const auto l = train::multi_task_loss(cls, reg, std::span<const train::LabeledTriplet>(labels), {});
        require(o, l.reg[0] == 0 && l.reg[1] == 0 && l.reg[2] == 0, "background batch has regression loss");
    }
    {
        Tape<double> t;
        std::array<Var<double>, 3> cls, reg;
        heads(t, 4, cls, reg);
        std::vector<train::LabeledTriplet> labels(4);
        for (std::size_t i = 0; i < 4; ++i)
            for (int b = 0; b < 3; ++b) labels[i].u[b] = i % 4, labels[i].v[b] = BoxOffsets{0.2, -0.1, 0.3, 0.1};
        for (auto& l : labels)
            for (int b = 0; b < 3; ++b)
                if (!l.u[b]) l.v[b].reset();
        train::LossConfig cfg;
        cfg.lambda = 0;
        const auto l = train::multi_task_loss(cls, reg, std::span<const train::LabeledTriplet>(labels), cfg);
        // independent cross entropy
        double ce = 0;
        for (int b = 0; b < 3; ++b) {
            const auto& x = cls[b].value();
            double sum = 0;
            for (std::size_t i = 0; i < 4; ++i) {
                double m = -1e300, z = 0;
                for (std::size_t c = 0; c < 4; ++c) m = std::max(m, x.at(i, c));
                for (std::size_t c = 0; c < 4; ++c) z += std::exp(x.at(i, c) - m);
                sum += m + std::log(z) - x.at(i, labels[i].u[b]);
            }
            ce += sum / 4;
        }
        require(o, std::abs(l.total.value()[0] - ce) < 1e-12, "lambda=0 total " + num(l.total.value()[0]) + " vs " + num(ce));
    }
    double hand = 0;
    {
        Tape<double> t;
        std::array<Var<double>, 3> cls, reg;
        for (int b = 0; b < 3; ++b) {
            cls[b] = t.constant(Tensor<double>({1, 2}, {0.7, 0.7}));
            reg[b] = t.constant(Tensor<double>({1, 4}, {0.1, 0.2, -0.3, 0.05}));
        }
        std::vector<train::LabeledTriplet> labels(1);
        for (int b = 0; b < 3; ++b) labels[0].u[b] = 1, labels[0].v[b] = BoxOffsets{0.1, 0.2, -0.3, 0.05};
        hand = train::multi_task_loss(cls, reg, std::span<const train::LabeledTriplet>(labels), {}).total.value()[0];
        require(o, std::abs(hand - 3 * std::log(2.0)) <= 1e-9, "hand case " + num(hand));
    }
    if (o.pass) o.detail = "background reg 0, lambda=0 equals cross entropy, hand case " + num(hand) + " = 3 ln 2";
    return o;
}

// ---------------------------------------------------------------------------

struct AblationRun {
    double p50 = 0, p100 = 0, r50 = 0, seconds = 0;
};

AblationRun ablation_run(const std::string& variant, std::uint64_t seed, const std::vector<Sample>& train,
                         const std::vector<Sample>& test, const data::Vocabulary& vocab)
{
    const auto t0 = clock_type::now();
    auto mc = full_model(vocab);
    if (variant == "baseline") mc.pmps_conv_layer.reset(), mc.pmps_fc_layer.reset();
    if (variant == "no-tie") mc.tie_subject_object = false;
    VipModel<float> m(mc, seed);
    train::TrainConfig tc;
    tc.stage1_epochs = 4;
    tc.stage2_epochs = 4;
    tc.lr = 0.005;
    tc.lr_decay_epoch = 3;
    train::Trainer<float> tr(m, tc, seed * 7 + 1);
    tr.run(train, {});
    const std::vector<std::size_t> ns{50, 100};
    const auto r = evaluate_dataset(m, std::span<const Sample>(test), tc.proposals, InferenceConfig{}, 99, ns);
    return {*r.phrase.rec_at.at(50), *r.phrase.rec_at.at(100), *r.relationship.rec_at.at(50), since(t0)};
}

Outcome directional_ablation()
{
    Outcome o;
    data::SynthConfig sc;
    sc.seed = 42;
    const auto vocab = synth_vocabulary(sc);
    const auto train = synth_samples(sc, 0, 2000, vocab);
    const auto test = synth_samples(sc, 1000000, 400, vocab);
    require(o, vocab.objects.size() >= 6 && vocab.predicates.size() >= 4, "vocabulary too small");
    std::map<std::string, std::vector<double>> p50;
    double slowest = 0;
    for (const std::string v : {"vip", "baseline", "no-tie"})
        for (std::uint64_t seed : {1, 2, 3}) {
            const auto r = ablation_run(v, seed, train, test, vocab);
            std::printf("    %-8s seed=%llu phrase_rec@50=%.4f phrase_rec@100=%.4f relationship_rec@50=%.4f %.0f s\n",
                        v.c_str(), (unsigned long long)seed, r.p50, r.p100, r.r50, r.seconds);
            std::fflush(stdout);
            p50[v].push_back(r.p50);
            slowest = std::max(slowest, r.seconds);
        }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    const double vip = median(p50["vip"]), base = median(p50["baseline"]), notie = median(p50["no-tie"]);
    require(o, vip > base, "ViP " + num(vip) + " <= baseline " + num(base));
    require(o, vip >= notie, "tie " + num(vip) + " < no-tie " + num(notie));
    require(o, slowest <= 1800, "slowest run " + num(slowest) + " s");
    o.detail = "median phrase Rec@50 vip " + num(vip) + ", baseline " + num(base) + ", no-tie " + num(notie) +
               "; slowest run " + num(slowest) + " s" + (o.pass ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------------------

Outcome evaluation_harness()
{
    Outcome o;
    const auto c = support::hand_corpus();
    std::vector<std::size_t> ns;
    for (const auto& [n, p, r] : c.expected) ns.push_back(n);
    const auto ph = eval::recall_at_n(c.images, ns, eval::MatchKind::phrase);
    const auto rel = eval::recall_at_n(c.images, ns, eval::MatchKind::relationship);
    for (const auto& [n, p, r] : c.expected) {
        require(o, *ph.rec_at.at(n) == p && *ph.rec_at.at(n) == support::brute_recall(c.images, n, false),
                "hand phrase recall n=" + std::to_string(n));
        require(o, *rel.rec_at.at(n) == r && *rel.rec_at.at(n) == support::brute_recall(c.images, n, true),
                "hand relationship recall n=" + std::to_string(n));
    }

    // Rec@100 >= Rec@50 on random corpora with many detections per image
    Rng rng(10);
    std::size_t monotone_bad = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<eval::ImageResult> ims(3);
        for (auto& im : ims) {
            im.image_id = std::to_string(trial);
            for (std::size_t g = 0, ng = 1 + rng.below(6); g < ng; ++g)
                im.gt.push_back({1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(2), support::random_box(rng, 30),
                                 support::random_box(rng, 30)});
            for (std::size_t d = 0, nd = rng.below(160); d < nd; ++d) {
                const Box s = support::random_box(rng, 30), ob = support::random_box(rng, 30);
                im.detections.push_back({1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(2), union_box(s, ob), s, ob,
                                         double(rng.below(20)) / 19});
            }
        }
        for (auto kind : {eval::MatchKind::phrase, eval::MatchKind::relationship}) {
            const auto r = eval::recall_at_n(ims, std::vector<std::size_t>{50, 100}, kind);
            monotone_bad += *r.rec_at.at(100) < *r.rec_at.at(50);
        }
    }
    require(o, monotone_bad == 0, "Rec@100 < Rec@50 in " + num(double(monotone_bad)) + " corpora");

    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
        auto box = [&]() {
            const double x = rng.uniform(-50, 200), y = rng.uniform(-50, 200);
            return Box{x, y, x + rng.uniform(2, 100), y + rng.uniform(2, 100)};
        };
        const Box a = box(), b = box();
        const Box back = decode_offsets(a, encode_offsets(a, b)).box;
        worst = std::max({worst, std::abs(back.x1 - b.x1), std::abs(back.y1 - b.y1), std::abs(back.x2 - b.x2),
                          std::abs(back.y2 - b.y2)});
    }
    require(o, worst <= 1e-9, "encode/decode error " + num(worst));

    const data::SynonymTable syn({{"man", "person"}, {"guy", "man"}, {"standing on", "on"}, {"Sitting-On", "on"}});
    const std::vector<std::string> words{"Man", "GUY", " guy ", "standing  on", "sitting-on", "on", "t-shirt",
                                         "Red_Circle", "?", "a.b", "PERSON!", "x"};
    std::vector<data::RelationshipAnnotation> raw;
    for (int i = 0; i < 2000; ++i)
        raw.push_back({std::to_string(i % 50), words[rng.below(words.size())], words[rng.below(words.size())],
                       words[rng.below(words.size())], {0, 0, 2, 2}, {1, 1, 3, 3}});
    const auto once = data::cleanse_labels(raw, syn).annotations;
    const auto twice = data::cleanse_labels(once, syn).annotations;
    require(o, once == twice, "cleansing not idempotent");

    std::vector<data::RelationshipAnnotation> toy;
    auto add = [&](int n, const char* s, const char* p, const char* ob) {
        for (int i = 0; i < n; ++i) toy.push_back({"t", s, p, ob, {0, 0, 2, 2}, {1, 1, 3, 3}});
    };
    add(250, "person", "on", "street");  // person 250+150, street 250, on 250+200
    add(150, "person", "near", "dog");   // dog 150+50, near 150
    add(200, "cat", "on", "mat");        // cat 200, mat 200
    add(50, "cat", "near", "dog");
    const auto f = data::count_labels(toy);
    require(o, f.objects.at("person") == 400 && f.objects.at("street") == 250 && f.objects.at("dog") == 200 &&
                   f.objects.at("cat") == 250 && f.objects.at("mat") == 200,
            "object counts");
    require(o, f.predicates.at("on") == 450 && f.predicates.at("near") == 200, "predicate counts");
    require(o, data::kDefaultObjectMinFrequency == 200 && data::kDefaultPredicateMinFrequency == 400,
            "default thresholds");
    const auto kept = data::frequency_filter(toy);
    require(o, kept.size() == 450, "default filter kept " + num(double(kept.size())));
    require(o, data::frequency_filter(toy, 201, 400).size() == 250, "object threshold 201");

    if (o.pass)
        o.detail = "hand corpus equals worked values and brute force, Rec@100 >= Rec@50, roundtrip error " +
                   num(worst) + ", cleansing idempotent, counts and (200, 400) thresholds verified";
    return o;
}

} // namespace

int main(int argc, char** argv)
{
    struct Criterion {
        int id;
        const char* name;
        Outcome (*run)();
    };
    const std::vector<Criterion> all{{1, "triplet NMS matches brute force", triplet_nms_oracle},
                                     {2, "suppression walkthrough", suppression_walkthrough},
                                     {3, "pairing count", pairing},
                                     {4, "NMS reduction and placement speed", nms_reduction_and_speed},
                                     {5, "gradient suite", gradient_suite},
                                     {6, "zero-message reduction", zero_message_reduction},
                                     {7, "labeling", labeling},
                                     {8, "loss identities", loss_identities},
                                     {9, "directional ablation", directional_ablation},
                                     {10, "evaluation harness", evaluation_harness}};
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failed = 0;
    for (const auto& c : all) {
        if (!only.empty() && !only.count(c.id)) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
