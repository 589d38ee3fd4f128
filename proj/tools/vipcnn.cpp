// vipcnn: dataset synthesis, cleansing, training, evaluation and the triplet
// NMS benchmark.

#include <vipcnn/settings.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace vipcnn;

namespace {

using Real = float;

struct Common {
    std::string config;
    std::string out = "out";
    std::string ablation = "vip";
    std::vector<std::string> nms;
    std::string stage = "2";
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c)
{
    app->add_option("--config", c.config, "key = value configuration file");
    app->add_option("--out", c.out, "output directory");
    app->add_option("--seed", c.seed, "seed for every random draw");
    app->add_option("--ablation", c.ablation, "vip | baseline | no-tie")
        ->check(CLI::IsMember({"vip", "baseline", "no-tie"}));
    app->add_option("--threads", c.threads, "worker cap (commands run on one thread)")->check(CLI::PositiveNumber);
    app->add_option("--set", c.sets, "extra key=value override (repeatable)");
}

Config make_config(const Common& c, const std::string& fallback = "")
{
    Config cfg;
    if (!c.config.empty()) cfg = Config::load(c.config);
    else if (!fallback.empty() && fs::exists(fallback)) cfg = Config::load(fallback);
    cfg.apply_env();
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed) cfg.set("seed", std::to_string(*c.seed));
    if (!c.nms.empty()) {
        if (c.nms.size() == 2 && c.nms[0] != "random-k") throw ConfigError("only --nms random-k takes a count");
        cfg.set("eval.nms", c.nms[0]);
        if (c.nms.size() == 2) cfg.set("eval.random_k", c.nms[1]);
    }
    if (c.ablation != "vip") cfg.set("ablation", c.ablation);
    apply_ablation(cfg, cfg.get_string("ablation", "vip"));
    return cfg;
}

void prepare_out(const std::string& dir) { fs::create_directories(dir); }

void finish(const Common& c, Config& cfg, const std::string& dir)
{
    cfg.write_resolved(dir + "/config.resolved");
    if (c.config.empty()) return;
    for (const auto& k : cfg.unused()) std::cerr << "warning: config key '" << k << "' was not used\n";
}

// Paths given on the command line are recorded so the resolved config
// reproduces the run.
std::string path_setting(Config& cfg, const std::string& key, const std::string& flag)
{
    if (!flag.empty()) cfg.set(key, flag);
    const auto v = cfg.get_string(key, "");
    if (v.empty()) throw ConfigError("missing " + key + " (flag or config key)");
    return v;
}

std::string fmt(double v) { return data::detail::format_number(v); }

data::Vocabulary load_vocab(const std::string& dir)
{
    if (fs::exists(dir + "/vocab.tsv")) return data::Vocabulary::load(dir + "/vocab.tsv");
    return data::Vocabulary::from(data::read_annotations(dir + "/annotations.tsv").annotations);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c, std::size_t images)
{
    auto cfg = make_config(c);
    const auto sc = synth_settings(cfg);
    const auto n = cfg.get_size("synth.images", images);
    const auto fractions = split_settings(cfg);
    data::split_counts(n, fractions);
    prepare_out(c.out);
    fs::create_directories(c.out + "/images");
    std::vector<data::RelationshipAnnotation> all;
    for (std::size_t i = 0; i < n; ++i) {
        auto scene = synth_scene(sc, i);
        data::write_ppm(scene.image, c.out + "/images/" + synth_image_id(i) + ".ppm");
        all.insert(all.end(), scene.relationships.begin(), scene.relationships.end());
    }
    const auto split = data::split_dataset(all, fractions, sc.seed);
    data::write_annotations(all, c.out + "/annotations.tsv");
    data::write_annotations(split.train, c.out + "/train.tsv");
    data::write_annotations(split.val, c.out + "/val.tsv");
    data::write_annotations(split.test, c.out + "/test.tsv");
    synth_vocabulary(sc).save(c.out + "/vocab.tsv");
    finish(c, cfg, c.out);
    std::cout << "images=" << n << " relationships=" << all.size() << " train=" << split.train_ids.size()
              << " val=" << split.val_ids.size() << " test=" << split.test_ids.size() << '\n';
    return 0;
}

int cmd_cleanse(const Common& c, const std::string& input, const std::string& synonyms)
{
    auto cfg = make_config(c);
    const auto obj_min = cfg.get_size("cleanse.object_min", data::kDefaultObjectMinFrequency);
    const auto pred_min = cfg.get_size("cleanse.predicate_min", data::kDefaultPredicateMinFrequency);
    const bool strict = cfg.get_bool("cleanse.strict", true);
    const auto read = data::read_annotations(input, strict);
    const auto table = synonyms.empty() ? data::SynonymTable{} : data::SynonymTable::load(synonyms);
    const auto cleaned = data::cleanse_labels(read.annotations, table);
    const auto kept = data::frequency_filter(cleaned.annotations, obj_min, pred_min);
    const auto freq = data::count_labels(kept);
    prepare_out(c.out);
    data::write_annotations(kept, c.out + "/annotations.tsv");
    {
        std::ofstream f(c.out + "/cleanse_report.tsv");
        f << "read\t" << read.annotations.size() << "\nskipped_lines\t" << read.skipped << "\nempty_labels\t"
          << cleaned.dropped_empty << "\nkept\t" << kept.size() << "\nobject_classes\t" << freq.objects.size()
          << "\npredicate_classes\t" << freq.predicates.size() << '\n';
    }
    for (const auto& e : read.errors) std::cerr << "skipped: " << e << '\n';
    finish(c, cfg, c.out);
    std::cout << "read=" << read.annotations.size() << " skipped=" << read.skipped << " kept=" << kept.size()
              << " object_classes=" << freq.objects.size() << " predicate_classes=" << freq.predicates.size() << '\n';
    return 0;
}

int cmd_train(const Common& c, const std::string& data_flag, const std::string& init)
{
    auto cfg = make_config(c);
    const auto data_dir = path_setting(cfg, "data", data_flag);
    if (c.stage == "1-only") {
        cfg.set("model.pmps_conv_layer", "none");
        cfg.set("model.pmps_fc_layer", "none");
    }
    const auto vocab = load_vocab(data_dir);
    const auto mc = model_settings(cfg, vocab.objects.size(), vocab.predicates.size());
    auto tc = train_settings(cfg);
    const auto seed = cfg.get_u64("seed", 0);
    tc.run_stage2 = c.stage == "2";
    if (!init.empty()) tc.stage1_epochs = 0;
    if (!init.empty() && c.stage != "2") throw ConfigError("--init resumes into stage 2; use it with --stage 2");
    prepare_out(c.out);
    tc.diagnostic_path = c.out + "/diverged.ckpt";

    const auto train = load_samples(data_dir + "/train.tsv", data_dir + "/images", vocab);
    std::vector<Sample> val;
    if (fs::exists(data_dir + "/val.tsv") && fs::file_size(data_dir + "/val.tsv") > 0)
        val = load_samples(data_dir + "/val.tsv", data_dir + "/images", vocab);
    if (train.empty()) throw InputError("no training images in " + data_dir + "/train.tsv");

    std::optional<train::EmbeddingTable> emb;
    if (tc.stage1_target == train::TargetMode::word_vector)
        emb = train::EmbeddingTable::load(cfg.get_string("train.word_vectors", data_dir + "/word_vectors.tsv"));

    const bool scorer = tc.proposals.source == proposal::Source::anchor_scorer;
    const auto scfg = scorer ? std::optional(scorer_settings(cfg)) : std::nullopt;
    const auto scorer_epochs = scorer ? cfg.get_size("scorer.epochs", 4) : 0;
    const auto scorer_lr = scorer ? cfg.get_double("scorer.lr", 0.01) : 0.0;
    finish(c, cfg, c.out);

    VipModel<Real> model(mc, seed);
    if (!init.empty()) nn::load_checkpoint(model.params(), init + "/model.ckpt");
    train::Trainer<Real> trainer(model, tc, seed, &vocab, emb ? &*emb : nullptr);
    std::ofstream log(c.out + "/metrics.log");
    trainer.set_logger([&](const train::MetricsRecord& m) {
        const auto line = train::format_metrics(m);
        log << line << '\n' << std::flush;
        std::cout << line << '\n' << std::flush;
    });
    trainer.run(train, val);
    nn::save_checkpoint(model.params(), c.out + "/model.ckpt");
    vocab.save(c.out + "/vocab.tsv");

    if (scorer) {
        proposal::AnchorScorer<Real> sc(*scfg, Rng::derive(seed, 77).next());
        nn::Sgd sgd{scorer_lr, tc.momentum, tc.weight_decay, {}};
        Rng rng(Rng::derive(seed, 78).next());
        for (std::size_t e = 0; e < scorer_epochs; ++e) {
            double total = 0;
            for (const auto& s : train) {
                const auto pre = preprocess<Real>(s.image, std::min(s.image.width, s.image.height));
                total += sc.train_step(pre.image, s.objects, sgd, rng);
            }
            const auto line = "scorer epoch=" + std::to_string(e) + " loss=" + fmt(total / double(train.size()));
            log << line << '\n';
            std::cout << line << '\n';
        }
        nn::save_checkpoint(sc.params(), c.out + "/scorer.ckpt");
    }
    std::cout << "steps=" << trainer.steps() << " checkpoint=" << c.out << "/model.ckpt\n";
    return 0;
}

int cmd_eval(const Common& c, const std::string& data_flag, const std::string& model_dir, const std::string& split,
             bool ap)
{
    auto cfg = make_config(c, model_dir + "/config.resolved");
    const auto data_dir = path_setting(cfg, "data", data_flag);
    cfg.set("eval.model", model_dir);
    cfg.get_string("eval.model", model_dir);
    cfg.set("eval.split", split);
    cfg.get_string("eval.split", split);
    const auto vocab = load_vocab(model_dir);
    const auto mc = model_settings(cfg, vocab.objects.size(), vocab.predicates.size());
    const auto pc = proposal_settings(cfg);
    const auto ic = inference_settings(cfg);
    const auto seed = cfg.get_u64("seed", 0);
    const auto ns = cfg.get_sizes("eval.recall_n", {50, 100});
    const bool want_ap = cfg.get_bool("eval.ap", ap);
    const auto scfg = pc.source == proposal::Source::anchor_scorer ? std::optional(scorer_settings(cfg)) : std::nullopt;
    prepare_out(c.out);
    finish(c, cfg, c.out);

    VipModel<Real> model(mc, seed);
    nn::load_checkpoint(model.params(), model_dir + "/model.ckpt");
    const auto samples = load_samples(data_dir + "/" + split + ".tsv", data_dir + "/images", vocab);
    std::optional<proposal::AnchorScorer<Real>> scorer;
    ProposalFn source;
    if (scfg) {
        scorer.emplace(*scfg, 0);
        nn::load_checkpoint(scorer->params(), model_dir + "/scorer.ckpt");
        source = scorer_proposals(*scorer, pc.top_n);
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = evaluate_dataset(model, std::span<const Sample>(samples), pc, ic, seed, ns, source);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    eval::Results res;
    for (auto n : ns) res.push_back({"phrase_rec@" + std::to_string(n), r.phrase.rec_at.at(n)});
    for (auto n : ns) res.push_back({"relationship_rec@" + std::to_string(n), r.relationship.rec_at.at(n)});
    res.push_back({"images", double(samples.size())});
    res.push_back({"gt_relationships", double(r.phrase.total_gt)});
    res.push_back({"triplets_detected", double(r.timing.triplets_detected)});
    res.push_back({"seconds", secs});
    if (want_ap) {
        const auto aps = eval::object_class_ap(r.images, vocab.objects.size());
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < aps.size(); ++i) {
            res.push_back({"ap/" + vocab.objects[i], aps[i]});
            if (aps[i]) sum += *aps[i], ++n;
        }
        res.push_back({"map", n ? std::optional<double>(sum / double(n)) : std::nullopt});
    }
    {
        std::ofstream f(c.out + "/results.tsv");
        eval::write_results(f, res);
        std::ofstream d(c.out + "/detections.tsv");
        eval::write_detections(d, r.images, vocab);
    }
    eval::write_results(std::cout, res);
    return 0;
}

int cmd_nms_bench(const Common& c, const std::string& model_dir)
{
    auto cfg = make_config(c, model_dir.empty() ? "" : model_dir + "/config.resolved");
    const auto seed = cfg.get_u64("seed", 0);
    const auto n = cfg.get_size("bench.proposals", 250);
    const auto clusters = cfg.get_size("bench.clusters", 10);
    const auto jitter = cfg.get_double("bench.jitter", 0.22);
    const auto images = cfg.get_size("bench.images", 3);
    const auto thresholds = cfg.get_doubles("bench.thresholds", {0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0});
    const auto sc = synth_settings(cfg);
    auto pc = proposal_settings(cfg);
    pc.top_n = n;
    const auto vocab = model_dir.empty() ? synth_vocabulary(sc) : load_vocab(model_dir);
    const auto mc = model_settings(cfg, vocab.objects.size(), vocab.predicates.size());
    if (images == 0) throw ConfigError("bench.images must be >= 1");
    prepare_out(c.out);
    finish(c, cfg, c.out);

    VipModel<Real> model(mc, seed);
    if (!model_dir.empty()) nn::load_checkpoint(model.params(), model_dir + "/model.ckpt");

    std::map<double, std::size_t> survivors;
    std::size_t before = 0, after = 0;
    double t_pre = 0, t_post = 0;
    for (std::size_t i = 0; i < images; ++i) {
        const auto scene = synth_scene(sc, i);
        const ImageSize isz{double(scene.image.width), double(scene.image.height)};
        const auto boxes = proposal::clustered_proposals(isz, n, clusters, Rng::derive(seed, i).next(), jitter);
        const auto all = proposal::pair_into_triplets(boxes, pc.include_self_pairs);
        before += all.size();
        for (double thr : thresholds) survivors[thr] += triplet_nms(all, thr).size();
        after += triplet_nms(all, pc.nms_threshold).size();
        for (auto mode : {NmsMode::pre, NmsMode::post}) {
            InferenceConfig ic;
            ic.nms = mode;
            const auto t0 = std::chrono::steady_clock::now();
            infer_image(model, scene.image, boxes, pc, ic, seed);
            const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            (mode == NmsMode::pre ? t_pre : t_post) += dt;
        }
    }
    eval::Results res{{"images", double(images)},
                      {"proposals", double(n)},
                      {"clusters", double(clusters)},
                      {"threshold", pc.nms_threshold},
                      {"triplets_before", double(before) / double(images)},
                      {"triplets_after", double(after) / double(images)},
                      {"reduction", double(before) / double(std::max<std::size_t>(after, 1))},
                      {"reference_before", 62500.0},
                      {"reference_after", 1600.0},
                      {"pre_seconds", t_pre / double(images)},
                      {"post_seconds", t_post / double(images)},
                      {"speedup", t_post / t_pre}};
    {
        std::ofstream f(c.out + "/nms_bench.tsv");
        eval::write_results(f, res);
        std::ofstream s(c.out + "/nms_series.tsv");
        s << "threshold\tsurvivors\n";
        for (const auto& [thr, cnt] : survivors) s << fmt(thr) << '\t' << fmt(double(cnt) / double(images)) << '\n';
    }
    eval::write_results(std::cout, res);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"visual relationship detection with phrase-guided message passing"};
    app.require_subcommand(1);
    Common common;
    std::size_t images = 100;
    std::string input, synonyms, data_dir, model_dir, init, split = "test";
    bool ap = false;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(synth, common);
    synth->add_option("--images", images, "number of images")->check(CLI::PositiveNumber);

    auto* cleanse = app.add_subcommand("cleanse", "normalise labels and apply frequency thresholds");
    add_common(cleanse, common);
    cleanse->add_option("--in", input, "annotation file")->required();
    cleanse->add_option("--synonyms", synonyms, "raw TAB canonical table");

    auto* train = app.add_subcommand("train", "train the detector");
    add_common(train, common);
    train->add_option("--data", data_dir, "dataset directory");
    train->add_option("--stage", common.stage, "1 | 2 | 1-only")->check(CLI::IsMember({"1", "2", "1-only"}));
    train->add_option("--init", init, "directory of a stage-1 run to continue with stage 2");

    auto* ev = app.add_subcommand("eval", "evaluate a trained model");
    add_common(ev, common);
    ev->add_option("--data", data_dir, "dataset directory (defaults to the one the model was trained on)");
    ev->add_option("--model", model_dir, "training output directory")->required();
    ev->add_option("--split", split, "annotation split to evaluate");
    ev->add_option("--nms", common.nms, "pre | post | off | random-k [K]")->expected(1, 2);
    ev->add_flag("--ap", ap, "also report per-class object AP");

    auto* bench = app.add_subcommand("nms-bench", "triplet NMS reduction and placement timing");
    add_common(bench, common);
    bench->add_option("--model", model_dir, "training output directory (random weights when omitted)");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*synth) return cmd_synth(common, images);
        if (*cleanse) return cmd_cleanse(common, input, synonyms);
        if (*train) return cmd_train(common, data_dir, init);
        if (*ev) return cmd_eval(common, data_dir, model_dir, split, ap);
        if (*bench) return cmd_nms_bench(common, model_dir);
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
