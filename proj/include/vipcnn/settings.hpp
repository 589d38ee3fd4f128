#pragma once

// Config keys -> module configurations. All defaults live here.

#include <vipcnn/config.hpp>
#include <vipcnn/data.hpp>
#include <vipcnn/model.hpp>
#include <vipcnn/pipeline.hpp>
#include <vipcnn/proposal.hpp>
#include <vipcnn/training.hpp>

#include <array>
#include <string>

namespace vipcnn {

inline data::SynthConfig synth_settings(Config& c)
{
    data::SynthConfig s;
    s.width = c.get_size("synth.width", s.width);
    s.height = c.get_size("synth.height", s.height);
    s.colors = c.get_strings("synth.colors", s.colors);
    s.shapes = c.get_strings("synth.shapes", s.shapes);
    s.predicates = c.get_strings("synth.predicates", s.predicates);
    s.min_objects = c.get_size("synth.min_objects", s.min_objects);
    s.max_objects = c.get_size("synth.max_objects", s.max_objects);
    s.min_size = c.get_double("synth.min_size", s.min_size);
    s.max_size = c.get_double("synth.max_size", s.max_size);
    s.inside_prob = c.get_double("synth.inside_prob", s.inside_prob);
    s.max_overlap = c.get_double("synth.max_overlap", s.max_overlap);
    s.near_gap = c.get_double("synth.near_gap", s.near_gap);
    s.larger_ratio = c.get_double("synth.larger_ratio", s.larger_ratio);
    s.pixel_noise = c.get_double("synth.pixel_noise", s.pixel_noise);
    s.max_relationships = c.get_size("synth.max_relationships", s.max_relationships);
    s.retry_budget = c.get_size("synth.retry_budget", s.retry_budget);
    s.seed = c.get_u64("seed", 0);
    s.validate();
    return s;
}

inline std::array<double, 3> split_settings(Config& c)
{
    const auto f = c.get_doubles("synth.split", {0.7, 0.1, 0.2});
    if (f.size() != 3) throw ConfigError("synth.split needs three fractions (train,val,test)");
    return {f[0], f[1], f[2]};
}

// Ablations are expressed as config values so that the resolved config
// alone rebuilds the model.
inline void apply_ablation(Config& c, const std::string& ablation)
{
    if (ablation == "vip") return;
    if (ablation == "baseline") {
        c.set("model.pmps_conv_layer", "none");
        c.set("model.pmps_fc_layer", "none");
    } else if (ablation == "no-tie") {
        c.set("model.tie_subject_object", "false");
    } else {
        throw ConfigError("unknown ablation '" + ablation + "' (vip|baseline|no-tie)");
    }
}

inline ModelConfig model_settings(Config& c, std::size_t object_classes, std::size_t predicate_classes)
{
    ModelConfig m;
    m.image_min_side = c.get_size("model.image_min_side", m.image_min_side);
    m.trunk_channels = c.get_sizes("model.trunk_channels", {16, 32, 64, 64});
    m.trunk_pools = c.get_size("model.trunk_pools", 2);
    m.branch_channels = c.get_sizes("model.branch_channels", {64});
    m.roi_size = c.get_size("model.roi_size", 3);
    m.fc_widths = c.get_sizes("model.fc_widths", {128, 128});
    m.object_classes = c.get_size("model.object_classes", object_classes);
    m.predicate_classes = c.get_size("model.predicate_classes", predicate_classes);
    m.pmps_conv_layer = c.get_optional_size("model.pmps_conv_layer", m.branch_channels.empty()
                                                                         ? std::nullopt
                                                                         : std::optional<std::size_t>(m.branch_channels.size() - 1));
    m.pmps_fc_layer = c.get_optional_size("model.pmps_fc_layer", 0);
    m.pmps_split = c.get_double("model.pmps_split", m.pmps_split);
    m.tie_subject_object = c.get_bool("model.tie_subject_object", m.tie_subject_object);
    const auto scope = c.get_string("model.tie_scope", "all");
    if (scope == "all") m.tie_scope = TieScope::all;
    else if (scope == "fc") m.tie_scope = TieScope::fc;
    else throw ConfigError("model.tie_scope must be all or fc");
    m.word_vector_dim = c.get_size("model.word_vector_dim", m.word_vector_dim);
    m.triplet_chunk = c.get_size("model.triplet_chunk", m.triplet_chunk);
    m.validate();
    return m;
}

inline proposal::ProposalConfig proposal_settings(Config& c)
{
    proposal::ProposalConfig p;
    const auto src = c.get_string("proposal.source", "oracle-jitter");
    if (src == "oracle-jitter") p.source = proposal::Source::oracle_jitter;
    else if (src == "anchor-scorer") p.source = proposal::Source::anchor_scorer;
    else throw ConfigError("proposal.source must be oracle-jitter or anchor-scorer");
    p.top_n = c.get_size("proposal.top_n", p.top_n);
    p.nms_threshold = c.get_double("proposal.nms_threshold", p.nms_threshold);
    p.include_self_pairs = c.get_bool("proposal.include_self_pairs", p.include_self_pairs);
    p.copies_per_gt = c.get_size("proposal.copies_per_gt", p.copies_per_gt);
    p.center_jitter = c.get_double("proposal.center_jitter", p.center_jitter);
    p.scale_jitter = c.get_double("proposal.scale_jitter", p.scale_jitter);
    p.score_noise = c.get_double("proposal.score_noise", p.score_noise);
    p.negatives = c.get_size("proposal.negatives", p.negatives);
    p.negative_max_score = c.get_double("proposal.negative_max_score", p.negative_max_score);
    p.validate();
    return p;
}

inline proposal::AnchorScorerConfig scorer_settings(Config& c)
{
    proposal::AnchorScorerConfig a;
    a.channels = c.get_sizes("scorer.channels", a.channels);
    a.anchor_size = c.get_double("scorer.anchor_size", a.anchor_size);
    a.aspect_ratios = c.get_doubles("scorer.aspect_ratios", a.aspect_ratios);
    a.fg_iou = c.get_double("scorer.fg_iou", a.fg_iou);
    a.bg_iou = c.get_double("scorer.bg_iou", a.bg_iou);
    a.batch_anchors = c.get_size("scorer.batch_anchors", a.batch_anchors);
    a.nms = c.get_double("scorer.nms", a.nms);
    if (a.channels.empty() || a.aspect_ratios.empty()) throw ConfigError("scorer needs channels and aspect ratios");
    return a;
}

inline train::TrainConfig train_settings(Config& c)
{
    train::TrainConfig t;
    t.stage1_epochs = c.get_size("train.stage1_epochs", t.stage1_epochs);
    t.stage2_epochs = c.get_size("train.stage2_epochs", t.stage2_epochs);
    t.lr = c.get_double("train.lr", t.lr);
    t.momentum = c.get_double("train.momentum", t.momentum);
    t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
    t.stage2_lr_scale = c.get_double("train.stage2_lr_scale", t.stage2_lr_scale);
    t.lr_decay_epoch = c.get_size("train.lr_decay_epoch", t.lr_decay_epoch);
    t.lr_decay = c.get_double("train.lr_decay", t.lr_decay);
    t.frozen = c.get_strings("train.frozen", t.frozen);
    t.eval_interval = c.get_size("train.eval_interval", t.eval_interval);
    t.eval_images = c.get_size("train.eval_images", t.eval_images);
    t.recall_ns = c.get_sizes("eval.recall_n", t.recall_ns);
    const auto target = c.get_string("train.stage1_target", "class");
    if (target == "class") t.stage1_target = train::TargetMode::cls;
    else if (target == "word-vector") t.stage1_target = train::TargetMode::word_vector;
    else throw ConfigError("train.stage1_target must be class or word-vector");
    t.loss.lambda = c.get_double("train.lambda", t.loss.lambda);
    t.loss.fg_threshold = c.get_double("train.fg_threshold", t.loss.fg_threshold);
    t.loss.fg_fraction = c.get_double("train.fg_fraction", t.loss.fg_fraction);
    t.loss.batch_triplets = c.get_size("train.batch_triplets", t.loss.batch_triplets);
    t.loss.validate();
    t.proposals = proposal_settings(c);
    return t;
}

inline InferenceConfig inference_settings(Config& c)
{
    InferenceConfig i;
    i.nms = parse_nms_mode(c.get_string("eval.nms", "pre"));
    i.random_k = c.get_size("eval.random_k", i.random_k);
    i.labels_per_triplet = c.get_size("eval.labels_per_triplet", i.labels_per_triplet);
    i.keep_top = c.get_size("eval.keep_top", i.keep_top);
    if (i.labels_per_triplet == 0) throw ConfigError("eval.labels_per_triplet must be >= 1");
    return i;
}

} // namespace vipcnn
