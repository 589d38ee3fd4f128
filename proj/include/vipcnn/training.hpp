#pragma once

// Label assignment, multi-task loss, word-vector targets and the two-stage
// training loop.

#include <vipcnn/checkpoint.hpp>
#include <vipcnn/evaluation.hpp>
#include <vipcnn/layers.hpp>
#include <vipcnn/model.hpp>
#include <vipcnn/optim.hpp>
#include <vipcnn/pipeline.hpp>
#include <vipcnn/proposal.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace vipcnn::train {

using eval::GtRelationship;

enum class TargetMode { cls, word_vector };

struct LossConfig {
    double lambda = 1.0;
    double fg_threshold = 0.5;
    int stage = 1;
    TargetMode target_mode = TargetMode::cls;
    double fg_fraction = 0.25;
    std::size_t batch_triplets = 32;

    void validate() const
    {
        if (!(lambda >= 0)) throw ConfigError("loss.lambda must be >= 0");
        if (!(fg_threshold > 0 && fg_threshold < 1)) throw ConfigError("loss.fg_threshold must lie in (0,1)");
        if (stage != 1 && stage != 2) throw ConfigError("loss.stage must be 1 or 2");
        if (!(fg_fraction >= 0 && fg_fraction <= 1)) throw ConfigError("train.fg_fraction must lie in [0,1]");
        if (batch_triplets == 0) throw ConfigError("train.batch_triplets must be >= 1");
    }
};

struct LabeledTriplet {
    Triplet triplet;
    std::array<std::size_t, 3> u{0, 0, 0};             // subject, predicate, object
    std::array<std::optional<BoxOffsets>, 3> v;         // present iff u >= 1
    std::optional<std::size_t> gt;                      // stage 2: matched relationship

    bool any_foreground() const { return u[0] || u[1] || u[2]; }
    bool all_foreground() const { return u[0] && u[1] && u[2]; }
};

namespace detail {

inline const Box& branch_box(const Triplet& t, int b) { return b == 0 ? t.subject : b == 1 ? t.predicate : t.object; }

inline Box gt_box(const GtRelationship& g, int b) { return b == 0 ? g.subject : b == 1 ? g.phrase() : g.object; }

inline std::size_t gt_label(const GtRelationship& g, int b) { return b == 0 ? g.s : b == 1 ? g.p : g.o; }

} // namespace detail

// Each branch matched on its own: best IoU against the gt boxes of its kind
// (subject / union / object), lowest gt index on ties, foreground at
// IoU >= fg_threshold.
inline LabeledTriplet assign_labels_stage1(const Triplet& t, std::span<const GtRelationship> gt, const LossConfig& cfg)
{
    if (cfg.stage != 1) throw ConfigError("assign_labels_stage1 called with stage " + std::to_string(cfg.stage));
    LabeledTriplet l{t, {0, 0, 0}, {}, std::nullopt};
    for (int b = 0; b < 3; ++b) {
        double best = -1;
        std::optional<std::size_t> pick;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            const double ov = iou(detail::branch_box(t, b), detail::gt_box(gt[g], b));
            if (ov > best) best = ov, pick = g;
        }
        if (pick && best >= cfg.fg_threshold) {
            l.u[b] = detail::gt_label(gt[*pick], b);
            l.v[b] = encode_offsets(detail::branch_box(t, b), detail::gt_box(gt[*pick], b));
        }
    }
    return l;
}

// All three overlaps must clear fg_threshold against one relationship;
// among qualifying relationships the one with the largest minimum overlap
// wins (lowest index on ties). Otherwise all three are background.
inline LabeledTriplet assign_labels_stage2(const Triplet& t, std::span<const GtRelationship> gt, const LossConfig& cfg)
{
    if (cfg.stage != 2) throw ConfigError("assign_labels_stage2 called with stage " + std::to_string(cfg.stage));
    LabeledTriplet l{t, {0, 0, 0}, {}, std::nullopt};
    double best = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
        double m = 1;
        for (int b = 0; b < 3; ++b) m = std::min(m, iou(detail::branch_box(t, b), detail::gt_box(gt[g], b)));
        if (m >= cfg.fg_threshold && m > best) best = m, l.gt = g;
    }
    if (l.gt)
        for (int b = 0; b < 3; ++b) {
            l.u[b] = detail::gt_label(gt[*l.gt], b);
            l.v[b] = encode_offsets(detail::branch_box(t, b), detail::gt_box(gt[*l.gt], b));
        }
    return l;
}

inline LabeledTriplet assign_labels(const Triplet& t, std::span<const GtRelationship> gt, const LossConfig& cfg)
{
    return cfg.stage == 1 ? assign_labels_stage1(t, gt, cfg) : assign_labels_stage2(t, gt, cfg);
}

template <typename T>
struct LossBreakdown {
    nn::Var<T> total;
    std::array<double, 3> cls{0, 0, 0};
    std::array<double, 3> reg{0, 0, 0};
};

// Regression targets for branch b: offsets of class u in columns
// 4(u-1)..4(u-1)+3, mask 1 there and 0 elsewhere; background rows are all 0.
template <typename T>
std::pair<nn::Tensor<T>, nn::Tensor<T>> regression_targets(std::span<const LabeledTriplet> labels, int b,
                                                           std::size_t fg_classes)
{
    nn::Tensor<T> target({labels.size(), 4 * fg_classes}), mask({labels.size(), 4 * fg_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto u = labels[i].u[b];
        if (u == 0) continue;
        if (u > fg_classes) throw InputError("label exceeds class count");
        const auto& v = *labels[i].v[b];
        const std::array<double, 4> t{v.tx, v.ty, v.tw, v.th};
        for (std::size_t c = 0; c < 4; ++c) {
            target.at(i, 4 * (u - 1) + c) = T(t[c]);
            mask.at(i, 4 * (u - 1) + c) = T(1);
        }
    }
    return {std::move(target), std::move(mask)};
}

// Sum over branches of softmax cross-entropy plus lambda * smooth-L1 on the
// offsets of the target class; background rows carry no regression term.
template <typename T>
LossBreakdown<T> multi_task_loss(const std::array<nn::Var<T>, 3>& cls, const std::array<nn::Var<T>, 3>& reg,
                                 std::span<const LabeledTriplet> labels, const LossConfig& cfg)
{
    LossBreakdown<T> out;
    std::optional<nn::Var<T>> total;
    for (int b = 0; b < 3; ++b) {
        if (cls[b].shape().at(0) != labels.size() || reg[b].shape().at(0) != labels.size())
            throw DimensionError("multi_task_loss: batch of " + std::to_string(labels.size()) +
                                 " labels against predictions of " + std::to_string(cls[b].shape().at(0)));
        if (reg[b].shape().at(1) + 4 != 4 * cls[b].shape().at(1))
            throw DimensionError("multi_task_loss: regression width " + std::to_string(reg[b].shape().at(1)) +
                                 " does not match " + std::to_string(cls[b].shape().at(1)) + " classes");
        std::vector<std::size_t> u;
        for (const auto& l : labels) u.push_back(l.u[b]);
        nn::Var<T> lb = nn::softmax_cross_entropy(cls[b], std::span<const std::size_t>(u));
        out.cls[b] = double(lb.value()[0]);
        if (cfg.lambda != 0) {
            auto [target, mask] = regression_targets<T>(labels, b, cls[b].shape()[1] - 1);
            nn::Var<T> r = nn::smooth_l1(reg[b], target, mask);
            out.reg[b] = double(r.value()[0]);
            lb = nn::add(lb, nn::scale(r, T(cfg.lambda)));
        }
        total = total ? nn::add(*total, lb) : lb;
    }
    out.total = *total;
    return out;
}

// ---------------------------------------------------------------------------
// Word-vector targets

inline const std::string kBackgroundLabel = "__background__";

// label TAB space-separated vector, one per line; the background label maps
// to the zero vector unless listed.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const { return dim_; }

    void add(const std::string& label, std::vector<double> v)
    {
        if (dim_ == 0) dim_ = v.size();
        if (v.size() != dim_)
            throw DimensionError("embedding for '" + label + "' has " + std::to_string(v.size()) + " values, expected " +
                                 std::to_string(dim_));
        table_[label] = std::move(v);
    }

    bool contains(const std::string& label) const { return table_.count(label) || label == kBackgroundLabel; }

    std::vector<double> at(const std::string& label) const
    {
        auto it = table_.find(label);
        if (it != table_.end()) return it->second;
        if (label == kBackgroundLabel) return std::vector<double>(dim_, 0.0);
        throw InputError("no embedding for label '" + label + "'");
    }

    static EmbeddingTable load(std::istream& is)
    {
        EmbeddingTable t;
        std::string line;
        std::size_t no = 0;
        while (std::getline(is, line)) {
            ++no;
            if (line.empty() || line[0] == '#') continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw ParseError("embedding: expected label TAB values", no);
            std::istringstream vs(line.substr(tab + 1));
            std::vector<double> v;
            double x;
            while (vs >> x) v.push_back(x);
            if (!vs.eof() || v.empty()) throw ParseError("embedding: malformed vector", no);
            try {
                t.add(data::normalize_label(line.substr(0, tab)), std::move(v));
            } catch (const DimensionError& e) {
                throw ParseError(e.what(), no);
            }
        }
        return t;
    }

    static EmbeddingTable load(const std::string& path)
    {
        std::ifstream f(path);
        if (!f) throw InputError("cannot read " + path);
        return load(f);
    }

private:
    std::size_t dim_ = 0;
    std::map<std::string, std::vector<double>> table_;
};

// Smooth-L1 between projected features [n, D] and the labels' embeddings,
// normalized per element.
template <typename T>
nn::Var<T> word_vector_loss(nn::Var<T> projected, const EmbeddingTable& table, std::span<const std::string> labels)
{
    const auto& s = projected.shape();
    if (s.size() != 2 || s[0] != labels.size() || s[1] != table.dim())
        throw DimensionError("word_vector_loss: prediction " + nn::shape_str(s) + " against " +
                             std::to_string(labels.size()) + " labels of dim " + std::to_string(table.dim()));
    nn::Tensor<T> target({labels.size(), table.dim()}), mask({labels.size(), table.dim()}, T(1));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto v = table.at(labels[i]);
        for (std::size_t j = 0; j < v.size(); ++j) target.at(i, j) = T(v[j]);
    }
    return nn::smooth_l1(projected, target, mask);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::size_t stage1_epochs = 4;
    std::size_t stage2_epochs = 4;
    bool run_stage2 = true;
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    double stage2_lr_scale = 1.0;
    std::size_t lr_decay_epoch = 0; // within each stage, epochs from here on run at lr * lr_decay
    double lr_decay = 0.1;
    std::vector<std::string> frozen{"trunk.conv0."};
    std::size_t eval_interval = 0;  // steps; 0 = end of each epoch
    std::size_t eval_images = 0;    // 0 = all validation samples
    std::vector<std::size_t> recall_ns{50, 100};
    TargetMode stage1_target = TargetMode::cls;
    LossConfig loss;
    proposal::ProposalConfig proposals;
    std::string diagnostic_path; // where to dump parameters on a non-finite loss
};

struct StepStats {
    double total = 0;
    std::array<double, 3> cls{0, 0, 0}, reg{0, 0, 0};
    std::size_t batch = 0, foreground = 0;
};

struct MetricsRecord {
    std::size_t step = 0;
    int stage = 1;
    std::size_t epoch = 0;
    StepStats mean;
    std::optional<double> phrase_r50, phrase_r100, rel_r50, rel_r100;
};

inline std::string format_metrics(const MetricsRecord& m)
{
    auto opt = [](const std::optional<double>& v) { return v ? data::detail::format_number(*v) : std::string("NA"); };
    std::ostringstream os;
    os << "step=" << m.step << " stage=" << m.stage << " epoch=" << m.epoch
       << " loss=" << data::detail::format_number(m.mean.total)
       << " cls_s=" << data::detail::format_number(m.mean.cls[0]) << " cls_p=" << data::detail::format_number(m.mean.cls[1])
       << " cls_o=" << data::detail::format_number(m.mean.cls[2]) << " reg_s=" << data::detail::format_number(m.mean.reg[0])
       << " reg_p=" << data::detail::format_number(m.mean.reg[1]) << " reg_o=" << data::detail::format_number(m.mean.reg[2])
       << " phrase_r50=" << opt(m.phrase_r50) << " phrase_r100=" << opt(m.phrase_r100)
       << " rel_r50=" << opt(m.rel_r50) << " rel_r100=" << opt(m.rel_r100);
    return os.str();
}

// Sample a minibatch: up to fg_fraction * B foreground triplets (any branch
// foreground in stage 1, all three in stage 2), the rest background.
inline std::vector<LabeledTriplet> sample_batch(std::vector<LabeledTriplet> labeled, const LossConfig& cfg, Rng& rng)
{
    std::vector<LabeledTriplet> fg, bg;
    for (auto& l : labeled) {
        const bool is_fg = cfg.stage == 1 ? l.any_foreground() : l.all_foreground();
        (is_fg ? fg : bg).push_back(std::move(l));
    }
    rng.shuffle(fg.begin(), fg.end());
    rng.shuffle(bg.begin(), bg.end());
    const auto want_fg = std::size_t(std::llround(cfg.fg_fraction * double(cfg.batch_triplets)));
    fg.resize(std::min(fg.size(), want_fg));
    bg.resize(std::min(bg.size(), cfg.batch_triplets - fg.size()));
    fg.insert(fg.end(), std::make_move_iterator(bg.begin()), std::make_move_iterator(bg.end()));
    return fg;
}

template <typename T>
class Trainer {
public:
    using Logger = std::function<void(const MetricsRecord&)>;

    Trainer(VipModel<T>& model, TrainConfig cfg, std::uint64_t seed, const data::Vocabulary* vocab = nullptr,
            const EmbeddingTable* embeddings = nullptr)
        : model_(model), cfg_(std::move(cfg)), seed_(seed), vocab_(vocab), emb_(embeddings)
    {
        cfg_.loss.validate();
        cfg_.proposals.validate();
        if (cfg_.stage1_target == TargetMode::word_vector) {
            if (!vocab_ || !emb_) throw ConfigError("word-vector targets need a vocabulary and an embedding table");
            if (model_.config().word_vector_dim != emb_->dim())
                throw ConfigError("model.word_vector_dim does not match the embedding table");
        }
    }

    void set_logger(Logger l) { log_ = std::move(l); }
    std::size_t steps() const { return step_; }
    const std::vector<MetricsRecord>& history() const { return history_; }

    // Labeled candidate triplets of one sample for a given draw.
    std::vector<LabeledTriplet> labeled_triplets(const Sample& s, const LossConfig& lc, std::uint64_t draw) const
    {
        const auto boxes = proposal::oracle_jitter({double(s.image.width), double(s.image.height)}, s.objects,
                                                   cfg_.proposals, draw);
        const auto trip = proposal::pair_into_triplets(boxes, cfg_.proposals.include_self_pairs);
        std::vector<LabeledTriplet> out;
        out.reserve(trip.size());
        for (const auto& t : trip) out.push_back(assign_labels(t, s.gt, lc));
        return out;
    }

    // One SGD step on a labeled batch of one image.
    StepStats step(const Preprocessed<T>& pre, std::span<const LabeledTriplet> batch, const LossConfig& lc,
                   const nn::Sgd& sgd)
    {
        std::vector<Triplet> ts;
        for (const auto& l : batch) ts.push_back(l.triplet);
        nn::Tape<T> tape;
        tape.set_frozen([&](const nn::Parameter<T>& p) { return sgd.is_frozen(p); });
        const auto maps = model_.feature_maps(tape, pre.image);
        const auto h = model_.heads(tape, maps, ts, pre.scale);
        StepStats st;
        st.batch = batch.size();
        for (const auto& l : batch) st.foreground += l.any_foreground();
        nn::Var<T> loss;
        if (lc.target_mode == TargetMode::word_vector) {
            std::optional<nn::Var<T>> total;
            for (int b = 0; b < 3; ++b) {
                std::vector<std::string> names;
                for (const auto& l : batch) {
                    const auto u = l.u[b];
                    names.push_back(u == 0 ? kBackgroundLabel
                                           : b == 1 ? vocab_->predicates.at(u - 1) : vocab_->objects.at(u - 1));
                }
                nn::Var<T> wl = word_vector_loss(*h.vec[b], *emb_, std::span<const std::string>(names));
                st.cls[b] = double(wl.value()[0]);
                if (lc.lambda != 0) {
                    auto [target, mask] = regression_targets<T>(batch, b, model_.num_classes(b) - 1);
                    nn::Var<T> r = nn::smooth_l1(h.reg[b], target, mask);
                    st.reg[b] = double(r.value()[0]);
                    wl = nn::add(wl, nn::scale(r, T(lc.lambda)));
                }
                total = total ? nn::add(*total, wl) : wl;
            }
            loss = *total;
        } else {
            auto lb = multi_task_loss(h.cls, h.reg, batch, lc);
            st.cls = lb.cls;
            st.reg = lb.reg;
            loss = lb.total;
        }
        st.total = double(loss.value()[0]);
        if (!std::isfinite(st.total)) {
            std::string where;
            if (!cfg_.diagnostic_path.empty()) {
                nn::save_checkpoint(model_.params(), cfg_.diagnostic_path);
                where = "; parameters written to " + cfg_.diagnostic_path;
            }
            throw NumericError("non-finite loss at step " + std::to_string(step_) + " (stage " +
                               std::to_string(lc.stage) + ")" + where);
        }
        model_.params().zero_grad();
        tape.backward(loss);
        sgd.step(model_.params());
        ++step_;
        return st;
    }

    // Full schedule over the training samples; val samples feed the recall
    // columns of the metrics log.
    void run(std::span<const Sample> train, std::span<const Sample> val = {})
    {
        std::vector<Preprocessed<T>> pre;
        pre.reserve(train.size());
        for (const auto& s : train) pre.push_back(preprocess<T>(s.image, model_.config().image_min_side));

        auto run_stage = [&](int stage, std::size_t epochs) {
            LossConfig lc = cfg_.loss;
            lc.stage = stage;
            lc.target_mode = stage == 1 ? cfg_.stage1_target : TargetMode::cls;
            model_.set_messages(stage == 2 && model_.has_pmps());
            nn::Sgd sgd{cfg_.lr * (stage == 2 ? cfg_.stage2_lr_scale : 1.0), cfg_.momentum, cfg_.weight_decay,
                        cfg_.frozen};
            if (stage == 1) sgd.frozen.push_back("pmps.");
            for (auto* p : model_.params().all()) p->velocity.fill(T(0));
            Rng order_rng = Rng::derive(seed_, 1000 + std::uint64_t(stage));
            StepStats acc;
            std::size_t n_acc = 0;
            for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
                std::vector<std::size_t> order(train.size());
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                order_rng.shuffle(order.begin(), order.end());
                if (cfg_.lr_decay_epoch && epoch == cfg_.lr_decay_epoch) sgd.lr *= cfg_.lr_decay;
                for (auto i : order) {
                    const std::uint64_t draw = Rng::derive(seed_ ^ name_tag(train[i].image_id),
                                                           std::uint64_t(stage) * 100003 + epoch).next();
                    Rng batch_rng(draw + 1);
                    auto batch = sample_batch(labeled_triplets(train[i], lc, draw), lc, batch_rng);
                    if (batch.empty()) continue;
                    const auto st = step(pre[i], batch, lc, sgd);
                    accumulate(acc, st);
                    ++n_acc;
                    if (cfg_.eval_interval && step_ % cfg_.eval_interval == 0) emit(stage, epoch, acc, n_acc, val);
                }
                if (!cfg_.eval_interval) emit(stage, epoch, acc, n_acc, val);
            }
        };
        run_stage(1, cfg_.stage1_epochs);
        if (cfg_.run_stage2) run_stage(2, cfg_.stage2_epochs);
        model_.set_messages(model_.has_pmps() && cfg_.run_stage2);
    }

private:
    static void accumulate(StepStats& acc, const StepStats& st)
    {
        acc.total += st.total;
        for (int b = 0; b < 3; ++b) acc.cls[b] += st.cls[b], acc.reg[b] += st.reg[b];
        acc.batch += st.batch;
        acc.foreground += st.foreground;
    }

    void emit(int stage, std::size_t epoch, StepStats& acc, std::size_t& n, std::span<const Sample> val)
    {
        MetricsRecord m;
        m.step = step_;
        m.stage = stage;
        m.epoch = epoch;
        if (n) {
            m.mean.total = acc.total / double(n);
            for (int b = 0; b < 3; ++b) m.mean.cls[b] = acc.cls[b] / double(n), m.mean.reg[b] = acc.reg[b] / double(n);
            m.mean.batch = acc.batch;
            m.mean.foreground = acc.foreground;
        }
        if (!val.empty() && (stage == 2 || cfg_.stage1_target == TargetMode::cls)) {
            const auto subset = cfg_.eval_images ? val.first(std::min(val.size(), cfg_.eval_images)) : val;
            InferenceConfig ic;
            const auto r = evaluate_dataset(model_, subset, cfg_.proposals, ic, seed_, cfg_.recall_ns);
            auto get = [&](const eval::EvalResult& e, std::size_t n) -> std::optional<double> {
                auto it = e.rec_at.find(n);
                return it == e.rec_at.end() ? std::nullopt : it->second;
            };
            m.phrase_r50 = get(r.phrase, 50);
            m.phrase_r100 = get(r.phrase, 100);
            m.rel_r50 = get(r.relationship, 50);
            m.rel_r100 = get(r.relationship, 100);
        }
        acc = {};
        n = 0;
        history_.push_back(m);
        if (log_) log_(m);
    }

    VipModel<T>& model_;
    TrainConfig cfg_;
    std::uint64_t seed_;
    const data::Vocabulary* vocab_;
    const EmbeddingTable* emb_;
    Logger log_;
    std::size_t step_ = 0;
    std::vector<MetricsRecord> history_;
};

} // namespace vipcnn::train
