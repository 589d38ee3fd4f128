#pragma once

// Phrase-guided message passing between the subject, predicate and object
// branches.
//
//   plain:      h_*^l     = f(W_* (x) h_*^{l-1} + b_*)
//   gather:     h_p^l     = f(W_p (x) h_p^{l-1} + W_{p<-s} (x) h_s^l + W_{p<-o} (x) h_o^l + b_p)
//   broadcast:  h_s^{l+1} = f(W_s (x) h_s^l + W_{s<-p} (x) h_p^{l+1} + b_s)   (object alike)
//
// (x) is a matrix product for fc layers and a convolution for conv layers;
// message kernels of conv layers are 1x1 and carry no bias. f is ReLU.
//
// Pre-activations are always summed as ((main + bias) + message_1) + message_2,
// so zero message weights reproduce the plain layer bit for bit.

#include <vipcnn/layers.hpp>

#include <string>
#include <utility>

namespace vipcnn::pmps {

using nn::Parameter;
using nn::Var;

enum class LayerKind { fc, conv };

template <typename T>
struct MainParams {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
};

// One PMPS-capable layer. With subject/object tying the `s` and `o` main
// parameters point at the same Parameter objects; message matrices are
// always distinct.
template <typename T>
struct PmpsLayerParams {
    LayerKind kind = LayerKind::fc;
    std::size_t pad = 0; // main conv padding (stride is 1)
    MainParams<T> s, p, o;
    Parameter<T>* p_from_s = nullptr;
    Parameter<T>* p_from_o = nullptr;
    Parameter<T>* s_from_p = nullptr;
    Parameter<T>* o_from_p = nullptr;

    bool tied() const { return s.w == o.w && s.b == o.b; }
};

template <typename T>
struct BranchFeatures {
    Var<T> s, p, o;
};

namespace detail {

template <typename T>
Var<T> main_term(LayerKind kind, Var<T> x, const MainParams<T>& m, std::size_t pad, const char* branch)
{
    auto& tape = *x.tape;
    try {
        if (kind == LayerKind::fc) return nn::linear(x, tape.param(*m.w), tape.param(*m.b));
        return nn::conv2d(x, tape.param(*m.w), tape.param(*m.b), 1, pad);
    } catch (const DimensionError& e) {
        throw DimensionError(std::string(branch) + " branch main path: " + e.what());
    }
}

// Bias-free message W_{dst<-src} (x) src; checks the weight against both ends
// of the path so a mismatch names the offending flow.
template <typename T>
Var<T> message_term(LayerKind kind, Var<T> src, Parameter<T>& m, std::size_t dst_width, const char* path)
{
    const auto& ms = m.value.shape();
    const std::size_t src_width = src.shape().at(1);
    const bool ok = kind == LayerKind::fc ? (ms.size() == 2 && ms[0] == dst_width && ms[1] == src_width)
                                          : (ms.size() == 4 && ms[0] == dst_width && ms[1] == src_width &&
                                             ms[2] == 1 && ms[3] == 1);
    if (!ok)
        throw DimensionError(std::string("message path ") + path + ": weight " + nn::shape_str(ms) +
                             " incompatible with source width " + std::to_string(src_width) +
                             " and destination width " + std::to_string(dst_width));
    auto& tape = *src.tape;
    if (kind == LayerKind::fc) return nn::linear(src, tape.param(m));
    return nn::conv2d(src, tape.param(m));
}

template <typename T>
std::size_t width(const Var<T>& v)
{
    return v.shape().at(1);
}

} // namespace detail

template <typename T>
Var<T> plain_layer(LayerKind kind, Var<T> x, const MainParams<T>& m, std::size_t pad = 0, const char* branch = "plain")
{
    return nn::relu(detail::main_term(kind, x, m, pad, branch));
}

// Predicate at layer l gathering from the subject/object outputs of layer l.
template <typename T>
Var<T> gather_layer(LayerKind kind, Var<T> p_prev, Var<T> s_l, Var<T> o_l, const MainParams<T>& main_p,
                    Parameter<T>& p_from_s, Parameter<T>& p_from_o, std::size_t pad = 0)
{
    Var<T> pre = detail::main_term(kind, p_prev, main_p, pad, "predicate");
    const std::size_t dst = detail::width(pre);
    pre = nn::add(pre, detail::message_term(kind, s_l, p_from_s, dst, "subject->predicate"));
    pre = nn::add(pre, detail::message_term(kind, o_l, p_from_o, dst, "object->predicate"));
    return nn::relu(pre);
}

// Subject/object at layer l+1 receiving the predicate output of layer l+1.
template <typename T>
std::pair<Var<T>, Var<T>> broadcast_layer(LayerKind kind, Var<T> s_l, Var<T> o_l, Var<T> p_next,
                                          const MainParams<T>& main_s, const MainParams<T>& main_o,
                                          Parameter<T>& s_from_p, Parameter<T>& o_from_p, std::size_t pad = 0)
{
    Var<T> ps = detail::main_term(kind, s_l, main_s, pad, "subject");
    ps = nn::add(ps, detail::message_term(kind, p_next, s_from_p, detail::width(ps), "predicate->subject"));
    Var<T> po = detail::main_term(kind, o_l, main_o, pad, "object");
    po = nn::add(po, detail::message_term(kind, p_next, o_from_p, detail::width(po), "predicate->object"));
    return {nn::relu(ps), nn::relu(po)};
}

// Two adjacent layers: gather at `first`, broadcast at `second`. With
// messages off both layers are plain per-branch layers.
template <typename T>
BranchFeatures<T> sequential_pmps(const BranchFeatures<T>& x, const PmpsLayerParams<T>& first,
                                  const PmpsLayerParams<T>& second, bool messages = true)
{
    BranchFeatures<T> l;
    l.s = plain_layer(first.kind, x.s, first.s, first.pad, "subject");
    l.o = plain_layer(first.kind, x.o, first.o, first.pad, "object");
    l.p = messages ? gather_layer(first.kind, x.p, l.s, l.o, first.p, *first.p_from_s, *first.p_from_o, first.pad)
                   : plain_layer(first.kind, x.p, first.p, first.pad, "predicate");

    BranchFeatures<T> n;
    n.p = plain_layer(second.kind, l.p, second.p, second.pad, "predicate");
    if (messages) {
        auto [s, o] = broadcast_layer(second.kind, l.s, l.o, n.p, second.s, second.o, *second.s_from_p,
                                      *second.o_from_p, second.pad);
        n.s = s;
        n.o = o;
    } else {
        n.s = plain_layer(second.kind, l.s, second.s, second.pad, "subject");
        n.o = plain_layer(second.kind, l.o, second.o, second.pad, "object");
    }
    return n;
}

// Single layer split into a gather sub-branch (first `gather_width` units)
// and a broadcast sub-branch (the rest); each branch's output is the
// concatenation [gather | broadcast].
template <typename T>
BranchFeatures<T> parallel_pmps(const BranchFeatures<T>& x, const PmpsLayerParams<T>& layer, std::size_t gather_width,
                                std::size_t broadcast_width, bool messages = true)
{
    const std::size_t total = layer.s.w->value.dim(0);
    if (gather_width == 0 || broadcast_width == 0 || gather_width + broadcast_width != total ||
        layer.p.w->value.dim(0) != total || layer.o.w->value.dim(0) != total)
        throw ConfigError("parallel_pmps: split widths " + std::to_string(gather_width) + "+" +
                          std::to_string(broadcast_width) + " do not sum to branch width " + std::to_string(total));

    const auto kind = layer.kind;
    const Var<T> pre_s = detail::main_term(kind, x.s, layer.s, layer.pad, "subject");
    const Var<T> pre_p = detail::main_term(kind, x.p, layer.p, layer.pad, "predicate");
    const Var<T> pre_o = detail::main_term(kind, x.o, layer.o, layer.pad, "object");
    if (!messages) return {nn::relu(pre_s), nn::relu(pre_p), nn::relu(pre_o)};

    const std::size_t g = gather_width;
    // gather sub-branch
    const Var<T> s_g = nn::relu(nn::slice_channels(pre_s, 0, g));
    const Var<T> o_g = nn::relu(nn::slice_channels(pre_o, 0, g));
    Var<T> pg = nn::slice_channels(pre_p, 0, g);
    pg = nn::add(pg, detail::message_term(kind, s_g, *layer.p_from_s, g, "subject->predicate"));
    pg = nn::add(pg, detail::message_term(kind, o_g, *layer.p_from_o, g, "object->predicate"));
    const Var<T> p_g = nn::relu(pg);

    // broadcast sub-branch
    const Var<T> p_b = nn::relu(nn::slice_channels(pre_p, g, total));
    Var<T> sb = nn::slice_channels(pre_s, g, total);
    sb = nn::add(sb, detail::message_term(kind, p_b, *layer.s_from_p, broadcast_width, "predicate->subject"));
    Var<T> ob = nn::slice_channels(pre_o, g, total);
    ob = nn::add(ob, detail::message_term(kind, p_b, *layer.o_from_p, broadcast_width, "predicate->object"));
    const Var<T> s_b = nn::relu(sb), o_b = nn::relu(ob);

    return {nn::concat_channels<T>({s_g, s_b}), nn::concat_channels<T>({p_g, p_b}),
            nn::concat_channels<T>({o_g, o_b})};
}

} // namespace vipcnn::pmps
