#pragma once

// Synthetic relationship scenes, annotation files, label cleansing and
// dataset splitting.
//
// Annotation line grammar (UTF-8, one relationship per line):
//   image_id TAB subject TAB predicate TAB object TAB sx1,sy1,sx2,sy2 TAB ox1,oy1,ox2,oy2

#include <vipcnn/errors.hpp>
#include <vipcnn/geometry.hpp>
#include <vipcnn/rng.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace vipcnn::data {

struct Image {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb; // row-major, interleaved

    bool empty() const { return width == 0 || height == 0 || rgb.empty(); }
    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
    friend bool operator==(const Image&, const Image&) = default;
};

inline void write_ppm(const Image& img, const std::string& path)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write " + path);
    f << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
}

inline Image read_ppm(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read " + path);
    auto token = [&]() {
        std::string t;
        char c;
        while (f.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(f, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty()) break;
                continue;
            }
            t.push_back(c);
        }
        return t;
    };
    if (token() != "P6") throw InputError(path + ": not a binary PPM");
    Image img;
    try {
        img.width = std::stoul(token());
        img.height = std::stoul(token());
        if (std::stoul(token()) != 255) throw InputError(path + ": only 8-bit PPM supported");
    } catch (const std::logic_error&) {
        throw InputError(path + ": malformed PPM header");
    }
    img.rgb.resize(img.width * img.height * 3);
    f.read(reinterpret_cast<char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
    if (f.gcount() != std::streamsize(img.rgb.size())) throw InputError(path + ": truncated pixel data");
    return img;
}

struct RelationshipAnnotation {
    std::string image_id;
    std::string subject, predicate, object;
    Box subject_box, object_box;

    Box union_box() const { return vipcnn::union_box(subject_box, object_box); }
    friend bool operator==(const RelationshipAnnotation&, const RelationshipAnnotation&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class Shape { circle, square, triangle };

struct ObjectStyle {
    std::string name;
    std::array<int, 3> color;
    Shape shape;
};

inline const std::vector<std::string>& default_predicates()
{
    static const std::vector<std::string> p{"left-of", "above", "inside", "overlapping", "larger-than", "near"};
    return p;
}

struct SynthConfig {
    std::size_t width = 64, height = 64;
    std::vector<std::string> colors{"red", "blue"};
    std::vector<std::string> shapes{"circle", "square", "triangle"};
    std::vector<std::string> predicates = default_predicates();
    std::size_t min_objects = 2, max_objects = 4;
    double min_size = 10, max_size = 24;
    double inside_prob = 0.2;   // chance an object is placed inside an earlier one
    double max_overlap = 0.3;   // IoU cap between freely placed objects
    double near_gap = 6;        // gap below which disjoint objects are "near"
    double larger_ratio = 3.0;  // area ratio for "larger-than"
    double pixel_noise = 8;     // std of additive pixel noise
    std::size_t max_relationships = 0; // 0 = keep every decidable pair
    std::size_t retry_budget = 200;
    std::uint64_t seed = 0;

    std::vector<ObjectStyle> styles() const
    {
        static const std::map<std::string, std::array<int, 3>> palette{
            {"red", {210, 40, 40}},    {"green", {40, 180, 60}},   {"blue", {40, 70, 210}},
            {"yellow", {220, 210, 40}}, {"magenta", {200, 50, 200}}, {"cyan", {40, 200, 210}}};
        static const std::map<std::string, Shape> kinds{
            {"circle", Shape::circle}, {"square", Shape::square}, {"triangle", Shape::triangle}};
        std::vector<ObjectStyle> out;
        for (const auto& c : colors) {
            auto pc = palette.find(c);
            if (pc == palette.end()) throw ConfigError("unknown synth color " + c);
            for (const auto& s : shapes) {
                auto ps = kinds.find(s);
                if (ps == kinds.end()) throw ConfigError("unknown synth shape " + s);
                out.push_back({c + "-" + s, pc->second, ps->second});
            }
        }
        return out;
    }

    void validate() const
    {
        if (width < 8 || height < 8) throw ConfigError("synth image too small");
        if (min_objects < 2 || max_objects < min_objects) throw ConfigError("synth objects range invalid");
        if (!(min_size > 1 && max_size >= min_size)) throw ConfigError("synth size range invalid");
        if (max_size >= double(std::min(width, height))) throw ConfigError("synth max_size exceeds image");
        if (predicates.empty()) throw ConfigError("synth predicate set empty");
        for (const auto& p : predicates)
            if (std::find(default_predicates().begin(), default_predicates().end(), p) == default_predicates().end())
                throw ConfigError("predicate '" + p + "' is not decidable from geometry");
    }
};

// Predicate that holds for an ordered (subject, object) pair, by precedence
// inside > overlapping > larger-than > near > left-of > above. Only
// predicates enabled in the config are considered.
inline std::optional<std::string> decide_predicate(const Box& s, const Box& o, const SynthConfig& cfg)
{
    auto enabled = [&](const char* p) {
        return std::find(cfg.predicates.begin(), cfg.predicates.end(), p) != cfg.predicates.end();
    };
    const double ix = std::min(s.x2, o.x2) - std::max(s.x1, o.x1);
    const double iy = std::min(s.y2, o.y2) - std::max(s.y1, o.y1);
    const bool intersect = ix > 0 && iy > 0;
    if (o.contains(s)) return enabled("inside") ? std::optional<std::string>("inside") : std::nullopt;
    if (intersect) {
        if (s.contains(o)) return enabled("larger-than") ? std::optional<std::string>("larger-than") : std::nullopt;
        return enabled("overlapping") ? std::optional<std::string>("overlapping") : std::nullopt;
    }
    if (enabled("larger-than") && s.area() >= cfg.larger_ratio * o.area()) return "larger-than";
    const double gap = std::max(-ix, -iy);
    if (enabled("near") && gap < cfg.near_gap) return "near";
    if (enabled("left-of") && s.x2 <= o.x1) return "left-of";
    if (enabled("above") && s.y2 <= o.y1) return "above";
    return std::nullopt;
}

// Independent check used by tests: does `pred` hold for (s, o)?
inline bool predicate_holds(const std::string& pred, const Box& s, const Box& o, const SynthConfig& cfg)
{
    if (pred == "inside") return o.contains(s);
    if (pred == "overlapping") return iou(s, o) > 0 && !o.contains(s) && !s.contains(o);
    if (pred == "larger-than") return s.contains(o) || s.area() >= cfg.larger_ratio * o.area();
    if (pred == "near") return iou(s, o) == 0 && std::max(std::max(s.x1, o.x1) - std::min(s.x2, o.x2),
                                                          std::max(s.y1, o.y1) - std::min(s.y2, o.y2)) < cfg.near_gap;
    if (pred == "left-of") return s.cx() < o.cx() && s.x2 <= o.x1;
    if (pred == "above") return s.cy() < o.cy() && s.y2 <= o.y1;
    return false;
}

struct SceneObject {
    std::size_t style = 0;
    Box box;
};

struct Scene {
    Image image;
    std::vector<SceneObject> objects;
    std::vector<RelationshipAnnotation> relationships;
};

namespace detail {

inline bool inside_shape(Shape shape, const Box& b, double px, double py)
{
    switch (shape) {
    case Shape::square:
        return px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2;
    case Shape::circle: {
        const double rx = 0.5 * b.width(), ry = 0.5 * b.height();
        const double dx = (px - b.cx()) / rx, dy = (py - b.cy()) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
    case Shape::triangle: {
        if (py < b.y1 || py >= b.y2) return false;
        const double t = (py - b.y1) / b.height(); // 0 at apex, 1 at base
        const double half = 0.5 * b.width() * t;
        return px >= b.cx() - half && px <= b.cx() + half;
    }
    }
    return false;
}

inline std::uint8_t clamp_byte(double v) { return std::uint8_t(std::clamp(std::lround(v), 0L, 255L)); }

} // namespace detail

// Render one scene. Objects are placed on an integer grid; boxes are tight
// around the painted shape's extent.
inline Scene generate_scene(const SynthConfig& cfg, const std::string& image_id = "0")
{
    cfg.validate();
    const auto styles = cfg.styles();
    Rng rng(cfg.seed);
    Scene sc;

    const std::size_t n = std::size_t(rng.range(long(cfg.min_objects), long(cfg.max_objects)));
    const double W = double(cfg.width), H = double(cfg.height);
    std::size_t attempts = 0;
    while (sc.objects.size() < n) {
        if (++attempts > cfg.retry_budget * n)
            throw ConfigError("generate_scene: could not place " + std::to_string(n) + " objects within retry budget");
        SceneObject ob;
        ob.style = std::size_t(rng.below(styles.size()));
        const bool nested = !sc.objects.empty() && rng.uniform() < cfg.inside_prob;
        if (nested) {
            const auto& host = sc.objects[std::size_t(rng.below(sc.objects.size()))].box;
            const double hs = std::min(host.width(), host.height());
            if (hs < 2 * cfg.min_size) continue;
            const double sz = std::floor(rng.uniform(cfg.min_size * 0.6, hs * 0.5));
            const double x = std::floor(rng.uniform(host.x1 + 1, host.x2 - sz - 1));
            const double y = std::floor(rng.uniform(host.y1 + 1, host.y2 - sz - 1));
            ob.box = {x, y, x + sz, y + sz};
            if (!host.contains(ob.box)) continue;
            bool clash = false;
            for (const auto& o : sc.objects)
                if (&o.box != &host && iou_unchecked(o.box, ob.box) > 0 && !o.box.contains(ob.box)) clash = true;
            if (clash) continue;
        } else {
            const double w = std::floor(rng.uniform(cfg.min_size, cfg.max_size + 1));
            const double h = styles[ob.style].shape == Shape::circle || styles[ob.style].shape == Shape::square
                                 ? w
                                 : std::floor(rng.uniform(cfg.min_size, cfg.max_size + 1));
            const double x = std::floor(rng.uniform(0, W - w + 1));
            const double y = std::floor(rng.uniform(0, H - h + 1));
            ob.box = {x, y, x + w, y + h};
            bool clash = false;
            for (const auto& o : sc.objects) {
                const double ov = iou_unchecked(o.box, ob.box);
                if (ov > cfg.max_overlap || o.box.contains(ob.box) || ob.box.contains(o.box)) clash = true;
            }
            if (clash) continue;
        }
        sc.objects.push_back(ob);
    }

    // Paint: background, then larger objects first so nested ones stay visible.
    Image& img = sc.image;
    img.width = cfg.width;
    img.height = cfg.height;
    img.rgb.resize(cfg.width * cfg.height * 3);
    std::array<double, 3> bg;
    for (auto& c : bg) c = rng.uniform(90, 170);
    std::vector<std::size_t> order(sc.objects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sc.objects[a].box.area() > sc.objects[b].box.area(); });
    std::vector<std::array<double, 3>> tint(sc.objects.size());
    for (auto& t : tint)
        for (auto& c : t) c = rng.uniform(-15, 15);
    for (std::size_t y = 0; y < cfg.height; ++y)
        for (std::size_t x = 0; x < cfg.width; ++x) {
            std::array<double, 3> px = bg;
            for (auto i : order) {
                const auto& ob = sc.objects[i];
                if (detail::inside_shape(styles[ob.style].shape, ob.box, double(x) + 0.5, double(y) + 0.5))
                    for (int c = 0; c < 3; ++c) px[c] = styles[ob.style].color[c] + tint[i][c];
            }
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = detail::clamp_byte(px[c] + rng.normal(0, cfg.pixel_noise));
        }

    for (std::size_t i = 0; i < sc.objects.size(); ++i)
        for (std::size_t j = 0; j < sc.objects.size(); ++j) {
            if (i == j) continue;
            const auto& s = sc.objects[i];
            const auto& o = sc.objects[j];
            if (auto p = decide_predicate(s.box, o.box, cfg))
                sc.relationships.push_back({image_id, styles[s.style].name, *p, styles[o.style].name, s.box, o.box});
        }
    if (cfg.max_relationships && sc.relationships.size() > cfg.max_relationships) {
        rng.shuffle(sc.relationships.begin(), sc.relationships.end());
        sc.relationships.resize(cfg.max_relationships);
    }
    return sc;
}

// ---------------------------------------------------------------------------
// Annotation files

namespace detail {

inline std::string format_number(double v)
{
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string format_box(const Box& b)
{
    return format_number(b.x1) + "," + format_number(b.y1) + "," + format_number(b.x2) + "," + format_number(b.y2);
}

inline std::vector<std::string_view> split(std::string_view s, char sep)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i)
        if (i == s.size() || s[i] == sep) {
            out.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    return out;
}

inline std::optional<Box> parse_box(std::string_view s)
{
    const auto parts = split(s, ',');
    if (parts.size() != 4) return std::nullopt;
    double v[4];
    for (int i = 0; i < 4; ++i) {
        const auto p = parts[i];
        auto r = std::from_chars(p.data(), p.data() + p.size(), v[i]);
        if (r.ec != std::errc() || r.ptr != p.data() + p.size()) return std::nullopt;
    }
    return Box{v[0], v[1], v[2], v[3]};
}

} // namespace detail

inline std::string format_annotation(const RelationshipAnnotation& a)
{
    return a.image_id + '\t' + a.subject + '\t' + a.predicate + '\t' + a.object + '\t' +
           detail::format_box(a.subject_box) + '\t' + detail::format_box(a.object_box);
}

// Throws ParseError naming the reason; the caller supplies the line number.
inline RelationshipAnnotation parse_annotation(std::string_view line, std::size_t line_no)
{
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto f = detail::split(line, '\t');
    if (f.size() != 6) throw ParseError("expected 6 tab-separated fields, got " + std::to_string(f.size()), line_no);
    RelationshipAnnotation a;
    a.image_id = std::string(f[0]);
    a.subject = std::string(f[1]);
    a.predicate = std::string(f[2]);
    a.object = std::string(f[3]);
    if (a.image_id.empty() || a.subject.empty() || a.predicate.empty() || a.object.empty())
        throw ParseError("empty field", line_no);
    const auto sb = detail::parse_box(f[4]);
    const auto ob = detail::parse_box(f[5]);
    if (!sb || !ob) throw ParseError("malformed box", line_no);
    if (!sb->valid() || !ob->valid()) throw ParseError("box with non-positive area", line_no);
    a.subject_box = *sb;
    a.object_box = *ob;
    return a;
}

inline void write_annotations(const std::vector<RelationshipAnnotation>& anns, std::ostream& os)
{
    for (const auto& a : anns) os << format_annotation(a) << '\n';
}

inline void write_annotations(const std::vector<RelationshipAnnotation>& anns, const std::string& path)
{
    std::ofstream f(path);
    if (!f) throw InputError("cannot write " + path);
    write_annotations(anns, f);
}

struct ReadResult {
    std::vector<RelationshipAnnotation> annotations;
    std::size_t skipped = 0;
    std::vector<std::string> errors; // messages of skipped lines (lenient mode)
};

// Strict mode rethrows the first malformed line; lenient mode skips and counts.
inline ReadResult read_annotations(std::istream& is, bool strict = true)
{
    ReadResult out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(is, line)) {
        ++no;
        if (line.empty() || line == "\r") continue;
        try {
            out.annotations.push_back(parse_annotation(line, no));
        } catch (const ParseError& e) {
            if (strict) throw;
            ++out.skipped;
            out.errors.push_back(e.what());
        }
    }
    return out;
}

inline ReadResult read_annotations(const std::string& path, bool strict = true)
{
    std::ifstream f(path);
    if (!f) throw InputError("cannot read " + path);
    return read_annotations(f, strict);
}

// ---------------------------------------------------------------------------
// Cleansing

// Lowercase, drop punctuation other than '-', collapse whitespace.
inline std::string normalize_label(std::string_view raw)
{
    std::string out;
    bool pending_space = false;
    for (char ch : raw) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) || ch == '_') {
            pending_space = !out.empty();
            continue;
        }
        if (!(std::isalnum(c) || ch == '-' || c >= 0x80)) continue;
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(char(std::tolower(c)));
    }
    return out;
}

// raw -> canonical label mapping; keys and values are normalised and chains
// are resolved at construction so applying the table is idempotent.
class SynonymTable {
public:
    SynonymTable() = default;

    explicit SynonymTable(const std::vector<std::pair<std::string, std::string>>& entries)
    {
        std::map<std::string, std::string> raw;
        for (const auto& [k, v] : entries) {
            const auto nk = normalize_label(k), nv = normalize_label(v);
            if (nk.empty() || nv.empty() || nk == nv) continue;
            raw[nk] = nv;
        }
        for (const auto& [k, v] : raw) {
            // Follow the chain; on a cycle settle on its smallest member.
            std::set<std::string> seen{k};
            std::string cur = v;
            while (raw.count(cur) && !seen.count(cur)) {
                seen.insert(cur);
                cur = raw.at(cur);
            }
            if (seen.count(cur)) cur = *seen.begin();
            if (cur != k) map_[k] = cur;
        }
    }

    static SynonymTable load(const std::string& path)
    {
        std::ifstream f(path);
        if (!f) throw InputError("cannot read " + path);
        std::vector<std::pair<std::string, std::string>> entries;
        std::string line;
        std::size_t no = 0;
        while (std::getline(f, line)) {
            ++no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw ParseError("synonym table: expected raw TAB canonical", no);
            entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
        }
        return SynonymTable(entries);
    }

    std::string apply(std::string_view raw) const
    {
        std::string n = normalize_label(raw);
        auto it = map_.find(n);
        return it == map_.end() ? n : it->second;
    }

    std::size_t size() const { return map_.size(); }

private:
    std::map<std::string, std::string> map_;
};

struct CleanseResult {
    std::vector<RelationshipAnnotation> annotations;
    std::size_t dropped_empty = 0;
};

inline CleanseResult cleanse_labels(const std::vector<RelationshipAnnotation>& anns, const SynonymTable& table)
{
    CleanseResult out;
    for (auto a : anns) {
        a.subject = table.apply(a.subject);
        a.predicate = table.apply(a.predicate);
        a.object = table.apply(a.object);
        if (a.subject.empty() || a.predicate.empty() || a.object.empty()) {
            ++out.dropped_empty;
            continue;
        }
        out.annotations.push_back(std::move(a));
    }
    return out;
}

inline constexpr std::size_t kDefaultObjectMinFrequency = 200;
inline constexpr std::size_t kDefaultPredicateMinFrequency = 400;

struct LabelFrequencies {
    std::map<std::string, std::size_t> objects;    // counted once per subject and once per object slot
    std::map<std::string, std::size_t> predicates;
};

inline LabelFrequencies count_labels(const std::vector<RelationshipAnnotation>& anns)
{
    LabelFrequencies f;
    for (const auto& a : anns) {
        ++f.objects[a.subject];
        ++f.objects[a.object];
        ++f.predicates[a.predicate];
    }
    return f;
}

// Single pass: frequencies come from the input corpus, not recomputed after
// dropping.
inline std::vector<RelationshipAnnotation> frequency_filter(const std::vector<RelationshipAnnotation>& anns,
                                                            std::size_t obj_min = kDefaultObjectMinFrequency,
                                                            std::size_t pred_min = kDefaultPredicateMinFrequency)
{
    const auto f = count_labels(anns);
    std::vector<RelationshipAnnotation> out;
    for (const auto& a : anns)
        if (f.objects.at(a.subject) >= obj_min && f.objects.at(a.object) >= obj_min &&
            f.predicates.at(a.predicate) >= pred_min)
            out.push_back(a);
    return out;
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
    std::vector<RelationshipAnnotation> train, val, test;
    std::vector<std::string> train_ids, val_ids, test_ids;
};

inline std::array<std::size_t, 3> split_counts(std::size_t n, const std::array<double, 3>& fractions)
{
    double sum = 0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
    const auto tr = std::min<std::size_t>(n, std::size_t(std::llround(fractions[0] * double(n))));
    const auto va = std::min<std::size_t>(n - tr, std::size_t(std::llround(fractions[1] * double(n))));
    return {tr, va, n - tr - va};
}

// Whole images go to one subset; image order is a seeded shuffle of the
// sorted id list.
inline Split split_dataset(const std::vector<RelationshipAnnotation>& anns, const std::array<double, 3>& fractions,
                           std::uint64_t seed)
{
    std::set<std::string> idset;
    for (const auto& a : anns) idset.insert(a.image_id);
    std::vector<std::string> ids(idset.begin(), idset.end());
    const auto counts = split_counts(ids.size(), fractions);
    Rng rng(seed);
    rng.shuffle(ids.begin(), ids.end());
    Split s;
    std::map<std::string, int> where;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int k = i < counts[0] ? 0 : i < counts[0] + counts[1] ? 1 : 2;
        where[ids[i]] = k;
        (k == 0 ? s.train_ids : k == 1 ? s.val_ids : s.test_ids).push_back(ids[i]);
    }
    for (const auto& a : anns) {
        const int k = where.at(a.image_id);
        (k == 0 ? s.train : k == 1 ? s.val : s.test).push_back(a);
    }
    return s;
}

// Label <-> id maps; id 0 is background, foreground ids follow sorted order.
struct Vocabulary {
    std::vector<std::string> objects;    // index i -> class id i+1
    std::vector<std::string> predicates; // index i -> class id i+1

    static Vocabulary from(const std::vector<RelationshipAnnotation>& anns)
    {
        std::set<std::string> o, p;
        for (const auto& a : anns) {
            o.insert(a.subject);
            o.insert(a.object);
            p.insert(a.predicate);
        }
        return {{o.begin(), o.end()}, {p.begin(), p.end()}};
    }

    std::size_t object_id(const std::string& s) const { return lookup(objects, s, "object"); }
    std::size_t predicate_id(const std::string& s) const { return lookup(predicates, s, "predicate"); }

    void save(const std::string& path) const
    {
        std::ofstream f(path);
        if (!f) throw InputError("cannot write " + path);
        for (const auto& s : objects) f << "object\t" << s << '\n';
        for (const auto& s : predicates) f << "predicate\t" << s << '\n';
    }

    static Vocabulary load(const std::string& path)
    {
        std::ifstream f(path);
        if (!f) throw InputError("cannot read " + path);
        Vocabulary v;
        std::string line;
        std::size_t no = 0;
        while (std::getline(f, line)) {
            ++no;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw ParseError("vocabulary: expected kind TAB label", no);
            const auto kind = line.substr(0, tab);
            if (kind == "object")
                v.objects.push_back(line.substr(tab + 1));
            else if (kind == "predicate")
                v.predicates.push_back(line.substr(tab + 1));
            else
                throw ParseError("vocabulary: unknown kind " + kind, no);
        }
        return v;
    }

private:
    static std::size_t lookup(const std::vector<std::string>& v, const std::string& s, const char* what)
    {
        auto it = std::find(v.begin(), v.end(), s);
        if (it == v.end()) throw InputError(std::string("unknown ") + what + " label '" + s + "'");
        return std::size_t(it - v.begin()) + 1;
    }
};

// Group annotations by image id, preserving first-seen order of ids.
inline std::vector<std::pair<std::string, std::vector<RelationshipAnnotation>>>
group_by_image(const std::vector<RelationshipAnnotation>& anns)
{
    std::vector<std::pair<std::string, std::vector<RelationshipAnnotation>>> out;
    std::map<std::string, std::size_t> index;
    for (const auto& a : anns) {
        auto [it, fresh] = index.emplace(a.image_id, out.size());
        if (fresh) out.push_back({a.image_id, {}});
        out[it->second].second.push_back(a);
    }
    return out;
}

} // namespace vipcnn::data
