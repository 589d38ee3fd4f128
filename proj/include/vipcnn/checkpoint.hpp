#pragma once

// Parameter checkpoint file:
//   "VIPC" magic, u8 version (1), u32 record count, then per record
//   u32 name length, name bytes, u32 rank, rank x u32 extents,
//   prod(extents) x float32 values. All integers and floats little-endian.

#include <vipcnn/autograd.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace vipcnn::nn {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'I', 'P', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    std::uint8_t u8()
    {
        need(1);
        return std::uint8_t(data_[pos_++]);
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes(std::size_t n)
    {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const
    {
        if (data_.size() - pos_ < n) throw InputError("checkpoint truncated");
    }
    std::string data_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& records)
{
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    out.push_back(char(kCheckpointVersion));
    detail::put_u32(out, std::uint32_t(records.size()));
    for (const auto& r : records) {
        detail::put_u32(out, std::uint32_t(r.name.size()));
        out += r.name;
        detail::put_u32(out, std::uint32_t(r.tensor.rank()));
        for (auto e : r.tensor.shape()) detail::put_u32(out, std::uint32_t(e));
        for (float v : r.tensor.values()) detail::put_f32(out, v);
    }
    return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string bytes)
{
    detail::Reader rd(std::move(bytes));
    const std::string magic = rd.bytes(4);
    if (magic != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end()))
        throw InputError("not a checkpoint (bad magic)");
    if (const auto v = rd.u8(); v != kCheckpointVersion)
        throw InputError("unsupported checkpoint version " + std::to_string(v));
    const std::uint32_t n = rd.u32();
    std::vector<NamedTensor> out;
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        NamedTensor r;
        r.name = rd.bytes(rd.u32());
        Shape s(rd.u32());
        for (auto& e : s) e = rd.u32();
        std::vector<float> vals(shape_size(s));
        for (auto& v : vals) v = rd.f32();
        r.tensor = Tensor<float>(std::move(s), std::move(vals));
        out.push_back(std::move(r));
    }
    if (!rd.done()) throw InputError("checkpoint has trailing bytes");
    return out;
}

template <typename T>
std::vector<NamedTensor> snapshot(const ParameterStore<T>& store)
{
    std::vector<NamedTensor> out;
    for (const auto* p : store.all()) out.push_back({p->name, p->value.template cast<float>()});
    return out;
}

// Every canonical parameter of the store must be present with its shape.
template <typename T>
void restore(ParameterStore<T>& store, const std::vector<NamedTensor>& records)
{
    for (auto* p : store.all()) {
        auto it = std::find_if(records.begin(), records.end(), [&](const NamedTensor& r) { return r.name == p->name; });
        if (it == records.end()) throw InputError("checkpoint lacks parameter " + p->name);
        if (it->tensor.shape() != p->value.shape())
            throw DimensionError("checkpoint shape " + shape_str(it->tensor.shape()) + " for " + p->name +
                                 " does not match " + shape_str(p->value.shape()));
        p->value = it->tensor.template cast<T>();
        p->velocity.fill(T(0));
    }
}

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::string& path)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write " + path);
    const std::string bytes = encode_checkpoint(snapshot(store));
    f.write(bytes.data(), std::streamsize(bytes.size()));
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(std::move(bytes));
}

template <typename T>
void load_checkpoint(ParameterStore<T>& store, const std::string& path)
{
    restore(store, read_checkpoint(path));
}

} // namespace vipcnn::nn
