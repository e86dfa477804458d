#include "fedcondi/param_map.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "fedcondi/errors.hpp"

namespace fedcondi {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'N', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("ParamMap::load: truncated file");
    return v;
}

}  // namespace

ParamMap::Entry& ParamMap::entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StateError("ParamMap: unknown parameter '" + name + "'");
    return it->second;
}

const ParamMap::Entry& ParamMap::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StateError("ParamMap: unknown parameter '" + name + "'");
    return it->second;
}

void ParamMap::zero_grads() {
    for (auto& [name, e] : entries_) {
        std::fill(e.grad.vec().begin(), e.grad.vec().end(), 0.0);
    }
}

bool ParamMap::values_finite() const {
    for (const auto& [name, e] : entries_) {
        if (!e.value.all_finite()) return false;
    }
    return true;
}

bool ParamMap::same_schema(const ParamMap& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto it = entries_.begin();
    auto jt = other.entries_.begin();
    for (; it != entries_.end(); ++it, ++jt) {
        if (it->first != jt->first) return false;
        if (it->second.value.shape() != jt->second.value.shape()) return false;
    }
    return true;
}

std::int64_t ParamMap::total_parameters() const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.numel();
    return n;
}

void ParamMap::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("ParamMap::save: cannot open '" + path + "'");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kVersion);
    for (const auto& [name, e] : entries_) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
        for (auto d : e.value.shape()) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(e.value.data()),
                 static_cast<std::streamsize>(e.value.numel() * sizeof(double)));
    }
    if (!os) throw ParseError("ParamMap::save: write failed for '" + path + "'");
}

ParamMap ParamMap::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("ParamMap::load: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("ParamMap::load: bad magic in '" + path + "'");
    }
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kVersion) {
        throw ParseError("ParamMap::load: unsupported version " + std::to_string(version));
    }
    ParamMap pm;
    for (;;) {
        std::uint32_t name_len;
        is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (is.eof()) break;
        if (!is) throw ParseError("ParamMap::load: truncated entry header");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = read_pod<std::uint32_t>(is);
        std::vector<std::int64_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::int64_t>(read_pod<std::uint64_t>(is));
        Tensor t = Tensor::zeros(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!is) throw ParseError("ParamMap::load: truncated payload for '" + name + "'");
        pm.add(name, std::move(t));
    }
    return pm;
}

}  // namespace fedcondi
