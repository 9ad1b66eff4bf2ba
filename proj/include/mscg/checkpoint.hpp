#pragma once

#include <map>
#include <string>
#include <vector>

#include "mscg/mten.hpp"

namespace mscg {

// Uncompressed archive of named MTEN entries plus a text manifest and a
// key=value META block. Layout: magic "MARC", version byte, u32 entry count,
// then per entry u32 name length, name bytes, u64 payload length, payload.
class Archive {
  public:
    void add(const std::string& name, std::vector<std::uint8_t> bytes) { entries_.emplace_back(name, std::move(bytes)); }

    bool has(const std::string& name) const {
        for (const auto& [n, b] : entries_) {
            if (n == name) return true;
        }
        return false;
    }

    const std::vector<std::uint8_t>& get(const std::string& name) const {
        for (const auto& [n, b] : entries_) {
            if (n == name) return b;
        }
        throw data_error("archive entry not found: " + name);
    }

    const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& entries() const { return entries_; }

    void save(const std::string& path) const {
        std::vector<std::uint8_t> out;
        out.push_back('M');
        out.push_back('A');
        out.push_back('R');
        out.push_back('C');
        out.push_back(0x01);
        append_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [name, bytes] : entries_) {
            append_u32(out, static_cast<std::uint32_t>(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            append_u64(out, static_cast<std::uint64_t>(bytes.size()));
            out.insert(out.end(), bytes.begin(), bytes.end());
        }
        mten::write_file(path, out);
    }

    static Archive load(const std::string& path) {
        const auto bytes = mten::read_file(path);
        if (bytes.size() < 9 || bytes[0] != 'M' || bytes[1] != 'A' || bytes[2] != 'R' || bytes[3] != 'C') {
            throw data_error("not an archive file: " + path);
        }
        if (bytes[4] != 0x01) throw data_error("unsupported archive version: " + path);
        std::size_t pos = 5;
        const std::uint32_t count = read_u32(bytes, pos, path);
        Archive a;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t name_len = read_u32(bytes, pos, path);
            if (pos + name_len > bytes.size()) throw data_error("truncated archive: " + path);
            std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                             bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
            pos += name_len;
            const std::uint64_t blob_len = read_u64(bytes, pos, path);
            if (pos + blob_len > bytes.size()) throw data_error("truncated archive: " + path);
            std::vector<std::uint8_t> blob(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + blob_len));
            pos += blob_len;
            a.add(std::move(name), std::move(blob));
        }
        return a;
    }

  private:
    static void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }
    static void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }
    static std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t& pos, const std::string& path) {
        if (pos + 4 > b.size()) throw data_error("truncated archive: " + path);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    static std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t& pos, const std::string& path) {
        if (pos + 8 > b.size()) throw data_error("truncated archive: " + path);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 8;
        return v;
    }

    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> entries_;
};

// Named tensors + string metadata, serialized through Archive. The manifest
// entry lists name -> shape, one per line.
template <typename T>
struct Checkpoint {
    std::map<std::string, Tensor<T>> tensors;
    std::map<std::string, std::string> meta;

    void save(const std::string& path) const {
        Archive a;
        std::string manifest;
        for (const auto& [name, t] : tensors) manifest += name + " " + shape_str(t.shape) + "\n";
        a.add("MANIFEST", std::vector<std::uint8_t>(manifest.begin(), manifest.end()));
        std::string meta_text;
        for (const auto& [k, v] : meta) meta_text += k + "=" + v + "\n";
        a.add("META", std::vector<std::uint8_t>(meta_text.begin(), meta_text.end()));
        for (const auto& [name, t] : tensors) a.add("tensor/" + name, mten::encode(t));
        a.save(path);
    }

    static Checkpoint load(const std::string& path) {
        const auto a = Archive::load(path);
        Checkpoint c;
        const auto& meta_bytes = a.get("META");
        std::istringstream meta_in(std::string(meta_bytes.begin(), meta_bytes.end()));
        std::string line;
        while (std::getline(meta_in, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw data_error("malformed META entry in " + path);
            c.meta[line.substr(0, eq)] = line.substr(eq + 1);
        }
        for (const auto& [name, bytes] : a.entries()) {
            if (name.rfind("tensor/", 0) == 0) {
                c.tensors.emplace(name.substr(7), mten::to_tensor<T>(mten::decode(bytes, path + ":" + name)));
            }
        }
        return c;
    }

    const Tensor<T>& require(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw data_error("checkpoint tensor missing: " + name);
        return it->second;
    }

    std::int64_t meta_i64(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw data_error("checkpoint meta missing: " + key);
        return std::stoll(it->second);
    }
};

} // namespace mscg
