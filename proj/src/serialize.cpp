// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/serialize.hpp"

#include <cstring>
#include <fstream>

#include "misalign/errors.hpp"

namespace misalign {

namespace {

constexpr char kMagic[] = "MSLNTNS1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw IoError(path + ": truncated container, expected " + what + " at byte " +
                          std::to_string(pos));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                     buf[pos + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(
                     buf[pos + static_cast<std::size_t>(i)]))
                 << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) {
        std::uint64_t bits = u64(what);
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

std::uint64_t NamedTensors::field(const std::string& name) const {
    for (const auto& [n, v] : fields)
        if (n == name) return v;
    throw IoError("container field not found: " + name);
}

const Tensor& NamedTensors::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw IoError("container tensor not found: " + name);
}

void save_container(const std::string& path, const NamedTensors& nt) {
    std::string out;
    out.append(kMagic, kMagicLen);
    put_u32(out, static_cast<std::uint32_t>(nt.fields.size()));
    for (const auto& [name, value] : nt.fields) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put_u64(out, value);
    }
    put_u32(out, static_cast<std::uint32_t>(nt.tensors.size()));
    for (const auto& [name, t] : nt.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape) put_u64(out, e);
        for (double v : t.data) put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path);
}

NamedTensors load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf, 0, path};
    r.need(kMagicLen, "magic");
    if (buf.compare(0, kMagicLen, kMagic) != 0) throw IoError(path + ": bad container magic");
    r.pos = kMagicLen;

    NamedTensors nt;
    std::uint32_t nfields = r.u32("field count");
    for (std::uint32_t i = 0; i < nfields; ++i) {
        std::uint32_t len = r.u32("field name length");
        std::string name = r.str(len, "field name");
        std::uint64_t value = r.u64("field value");
        nt.fields.emplace_back(std::move(name), value);
    }
    std::uint32_t ntensors = r.u32("tensor count");
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        std::uint32_t len = r.u32("tensor name length");
        std::string name = r.str(len, "tensor name");
        std::uint32_t rank = r.u32("tensor rank");
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape[k] = static_cast<std::size_t>(r.u64("tensor extent"));
            numel *= shape[k];
        }
        std::vector<double> data(numel);
        for (std::size_t k = 0; k < numel; ++k) data[k] = r.f64("tensor data");
        nt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return nt;
}

}  // namespace misalign
