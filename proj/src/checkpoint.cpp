#include "dpnet/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dpnet {

namespace {

constexpr char kMagic[8] = {'D', 'P', 'N', 'E', 'T', 'C', 'K', 'P'};

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

class Reader {
public:
    Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw ValidationError("checkpoint '" + path_ + "' at byte " + std::to_string(pos_) + ": " +
                              what);
    }

    void expect(std::size_t n) const {
        if (pos_ + n > bytes_.size()) fail("truncated (need " + std::to_string(n) + " bytes)");
    }
    std::uint32_t u32() {
        expect(4);
        std::uint32_t v;
        std::memcpy(&v, bytes_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        expect(8);
        std::uint64_t v;
        std::memcpy(&v, bytes_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }
    std::string str(std::size_t n) {
        expect(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void doubles(double* dst, std::size_t count) {
        expect(count * 8);
        std::memcpy(dst, bytes_.data() + pos_, count * 8);
        pos_ += count * 8;
    }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

void append_record(std::string& out, const std::string& name, const Tensor4& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, 4);  // rank
    const Dims4 d = t.dims();
    put_u32(out, static_cast<std::uint32_t>(d.n));
    put_u32(out, static_cast<std::uint32_t>(d.c));
    put_u32(out, static_cast<std::uint32_t>(d.h));
    put_u32(out, static_cast<std::uint32_t>(d.w));
    const char* bytes = reinterpret_cast<const char*>(t.data());
    out.append(bytes, static_cast<std::size_t>(t.size()) * 8);
}

Reader open_reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(bytes), path);
}

CheckpointMeta read_header(Reader& r) {
    std::string magic = r.str(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0) r.fail("bad magic");
    CheckpointMeta meta;
    meta.version = r.u32();
    if (meta.version != 1) {
        r.fail("unsupported version " + std::to_string(meta.version));
    }
    meta.config_hash = r.u64();
    meta.config_echo = r.str(r.u32());
    if (fnv1a64(meta.config_echo) != meta.config_hash) {
        r.fail("config hash does not match config echo");
    }
    meta.epoch = r.u32();
    return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params, const ModelConfig& config,
                     int epoch) {
    std::string out;
    out.append(kMagic, 8);
    put_u32(out, 1);
    const std::string echo = config.canonical();
    put_u64(out, fnv1a64(echo));
    put_u32(out, static_cast<std::uint32_t>(echo.size()));
    out.append(echo);
    put_u32(out, static_cast<std::uint32_t>(epoch));
    put_u32(out, static_cast<std::uint32_t>(params.count() * 2));
    for (std::size_t i = 0; i < params.count(); ++i) {
        const Parameter& p = params.at(i);
        append_record(out, p.name, p.value);
        append_record(out, p.name + "#momentum", p.momentum);
    }

    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint temp file '" + tmp.string() + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);

    std::ofstream manifest(path + ".txt", std::ios::trunc);
    if (!manifest) throw IoError("cannot write checkpoint manifest '" + path + ".txt'");
    char line[256];
    std::snprintf(line, sizeof(line), "version 1\nconfig %s\nepoch %d\n", echo.c_str(), epoch);
    manifest << line;
    for (std::size_t i = 0; i < params.count(); ++i) {
        const Parameter& p = params.at(i);
        std::snprintf(line, sizeof(line), "%s %s sum=%.17g\n", p.name.c_str(),
                      p.value.dims().str().c_str(), p.value.sum());
        manifest << line;
    }
}

CheckpointMeta peek_checkpoint(const std::string& path) {
    Reader r = open_reader(path);
    return read_header(r);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamSet& params) {
    Reader r = open_reader(path);
    CheckpointMeta meta = read_header(r);
    const std::uint32_t records = r.u32();
    std::size_t filled = 0;
    for (std::uint32_t i = 0; i < records; ++i) {
        std::string name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        if (rank != 4) r.fail("record '" + name + "': unsupported rank");
        Dims4 d;
        d.n = static_cast<int>(r.u32());
        d.c = static_cast<int>(r.u32());
        d.h = static_cast<int>(r.u32());
        d.w = static_cast<int>(r.u32());
        const bool momentum = name.size() > 9 && name.ends_with("#momentum");
        const std::string base = momentum ? name.substr(0, name.size() - 9) : name;
        Parameter* p = params.find(base);
        if (!p) r.fail("record '" + name + "' has no matching parameter");
        Tensor4& dst = momentum ? p->momentum : p->value;
        if (!(dst.dims() == d)) {
            r.fail("record '" + name + "' dims " + d.str() + " do not match parameter " +
                   dst.dims().str());
        }
        r.doubles(dst.data(), static_cast<std::size_t>(dst.size()));
        ++filled;
    }
    if (filled != params.count() * 2) {
        throw ValidationError("checkpoint '" + path + "': " + std::to_string(filled) +
                              " records for " + std::to_string(params.count()) + " parameters");
    }
    if (!r.at_end()) r.fail("trailing bytes");
    return meta;
}

LoadedModel load_model(const std::string& path) {
    CheckpointMeta meta = peek_checkpoint(path);
    ModelConfig config = ModelConfig::from_canonical(meta.config_echo);
    LoadedModel lm{build_model(config, 0), meta};
    lm.meta = load_checkpoint(path, lm.model.params);
    return lm;
}

}  // namespace dpnet
