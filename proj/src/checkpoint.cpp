#include "speech2c/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "speech2c/errors.hpp"

namespace s2c {

namespace {

constexpr char kMagic[8] = {'S', '2', 'C', 'K', 'P', 'T', '0', '\n'};

class Writer {
  public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
        if (!out_) throw format_error("save_checkpoint: cannot open " + path + " for writing");
    }

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        bytes(b, 4);
    }

    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        bytes(b, 8);
    }

    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void finish() {
        out_.flush();
        if (!out_) throw format_error("save_checkpoint: short write to " + path_);
    }

  private:
    std::ofstream out_;
    std::string path_;
};

class Reader {
  public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw format_error("load_checkpoint: cannot open " + path);
    }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw format_error("load_checkpoint: " + path_ + " truncated at byte " +
                               std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
        }
        offset_ += n;
    }

    std::uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        unsigned char b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string str(std::uint32_t max_len = 1u << 20) {
        const std::uint32_t n = u32();
        if (n > max_len) {
            throw format_error("load_checkpoint: implausible string length " + std::to_string(n) +
                               " at byte " + std::to_string(offset_ - 4));
        }
        std::string s(n, '\0');
        if (n > 0) bytes(s.data(), n);
        return s;
    }

    std::size_t offset() const { return offset_; }

  private:
    std::ifstream in_;
    std::string path_;
    std::size_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    Writer w(path);
    w.bytes(kMagic, 8);
    w.u32(ckpt.version);
    w.u64(ckpt.fingerprint);
    w.u64(ckpt.step);
    w.u32(ckpt.has_opt ? 1u : 0u);
    w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
        w.str(k);
        w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t->shape.size()));
        for (int d : t->shape) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t->data) w.f64(v);
    }
    if (ckpt.has_opt) {
        if (ckpt.opt.m.size() != ckpt.tensors.size()) {
            throw contract_error("save_checkpoint: optimizer buffers do not match tensor count");
        }
        w.f64(ckpt.opt.beta1);
        w.f64(ckpt.opt.beta2);
        w.f64(ckpt.opt.eps);
        w.u64(static_cast<std::uint64_t>(ckpt.opt.step));
        for (std::size_t i = 0; i < ckpt.opt.m.size(); ++i) {
            for (double v : ckpt.opt.m[i]) w.f64(v);
            for (double v : ckpt.opt.v[i]) w.f64(v);
        }
    }
    w.finish();
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) {
        throw format_error("load_checkpoint: bad magic in " + path + " (not a checkpoint file)");
    }
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != 1) {
        throw format_error("load_checkpoint: unsupported version " + std::to_string(ckpt.version));
    }
    ckpt.fingerprint = r.u64();
    ckpt.step = r.u64();
    const bool has_opt = r.u32() != 0;
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto k = r.str();
        auto v = r.str();
        ckpt.metadata.emplace(std::move(k), std::move(v));
    }
    const std::uint32_t n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = r.str();
        const std::uint32_t ndim = r.u32();
        if (ndim == 0 || ndim > 8) {
            throw format_error("load_checkpoint: tensor '" + name + "' has implausible rank " +
                               std::to_string(ndim) + " at byte " + std::to_string(r.offset() - 4));
        }
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        const int numel = shape_numel(shape);
        std::vector<double> values(static_cast<std::size_t>(numel));
        for (auto& v : values) v = r.f64();
        ckpt.tensors.emplace(name, Tensor::from(std::move(shape), std::move(values)));
    }
    if (has_opt) {
        ckpt.has_opt = true;
        ckpt.opt.beta1 = r.f64();
        ckpt.opt.beta2 = r.f64();
        ckpt.opt.eps = r.f64();
        ckpt.opt.step = static_cast<std::int64_t>(r.u64());
        for (const auto& [name, t] : ckpt.tensors) {
            std::vector<double> m(t->data.size()), v(t->data.size());
            for (auto& x : m) x = r.f64();
            for (auto& x : v) x = r.f64();
            ckpt.opt.m.push_back(std::move(m));
            ckpt.opt.v.push_back(std::move(v));
        }
    }
    return ckpt;
}

Checkpoint make_checkpoint(const ModelParams& params, std::uint64_t fingerprint, std::uint64_t step,
                           std::map<std::string, std::string> metadata, const AdamState* opt) {
    Checkpoint ckpt;
    ckpt.fingerprint = fingerprint;
    ckpt.step = step;
    ckpt.metadata = std::move(metadata);
    for (const auto& [name, t] : params.tensors) {
        ckpt.tensors.emplace(name, Tensor::from(t->shape, t->data));
    }
    if (opt) {
        ckpt.has_opt = true;
        ckpt.opt = *opt;
    }
    return ckpt;
}

void restore_params(const Checkpoint& ckpt, ModelParams& params) {
    for (auto& [name, t] : params.tensors) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw format_error("restore_params: checkpoint is missing tensor '" + name + "'");
        }
        if (it->second->shape != t->shape) {
            throw dimension_error("restore_params: tensor '" + name + "' has shape " +
                                  shape_str(it->second->shape) + ", model expects " + shape_str(t->shape));
        }
        t->data = it->second->data;
    }
}

}  // namespace s2c
