#include "ldmorph/checkpoint.hpp"

#include "ldmorph/types.hpp"

#include <cstring>
#include <fstream>

namespace ldmorph::ckpt {

namespace {

constexpr char kMagic[8] = {'L', 'D', 'M', 'C', 'K', 'P', 'T', '\0'};

enum class DType : uint8_t { F32 = 0, F64 = 1, I64 = 2 };

DType dtype_code(torch::ScalarType t)
{
    switch (t) {
    case torch::kFloat32:
        return DType::F32;
    case torch::kFloat64:
        return DType::F64;
    case torch::kInt64:
        return DType::I64;
    default:
        throw std::invalid_argument(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
    }
}

torch::ScalarType scalar_type(DType d)
{
    switch (d) {
    case DType::F32:
        return torch::kFloat32;
    case DType::F64:
        return torch::kFloat64;
    case DType::I64:
        return torch::kInt64;
    }
    throw RuntimeFailure("checkpoint: corrupt dtype code");
}

void put_u32(std::ostream& out, uint32_t v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str(std::ostream& out, const std::string& s)
{
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in)
{
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) {
        throw RuntimeFailure("checkpoint: truncated file");
    }
    return v;
}

std::string get_str(std::istream& in)
{
    const auto n = get<uint32_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) {
        throw RuntimeFailure("checkpoint: truncated string");
    }
    return s;
}

template <typename Fn>
void for_each_state(const torch::nn::Module& module, Fn&& fn)
{
    for (const auto& item : module.named_parameters(true)) {
        fn(item.key(), item.value());
    }
    for (const auto& item : module.named_buffers(true)) {
        fn(item.key(), item.value());
    }
}

} // namespace

void Checkpoint::save(const fs::path& path) const
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw RuntimeFailure("cannot write checkpoint " + path.string());
    }
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        const auto data = t.detach().to(torch::kCPU).contiguous();
        put_str(out, name);
        const auto code = static_cast<uint8_t>(dtype_code(data.scalar_type()));
        out.write(reinterpret_cast<const char*>(&code), 1);
        put_u32(out, static_cast<uint32_t>(data.dim()));
        for (auto d : data.sizes()) {
            const int64_t dim = d;
            out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
        }
        out.write(static_cast<const char*>(data.data_ptr()), static_cast<std::streamsize>(data.nbytes()));
    }
    if (!out) {
        throw RuntimeFailure("checkpoint: write failed for " + path.string());
    }
}

Checkpoint Checkpoint::load(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw RuntimeFailure("missing checkpoint " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw RuntimeFailure("not a checkpoint file: " + path.string());
    }
    const auto version = get<uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw RuntimeFailure("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    const auto n_meta = get<uint32_t>(in);
    for (uint32_t i = 0; i < n_meta; ++i) {
        auto k = get_str(in);
        c.meta[k] = get_str(in);
    }
    const auto n_records = get<uint32_t>(in);
    for (uint32_t i = 0; i < n_records; ++i) {
        auto name = get_str(in);
        const auto type = scalar_type(static_cast<DType>(get<uint8_t>(in)));
        const auto ndim = get<uint32_t>(in);
        std::vector<int64_t> dims(ndim);
        for (auto& d : dims) {
            d = get<int64_t>(in);
        }
        auto t = torch::empty(dims, type);
        in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
        if (!in) {
            throw RuntimeFailure("checkpoint: truncated record " + name);
        }
        c.tensors[name] = t;
    }
    return c;
}

void Checkpoint::add_module(const std::string& prefix, const torch::nn::Module& module)
{
    for_each_state(module, [&](const std::string& name, const torch::Tensor& t) {
        tensors[prefix + "." + name] = t.detach().clone();
    });
}

void Checkpoint::load_module(const std::string& prefix, torch::nn::Module& module) const
{
    torch::NoGradGuard no_grad;
    for_each_state(module, [&](const std::string& name, const torch::Tensor& t) {
        auto it = tensors.find(prefix + "." + name);
        if (it == tensors.end()) {
            throw RuntimeFailure("checkpoint lacks record " + prefix + "." + name);
        }
        if (it->second.sizes() != t.sizes()) {
            throw RuntimeFailure("checkpoint record " + prefix + "." + name + " has a mismatched shape");
        }
        const_cast<torch::Tensor&>(t).copy_(it->second);
    });
}

bool Checkpoint::has_module(const std::string& prefix) const
{
    const auto key = prefix + ".";
    auto it = tensors.lower_bound(key);
    return it != tensors.end() && it->first.compare(0, key.size(), key) == 0;
}

uint64_t hash_module(const torch::nn::Module& module)
{
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for_each_state(module, [&](const std::string& name, const torch::Tensor& t) {
        mix(name.data(), name.size());
        const auto c = t.detach().contiguous();
        mix(c.data_ptr(), c.nbytes());
    });
    return h;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& module)
{
    std::vector<torch::Tensor> out;
    for_each_state(module, [&](const std::string&, const torch::Tensor& t) { out.push_back(t.detach().clone()); });
    return out;
}

void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state)
{
    torch::NoGradGuard no_grad;
    size_t i = 0;
    for_each_state(module, [&](const std::string&, const torch::Tensor& t) {
        if (i >= state.size()) {
            throw std::invalid_argument("restore: snapshot has too few tensors");
        }
        const_cast<torch::Tensor&>(t).copy_(state[i++]);
    });
}

} // namespace ldmorph::ckpt
