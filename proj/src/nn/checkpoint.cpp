#include "retsyn/nn/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

namespace retsyn::nn {

using nlohmann::json;

void save_checkpoint(const std::string& path, const json& header,
                     const std::vector<Param*>& params) {
    json h = header;
    json plist = json::array();
    int64_t total = 0;
    for (const auto* p : params) {
        plist.push_back({{"name", p->name}, {"shape", p->shape}});
        total += p->numel();
    }
    h["params"] = plist;
    h["total_values"] = total;

    std::ofstream f(path, std::ios::binary);
    if (!f) raise("cannot open checkpoint for writing: " + path);
    std::string hs = h.dump();
    f << "RETSYN_CKPT 1\n" << hs.size() << "\n" << hs << "\n";
    for (const auto* p : params)
        f.write(reinterpret_cast<const char*>(p->w.data()),
                static_cast<std::streamsize>(p->w.size() * sizeof(float)));
    if (!f) raise("checkpoint write failed: " + path);
}

namespace {

json read_header(std::ifstream& f, const std::string& path) {
    std::string magic;
    std::getline(f, magic);
    if (magic != "RETSYN_CKPT 1") raise("not a checkpoint file: " + path);
    std::string lenline;
    std::getline(f, lenline);
    size_t hlen = std::stoul(lenline);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    f.get();  // trailing newline
    if (!f) raise("truncated checkpoint header: " + path);
    return json::parse(hs);
}

}  // namespace

json read_checkpoint_header(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("checkpoint not found: " + path);
    return read_header(f, path);
}

json load_checkpoint(const std::string& path, const std::vector<Param*>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("checkpoint not found: " + path);
    json h = read_header(f, path);

    const auto& plist = h.at("params");
    if (plist.size() != params.size())
        raise("checkpoint parameter count mismatch: " + path);
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = plist[i];
        if (entry.at("name").get<std::string>() != params[i]->name)
            raise("checkpoint parameter order mismatch at " + params[i]->name);
        if (entry.at("shape").get<std::vector<int>>() != params[i]->shape)
            raise("checkpoint shape mismatch at " + params[i]->name);
        f.read(reinterpret_cast<char*>(params[i]->w.data()),
               static_cast<std::streamsize>(params[i]->w.size() * sizeof(float)));
    }
    if (!f) raise("truncated checkpoint data: " + path);
    return h;
}

}  // namespace retsyn::nn
