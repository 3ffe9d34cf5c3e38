#include "adaptsr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "adaptsr/errors.hpp"

namespace adaptsr::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'D', 'S', 'R', 'C', 'K', 'P', '1'};

} // namespace

void Container::put(const std::string& name, const Param& p) {
    StoredTensor t;
    t.shape = p.shape.empty() ? std::vector<int>{static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols())}
                              : p.shape;
    t.data.assign(p.value.data(), p.value.data() + p.value.size());
    if (tensors.find(name) == tensors.end()) {
        order.push_back(name);
    }
    tensors[name] = std::move(t);
}

const StoredTensor& Container::get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw CheckpointIncompatible("missing tensor " + name);
    }
    return it->second;
}

void write(const Container& c, const std::filesystem::path& path) {
    nlohmann::json index = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& name : c.order) {
        const auto& t = c.tensors.at(name);
        index[name] = {{"shape", t.shape}, {"offset", offset}, {"numel", t.data.size()}};
        offset += t.data.size() * sizeof(float);
    }
    nlohmann::json header = {{"meta", c.meta}, {"tensors", index}, {"order", c.order}};
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& name : c.order) {
        const auto& t = c.tensors.at(name);
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

Container read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointIncompatible(path.string() + " is not a checkpoint file");
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw CheckpointIncompatible("truncated header in " + path.string());
    }
    const nlohmann::json header = nlohmann::json::parse(text);
    const auto data_start = in.tellg();

    Container c;
    c.meta = header.at("meta");
    c.order = header.at("order").get<std::vector<std::string>>();
    for (const auto& name : c.order) {
        const auto& entry = header.at("tensors").at(name);
        StoredTensor t;
        t.shape = entry.at("shape").get<std::vector<int>>();
        t.data.resize(entry.at("numel").get<std::size_t>());
        in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!in) {
            throw CheckpointIncompatible("truncated tensor " + name + " in " + path.string());
        }
        c.tensors.emplace(name, std::move(t));
    }
    return c;
}

} // namespace adaptsr::ckpt
