#include "quietread/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace quietread {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void append_le(std::string& buf, std::span<const float> values) {
    for (float f : values) {
        const auto u = std::bit_cast<std::uint32_t>(f);
        for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
    }
}

std::vector<float> read_le(const std::string& buf, std::size_t offset, std::size_t count) {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) {
            u |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[offset + 4 * i + b])) << (8 * b);
        }
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ojson block_entry(std::size_t offset, std::size_t len) {
    ojson e;
    e["byte_offset"] = offset;
    e["byte_len"] = len;
    return e;
}

// Checks that [offset, offset+len) describes `count` floats inside buf.
void check_block(const ojson& entry, std::size_t count, std::size_t file_size, const std::string& what) {
    const auto offset = entry.at("byte_offset").get<std::size_t>();
    const auto len = entry.at("byte_len").get<std::size_t>();
    if (len != count * sizeof(float)) {
        throw IoError(what + ".byte_len is " + std::to_string(len) + ", expected " +
                      std::to_string(count * sizeof(float)));
    }
    if (offset + len > file_size) {
        throw IoError(what + " extends past end of file (truncated checkpoint?)");
    }
}

}  // namespace

void save_store(const fs::path& dir, const ojson& config, const ParamStore<float>& params,
                const StoreMoments* moments) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    ojson manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["config"] = config;
    ojson tensors = ojson::object();
    std::string weights;
    for (const auto& [name, t] : params.entries()) {
        ojson e;
        e["shape"] = t.shape();
        e["dtype"] = "float32";
        e["byte_offset"] = weights.size();
        e["byte_len"] = t.numel() * sizeof(float);
        append_le(weights, t.data());
        tensors[name] = std::move(e);
    }
    manifest["tensors"] = std::move(tensors);

    if (moments) {
        std::string optim;
        ojson entries = ojson::object();
        for (const auto& [name, t] : params.entries()) {
            auto it = moments->find(name);
            if (it == moments->end()) continue;
            const auto& st = it->second;
            if (st.m.size() != t.numel() || st.v.size() != t.numel()) {
                throw ContractError("optimizer moments for " + name + " do not match parameter size");
            }
            ojson e;
            e["steps"] = st.steps;
            e["m"] = block_entry(optim.size(), st.m.size() * sizeof(float));
            append_le(optim, st.m);
            e["v"] = block_entry(optim.size(), st.v.size() * sizeof(float));
            append_le(optim, st.v);
            entries[name] = std::move(e);
        }
        ojson section;
        section["file"] = "optim.bin";
        section["tensors"] = std::move(entries);
        manifest["optim"] = std::move(section);
        write_file(dir / "optim.bin", optim);
    }
    write_file(dir / "weights.bin", weights);
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

StoreCheckpoint load_store(const fs::path& dir, const std::vector<std::pair<std::string, Shape>>* expected_layout) {
    const auto manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw IoError("missing checkpoint manifest " + manifest_path.string());
    ojson manifest;
    try {
        manifest = ojson::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    StoreCheckpoint out;
    try {
        const auto version = manifest.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion) {
            throw IoError("manifest format_version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
        }
        out.config = manifest.at("config");
        const auto& tensors = manifest.at("tensors");
        const std::string weights = read_file(dir / "weights.bin");

        if (expected_layout) {
            if (tensors.size() != expected_layout->size()) {
                throw IoError("manifest lists " + std::to_string(tensors.size()) + " tensors, config implies " +
                              std::to_string(expected_layout->size()));
            }
            std::size_t i = 0;
            for (const auto& [name, entry] : tensors.items()) {
                const auto& [want_name, want_shape] = (*expected_layout)[i++];
                if (name != want_name) {
                    throw IoError("manifest tensor '" + name + "' where '" + want_name + "' was expected");
                }
                const auto shape = entry.at("shape").get<Shape>();
                if (shape != want_shape) {
                    throw IoError("tensors." + name + ".shape is " + shape_str(shape) + ", config implies " +
                                  shape_str(want_shape));
                }
            }
        }

        std::size_t total = 0;
        for (const auto& [name, entry] : tensors.items()) {
            const auto shape = entry.at("shape").get<Shape>();
            if (entry.at("dtype").get<std::string>() != "float32") {
                throw IoError("tensors." + name + ".dtype must be float32");
            }
            const std::size_t count = shape_numel(shape);
            check_block(entry, count, weights.size(), "tensors." + name);
            const auto offset = entry.at("byte_offset").get<std::size_t>();
            out.params.add(name, Tensor<float>::from(shape, read_le(weights, offset, count), true));
            total += count * sizeof(float);
        }
        if (total != weights.size()) {
            throw IoError("weights.bin holds " + std::to_string(weights.size()) + " bytes, manifest describes " +
                          std::to_string(total));
        }

        if (manifest.contains("optim")) {
            const auto& section = manifest.at("optim");
            const std::string optim = read_file(dir / section.at("file").get<std::string>());
            StoreMoments moments;
            for (const auto& [name, entry] : section.at("tensors").items()) {
                if (!out.params.contains(name)) throw IoError("optim.tensors." + name + " has no matching parameter");
                const std::size_t count = out.params.get(name).numel();
                check_block(entry.at("m"), count, optim.size(), "optim.tensors." + name + ".m");
                check_block(entry.at("v"), count, optim.size(), "optim.tensors." + name + ".v");
                MomentState st;
                st.steps = entry.at("steps").get<std::uint64_t>();
                st.m = read_le(optim, entry.at("m").at("byte_offset").get<std::size_t>(), count);
                st.v = read_le(optim, entry.at("v").at("byte_offset").get<std::size_t>(), count);
                moments.emplace(name, std::move(st));
            }
            out.moments = std::move(moments);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + manifest_path.string() + ": " + e.what());
    }
    return out;
}

void save_checkpoint(const fs::path& dir, const ParamStore<float>& params, const ModelConfig& config,
                     const StoreMoments* moments) {
    ojson cfg;
    to_json(cfg, config);
    save_store(dir, cfg, params, moments);
}

ModelCheckpoint load_checkpoint(const fs::path& dir) {
    ojson manifest;
    const auto manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw IoError("missing checkpoint manifest " + manifest_path.string());
    ModelConfig config;
    try {
        manifest = ojson::parse(read_file(manifest_path));
        config = model_config_from_json(nlohmann::json::parse(manifest.at("config").dump()));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + manifest_path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw IoError("manifest " + manifest_path.string() + " config: " + e.what());
    }
    const auto layout = param_layout(config);
    auto store = load_store(dir, &layout);
    return {config, std::move(store.params), std::move(store.moments)};
}

}  // namespace quietread
