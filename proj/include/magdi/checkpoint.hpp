#pragma once

// Checkpoint directory layout:
//
//   manifest.json  format version, dimensions, vocabulary and the ordered
//                  parameter list of each section
//   student.bin    student parameters, little-endian float32, manifest order
//   head.bin       distillation head parameters (optional)
//
// The inference loader reads only the student section.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "magdi/distill_head.hpp"
#include "magdi/mag_io.hpp"
#include "magdi/student.hpp"

namespace magdi {

inline constexpr int kCheckpointVersion = 1;

enum class CheckpointErrc { Io, Manifest, VersionMismatch, TruncatedBlob, SizeMismatch, MissingHead };

inline std::string_view to_string(CheckpointErrc c) {
    switch (c) {
        case CheckpointErrc::Io: return "io";
        case CheckpointErrc::Manifest: return "manifest";
        case CheckpointErrc::VersionMismatch: return "version_mismatch";
        case CheckpointErrc::TruncatedBlob: return "truncated_blob";
        case CheckpointErrc::SizeMismatch: return "size_mismatch";
        case CheckpointErrc::MissingHead: return "missing_head";
    }
    return "unknown";
}

class CheckpointError : public std::runtime_error {
   public:
    CheckpointError(CheckpointErrc code, const std::string& what)
        : std::runtime_error("checkpoint " + std::string(to_string(code)) + ": " + what), code_(code) {}
    CheckpointErrc code() const { return code_; }

   private:
    CheckpointErrc code_;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline std::string pack_f32(const ad::ParameterStore& store) {
    std::string out;
    out.reserve(store.scalar_count() * 4);
    for (const auto& p : store) {
        for (double v : p.value.data()) {
            std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            if constexpr (std::endian::native == std::endian::big) {
                bits = __builtin_bswap32(bits);
            }
            char b[4];
            std::memcpy(b, &bits, 4);
            out.append(b, 4);
        }
    }
    return out;
}

inline ordered_json param_list(const ad::ParameterStore& store) {
    ordered_json list = ordered_json::array();
    for (const auto& p : store) {
        list.push_back({{"name", p.name}, {"shape", p.value.shape()}});
    }
    return list;
}

inline void write_binary_atomic(const std::filesystem::path& path, const std::string& bytes) {
    try {
        write_text_file_atomic(path, bytes);
    } catch (const MagError& e) {
        throw CheckpointError(CheckpointErrc::Io, e.what());
    }
}

/// Checks a manifest section against the store layout and fills the values.
inline void unpack_section(const ordered_json& section, const std::filesystem::path& dir, ad::ParameterStore& store,
                           std::string_view what) {
    const auto& list = section.at("params");
    if (!list.is_array() || list.size() != store.size()) {
        throw CheckpointError(CheckpointErrc::SizeMismatch,
                              std::string(what) + ": parameter list disagrees with the recorded dimensions");
    }
    std::size_t expected = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& p = store[i];
        if (list[i].at("name").get<std::string>() != p.name ||
            list[i].at("shape").get<std::vector<std::size_t>>() != p.value.shape()) {
            throw CheckpointError(CheckpointErrc::SizeMismatch,
                                  std::string(what) + ": parameter " + std::to_string(i) + " ('" + p.name +
                                      "') disagrees with the recorded dimensions");
        }
        expected += p.value.size() * 4;
    }
    const auto recorded = section.at("bytes").get<std::size_t>();
    if (recorded != expected) {
        throw CheckpointError(CheckpointErrc::SizeMismatch, std::string(what) + ": manifest records " +
                                                                std::to_string(recorded) + " bytes, shapes imply " +
                                                                std::to_string(expected));
    }
    const auto path = dir / section.at("blob").get<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(CheckpointErrc::Io, "cannot open '" + path.string() + "'");
    }
    const std::string bytes(std::istreambuf_iterator<char>(in), {});
    if (bytes.size() < recorded) {
        throw CheckpointError(CheckpointErrc::TruncatedBlob, path.filename().string() + " holds " +
                                                                 std::to_string(bytes.size()) + " of " +
                                                                 std::to_string(recorded) + " bytes");
    }
    if (bytes.size() > recorded) {
        throw CheckpointError(CheckpointErrc::SizeMismatch, path.filename().string() + " holds " +
                                                                std::to_string(bytes.size()) + " bytes, manifest records " +
                                                                std::to_string(recorded));
    }
    std::size_t off = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
        for (double& v : store[i].value.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, bytes.data() + off, 4);
            if constexpr (std::endian::native == std::endian::big) {
                bits = __builtin_bswap32(bits);
            }
            v = static_cast<double>(std::bit_cast<float>(bits));
            off += 4;
        }
    }
}

inline ordered_json read_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(CheckpointErrc::Io, "cannot open '" + path.string() + "'");
    }
    ordered_json m;
    try {
        m = ordered_json::parse(in);
    } catch (const ordered_json::exception& e) {
        throw CheckpointError(CheckpointErrc::Manifest, e.what());
    }
    if (!m.is_object() || !m.contains("format_version") || !m["format_version"].is_number_integer()) {
        throw CheckpointError(CheckpointErrc::Manifest, "missing integer format_version");
    }
    const int version = m["format_version"].get<int>();
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrc::VersionMismatch, "format_version " + std::to_string(version) +
                                                                   ", this build reads " +
                                                                   std::to_string(kCheckpointVersion));
    }
    if (!m.contains("student")) {
        throw CheckpointError(CheckpointErrc::Manifest, "missing student section");
    }
    return m;
}

template <class F>
auto manifest_guard(F&& f) {
    try {
        return f();
    } catch (const ordered_json::exception& e) {
        throw CheckpointError(CheckpointErrc::Manifest, e.what());
    }
}

}  // namespace detail

/// Writes the student (and optionally the head) under `dir`. `extra` is stored
/// verbatim as the manifest's "meta" object.
inline void save_checkpoint(const std::filesystem::path& dir, const StudentModel& student, const DistillHead* head,
                            const ordered_json& extra = ordered_json::object()) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw CheckpointError(CheckpointErrc::Io, "cannot create '" + dir.string() + "': " + ec.message());
    }
    const auto& d = student.dims();
    ordered_json m;
    m["format_version"] = kCheckpointVersion;
    m["student"] = {{"dims",
                     {{"vocab", d.vocab}, {"width", d.width}, {"heads", d.heads}, {"layers", d.layers}, {"context", d.context}}},
                    {"vocab", student.vocab().symbols()},
                    {"blob", "student.bin"},
                    {"bytes", student.params().scalar_count() * 4},
                    {"params", detail::param_list(student.params())}};
    detail::write_binary_atomic(dir / "student.bin", detail::pack_f32(student.params()));
    if (head != nullptr) {
        m["head"] = {{"width", head->width()},
                     {"gcn_width", head->gcn_width()},
                     {"pooling", to_string(head->pooling())},
                     {"blob", "head.bin"},
                     {"bytes", head->params().scalar_count() * 4},
                     {"params", detail::param_list(head->params())}};
        detail::write_binary_atomic(dir / "head.bin", detail::pack_f32(head->params()));
    } else {
        std::filesystem::remove(dir / "head.bin", ec);
    }
    m["meta"] = extra;
    detail::write_binary_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

inline ordered_json checkpoint_meta(const std::filesystem::path& dir) {
    const ordered_json m = detail::read_manifest(dir);
    return m.contains("meta") ? m["meta"] : ordered_json::object();
}

/// Inference view: student parameters only.
inline StudentModel load_student(const std::filesystem::path& dir) {
    const ordered_json m = detail::read_manifest(dir);
    return detail::manifest_guard([&] {
        const auto& s = m.at("student");
        const auto& dj = s.at("dims");
        const StudentDims dims{dj.at("vocab").get<int>(), dj.at("width").get<int>(), dj.at("heads").get<int>(),
                               dj.at("layers").get<int>(), dj.at("context").get<int>()};
        StudentModel model(Vocab(s.at("vocab").get<std::vector<std::string>>()), dims, 0);
        detail::unpack_section(s, dir, model.params(), "student");
        return model;
    });
}

struct LoadedCheckpoint {
    StudentModel student;
    DistillHead head;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    StudentModel student = load_student(dir);
    const ordered_json m = detail::read_manifest(dir);
    if (!m.contains("head")) {
        throw CheckpointError(CheckpointErrc::MissingHead, "manifest has no head section");
    }
    return detail::manifest_guard([&] {
        const auto& h = m.at("head");
        DistillHead head(h.at("width").get<int>(), h.at("gcn_width").get<int>(),
                         parse_pooling(h.at("pooling").get<std::string>()), 0);
        detail::unpack_section(h, dir, head.params(), "head");
        return LoadedCheckpoint{std::move(student), std::move(head)};
    });
}

/// Removes the head section and blob, leaving an inference-only checkpoint.
inline void strip_head(const std::filesystem::path& dir) {
    ordered_json m = detail::read_manifest(dir);
    m.erase("head");
    std::error_code ec;
    std::filesystem::remove(dir / "head.bin", ec);
    detail::write_binary_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace magdi
