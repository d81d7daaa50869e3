#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "synthpair/caption_engine.hpp"

namespace synthpair {

enum class EntryStatus { Ok, Failed };

struct ManifestEntry {
    CaptionId caption_id = 0;
    ConceptId concept_id = 0;
    std::string caption;
    std::string image_path;  ///< relative to the dataset root; empty for failed renders
    std::string checksum;    ///< sha256 of the image file bytes; empty for failed renders
    std::string backend;     ///< "remote" | "mock"
    std::uint64_t seed = 0;
    EntryStatus status = EntryStatus::Ok;

    bool operator==(const ManifestEntry&) const = default;
};

std::string format_entry(const ManifestEntry& e);
ManifestEntry parse_entry(const std::string& line);

/// Sorts by caption id and atomically replaces `path`. Throws on duplicate ids
/// or duplicate image paths; the previous file is untouched on any failure.
void write_manifest(const std::filesystem::path& path, std::vector<ManifestEntry> entries);

/// Strict reader: every line must parse.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Reader for a manifest that may have been cut off mid-append: an unterminated
/// final line is ignored and later rows for the same caption id win.
std::vector<ManifestEntry> read_manifest_log(const std::filesystem::path& path);

struct CorruptEntry {
    CaptionId caption_id;
    std::string reason;  ///< "missing" | "checksum_mismatch"
};

struct VerifyReport {
    std::size_t ok_count = 0;
    std::size_t failed_count = 0;
    std::vector<CorruptEntry> corrupt;
};

VerifyReport verify_dataset(const std::vector<ManifestEntry>& manifest, const std::filesystem::path& root);

/// Directory-of-files dataset: images under images/{caption_id}.ppm plus
/// manifest.tsv. One writer at a time; appends are serialized internally.
class DatasetStore {
public:
    explicit DatasetStore(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path manifest_path() const { return root_ / "manifest.tsv"; }
    static std::string image_relpath(CaptionId id);

    /// Writes bytes to images/{id}.ppm via a temp file and rename.
    void write_image(CaptionId id, const std::string& bytes);

    /// Appends one terminated, flushed line to the manifest.
    void append(const ManifestEntry& e);

    std::vector<ManifestEntry> load_existing() const;

private:
    std::filesystem::path root_;
    std::mutex mu_;
};

/// Writes bytes to path through a sibling temp file and rename.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace synthpair
