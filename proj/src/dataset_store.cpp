#include "synthpair/dataset_store.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <unordered_map>

#include "synthpair/common.hpp"

namespace fs = std::filesystem;

namespace synthpair {

std::string format_entry(const ManifestEntry& e) {
    for (const auto* field : {&e.caption, &e.image_path, &e.checksum, &e.backend}) {
        if (field->find_first_of("\t\n") != std::string::npos) {
            throw Error("manifest field for caption " + std::to_string(e.caption_id) + " contains a tab or newline");
        }
    }
    std::ostringstream out;
    out << e.caption_id << '\t' << e.concept_id << '\t' << e.caption << '\t' << e.image_path << '\t' << e.checksum
        << '\t' << e.backend << '\t' << e.seed << '\t' << (e.status == EntryStatus::Ok ? "ok" : "failed");
    return out.str();
}

ManifestEntry parse_entry(const std::string& line) {
    auto f = split(line, '\t');
    if (f.size() != 8) throw Error("manifest row has " + std::to_string(f.size()) + " fields, expected 8");
    ManifestEntry e;
    try {
        e.caption_id = static_cast<CaptionId>(std::stoul(f[0]));
        e.concept_id = static_cast<ConceptId>(std::stoul(f[1]));
        e.seed = std::stoull(f[6]);
    } catch (const std::exception&) {
        throw Error("manifest row has a malformed integer field");
    }
    e.caption = std::move(f[2]);
    e.image_path = std::move(f[3]);
    e.checksum = std::move(f[4]);
    e.backend = std::move(f[5]);
    if (f[7] == "ok") {
        e.status = EntryStatus::Ok;
    } else if (f[7] == "failed") {
        e.status = EntryStatus::Failed;
    } else {
        throw Error("manifest row has unknown status '" + f[7] + "'");
    }
    return e;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void atomic_write(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw Error("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

void write_manifest(const fs::path& path, std::vector<ManifestEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.caption_id < b.caption_id; });
    std::set<std::string> paths;
    std::string body;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i > 0 && entries[i].caption_id == entries[i - 1].caption_id) {
            throw Error("duplicate caption id " + std::to_string(entries[i].caption_id) + " in manifest");
        }
        if (!entries[i].image_path.empty() && !paths.insert(entries[i].image_path).second) {
            throw Error("duplicate image path " + entries[i].image_path + " in manifest");
        }
        body += format_entry(entries[i]);
        body += '\n';
    }
    atomic_write(path, body);
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(parse_entry(line));
        } catch (const Error& e) {
            throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<ManifestEntry> read_manifest_log(const fs::path& path) {
    if (!fs::exists(path)) return {};
    const std::string data = read_file(path);
    std::unordered_map<CaptionId, ManifestEntry> latest;
    std::size_t start = 0;
    while (start < data.size()) {
        const auto nl = data.find('\n', start);
        if (nl == std::string::npos) break;  // torn final append
        const std::string line = data.substr(start, nl - start);
        start = nl + 1;
        if (line.empty()) continue;
        try {
            auto e = parse_entry(line);
            latest[e.caption_id] = std::move(e);
        } catch (const Error&) {
            // A torn write can only leave a bad row at the tail; skip it.
        }
    }
    std::vector<ManifestEntry> out;
    out.reserve(latest.size());
    for (auto& [id, e] : latest) out.push_back(std::move(e));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.caption_id < b.caption_id; });
    return out;
}

VerifyReport verify_dataset(const std::vector<ManifestEntry>& manifest, const fs::path& root) {
    VerifyReport report;
    for (const auto& e : manifest) {
        if (e.status == EntryStatus::Failed) {
            ++report.failed_count;
            continue;
        }
        const auto path = root / e.image_path;
        if (e.image_path.empty() || !fs::exists(path)) {
            report.corrupt.push_back({e.caption_id, "missing"});
            continue;
        }
        if (sha256_hex(read_file(path)) != e.checksum) {
            report.corrupt.push_back({e.caption_id, "checksum_mismatch"});
            continue;
        }
        ++report.ok_count;
    }
    return report;
}

DatasetStore::DatasetStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_ / "images"); }

std::string DatasetStore::image_relpath(CaptionId id) { return "images/" + std::to_string(id) + ".ppm"; }

void DatasetStore::write_image(CaptionId id, const std::string& bytes) { atomic_write(root_ / image_relpath(id), bytes); }

void DatasetStore::append(const ManifestEntry& e) {
    const std::string line = format_entry(e) + '\n';
    std::lock_guard lock(mu_);
    std::ofstream out(manifest_path(), std::ios::binary | std::ios::app);
    if (!out) throw Error("cannot append to " + manifest_path().string());
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.flush();
    if (!out) throw Error("append failed for " + manifest_path().string());
}

std::vector<ManifestEntry> DatasetStore::load_existing() const { return read_manifest_log(manifest_path()); }

}  // namespace synthpair
