#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() / ("synthpair_" + tag + "_" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Oracles below are written from the rules, not from the library code.

inline std::string oracle_normalize(const std::string& s) {
    std::istringstream in(s);
    std::string word, out;
    while (in >> word) {
        if (!out.empty()) out += ' ';
        for (char c : word) out += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
    }
    return out;
}

inline bool oracle_word_char(char c) {
    const auto u = static_cast<unsigned char>(c);
    return std::isalnum(u) || u >= 0x80;
}

/// Naive per-concept scan: every occurrence of every concept is checked for
/// non-word neighbours.
inline std::set<std::size_t> oracle_match(const std::vector<std::string>& concepts, const std::string& caption,
                                          bool boundaries = true) {
    const std::string text = oracle_normalize(caption);
    std::set<std::size_t> out;
    for (std::size_t c = 0; c < concepts.size(); ++c) {
        const auto& needle = concepts[c];
        for (std::size_t pos = 0; pos + needle.size() <= text.size(); ++pos) {
            if (text.compare(pos, needle.size(), needle) != 0) continue;
            const bool left = pos == 0 || !oracle_word_char(text[pos - 1]);
            const std::size_t end = pos + needle.size();
            const bool right = end == text.size() || !oracle_word_char(text[end]);
            if (!boundaries || (left && right)) {
                out.insert(c);
                break;
            }
        }
    }
    return out;
}

/// Hand-rolled generator of short lowercase words over a tiny alphabet, so
/// that random concepts and captions collide often.
class WordGen {
public:
    explicit WordGen(std::uint64_t seed) : rng_(seed) {}

    std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
    std::mt19937_64& engine() { return rng_; }

    std::string word(std::size_t max_len = 4) {
        static const std::string alphabet = "abcab";
        std::string w;
        const std::size_t len = 1 + below(max_len);
        for (std::size_t i = 0; i < len; ++i) w += alphabet[below(alphabet.size())];
        return w;
    }

    std::string phrase(std::size_t max_words) {
        std::string p;
        const std::size_t n = 1 + below(max_words);
        for (std::size_t i = 0; i < n; ++i) {
            if (i) p += ' ';
            p += word();
        }
        return p;
    }

    /// Caption with random separators, punctuation and case noise.
    std::string caption(std::size_t max_words) {
        static const std::vector<std::string> seps = {" ", "  ", ", ", "-", ".", " (", ")", "\t", "'s "};
        std::string out;
        const std::size_t n = below(max_words + 1);
        for (std::size_t i = 0; i < n; ++i) {
            if (i) out += seps[below(seps.size())];
            std::string w = word();
            if (below(5) == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
            out += w;
        }
        return out;
    }

private:
    std::mt19937_64 rng_;
};

}  // namespace testing
