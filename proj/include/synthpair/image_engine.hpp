#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "synthpair/caption_engine.hpp"
#include "synthpair/dataset_store.hpp"
#include "synthpair/endpoints.hpp"

namespace synthpair {

/// Interleaved 8-bit RGB, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    bool operator==(const Image&) const = default;
};

/// Binary PPM (P6, maxval 255). This is the on-disk format: lossless and
/// byte-stable.
std::string encode_ppm(const Image& img);
Image decode_ppm(std::string_view bytes);

/// Decodes PNG or PPM by signature. Throws Error on anything else.
Image decode_image(std::string_view bytes);

/// Center-crops to the largest square that is a multiple of `size`, then
/// averages aligned blocks (rounding half up). Throws if the image is smaller
/// than `size`.
Image box_downscale(const Image& img, int size);

struct TtiParams {
    double guidance_scale = 2.0;
    int num_steps = 50;
    int gen_width = 512;
    int gen_height = 512;
    int store_size = 256;
    std::uint64_t seed_base = 0;
    int retries = 3;  ///< total attempts per image against a remote endpoint

    void validate() const;
};

struct ImageRecord {
    CaptionId caption_id = 0;
    Image image;
    std::string encoded;   ///< PPM bytes written to disk
    std::string checksum;  ///< sha256 of `encoded`
    std::string backend;   ///< "remote" | "mock"
    std::uint64_t seed = 0;
    bool failed = false;
    int attempts = 1;
};

std::uint64_t image_seed(std::uint64_t seed_base, CaptionId id);

TtiRequest build_tti_request(std::string_view caption, const TtiParams& params, CaptionId id);

ImageRecord render_remote(ImageClient& client, std::string_view caption, const TtiParams& params, CaptionId id);

// ---------------------------------------------------------------------------
// Mock renderer: an 8x8 grid of solid blocks whose colors are a fixed
// function of the caption's character 3-gram multiset.

constexpr int kMockGrid = 8;
constexpr double kMockGain = 0.6;

/// Block color channel value for accumulated signed gram weight `acc` and gram
/// count L2 norm `norm`.
std::uint8_t mock_channel_value(double acc, double norm);

/// +1/-1 contribution of a gram (by its 64-bit hash) to block (i, j), channel c.
int mock_gram_sign(std::uint64_t gram_hash, int i, int j, int c);

/// Raw-byte 3-grams of the ASCII-lowercased caption.
std::vector<std::string> char_trigrams(std::string_view caption);

/// kMockGrid x kMockGrid x 3 table of block colors.
std::vector<std::uint8_t> mock_block_colors(std::string_view caption);

ImageRecord render_mock(std::string_view caption, const TtiParams& params, CaptionId id);

// ---------------------------------------------------------------------------

using Renderer = std::function<ImageRecord(std::string_view caption, CaptionId id)>;

Renderer mock_renderer(const TtiParams& params);
Renderer remote_renderer(ImageClient& client, const TtiParams& params);

struct GenerationRunStats {
    std::size_t rendered = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
};

/// Renders every caption not already present with status ok in the store's
/// manifest. At most `concurrency` renders run at once; each finished render
/// is appended to the manifest immediately, and the manifest is rewritten
/// sorted at the end. Returns the final manifest.
std::vector<ManifestEntry> run_generation(const std::vector<CaptionRecord>& captions, const Renderer& render,
                                          std::size_t concurrency, DatasetStore& store,
                                          GenerationRunStats* stats = nullptr);

}  // namespace synthpair
