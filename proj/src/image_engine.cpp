#include "synthpair/image_engine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <unordered_set>

#include <png.h>

#include "synthpair/common.hpp"
#include "synthpair/parallel.hpp"

namespace synthpair {

std::string encode_ppm(const Image& img) {
    if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
        throw Error("encode_ppm: pixel buffer does not match dimensions");
    }
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    return out;
}

namespace {

// Reads the next whitespace-delimited header token, skipping comments.
std::string_view ppm_token(std::string_view bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (is_space_byte(static_cast<unsigned char>(bytes[pos]))) {
            ++pos;
        } else {
            break;
        }
    }
    const auto start = pos;
    while (pos < bytes.size() && !is_space_byte(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
}

int parse_positive(std::string_view tok) {
    if (tok.empty() || tok.size() > 6) throw Error("decode_ppm: bad header value");
    int v = 0;
    for (char c : tok) {
        if (c < '0' || c > '9') throw Error("decode_ppm: bad header value");
        v = v * 10 + (c - '0');
    }
    if (v <= 0) throw Error("decode_ppm: bad header value");
    return v;
}

}  // namespace

Image decode_ppm(std::string_view bytes) {
    std::size_t pos = 0;
    if (ppm_token(bytes, pos) != "P6") throw Error("decode_ppm: not a binary PPM");
    Image img;
    img.width = parse_positive(ppm_token(bytes, pos));
    img.height = parse_positive(ppm_token(bytes, pos));
    if (parse_positive(ppm_token(bytes, pos)) != 255) throw Error("decode_ppm: only maxval 255 is supported");
    ++pos;  // single whitespace byte before the raster
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
    if (bytes.size() < pos + n) throw Error("decode_ppm: truncated raster");
    img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

Image decode_image(std::string_view bytes) {
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
        throw Error("decode_image: unsupported image encoding");
    }
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
        throw Error(std::string("decode_image: ") + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    Image img;
    img.width = static_cast<int>(png.width);
    img.height = static_cast<int>(png.height);
    img.rgb.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
        png_image_free(&png);
        throw Error(std::string("decode_image: ") + png.message);
    }
    return img;
}

Image box_downscale(const Image& img, int size) {
    if (size <= 0) throw Error("box_downscale: size must be positive");
    const int side = std::min(img.width, img.height);
    if (side < size) throw Error("box_downscale: image smaller than target size");
    const int block = side / size;
    const int crop = block * size;
    const int x0 = (img.width - crop) / 2;
    const int y0 = (img.height - crop) / 2;
    const int n = block * block;

    Image out;
    out.width = out.height = size;
    out.rgb.resize(static_cast<std::size_t>(size) * size * 3);
    for (int by = 0; by < size; ++by) {
        for (int bx = 0; bx < size; ++bx) {
            for (int c = 0; c < 3; ++c) {
                int sum = 0;
                for (int y = 0; y < block; ++y) {
                    for (int x = 0; x < block; ++x) sum += img.at(x0 + bx * block + x, y0 + by * block + y, c);
                }
                out.rgb[(static_cast<std::size_t>(by) * size + bx) * 3 + c] =
                    static_cast<std::uint8_t>((sum + n / 2) / n);
            }
        }
    }
    return out;
}

void TtiParams::validate() const {
    if (store_size <= 0 || gen_width <= 0 || gen_height <= 0) throw Error("tti sizes must be positive");
    if (store_size > std::min(gen_width, gen_height)) throw Error("store_size exceeds the generated size");
    if (num_steps <= 0) throw Error("num_steps must be positive");
    if (retries < 1) throw Error("retries must be >= 1");
}

std::uint64_t image_seed(std::uint64_t seed_base, CaptionId id) {
    return hash_values(seed_base, 0x1a6eULL, static_cast<std::uint64_t>(id)) >> 1;
}

TtiRequest build_tti_request(std::string_view caption, const TtiParams& params, CaptionId id) {
    TtiRequest req;
    req.prompt = std::string(caption);
    req.guidance_scale = params.guidance_scale;
    req.num_inference_steps = params.num_steps;
    req.width = params.gen_width;
    req.height = params.gen_height;
    req.seed = image_seed(params.seed_base, id);
    return req;
}

namespace {

ImageRecord finish_record(CaptionId id, Image img, std::string backend, std::uint64_t seed, int attempts) {
    ImageRecord rec;
    rec.caption_id = id;
    rec.encoded = encode_ppm(img);
    rec.checksum = sha256_hex(rec.encoded);
    rec.image = std::move(img);
    rec.backend = std::move(backend);
    rec.seed = seed;
    rec.attempts = attempts;
    return rec;
}

}  // namespace

ImageRecord render_remote(ImageClient& client, std::string_view caption, const TtiParams& params, CaptionId id) {
    const auto req = build_tti_request(caption, params, id);
    for (int attempt = 1; attempt <= params.retries; ++attempt) {
        const auto res = client.render(req);
        if (res.status < 200 || res.status >= 300) continue;
        try {
            auto img = box_downscale(decode_image(res.body), params.store_size);
            return finish_record(id, std::move(img), "remote", req.seed, attempt);
        } catch (const Error&) {
            continue;
        }
    }
    ImageRecord failed;
    failed.caption_id = id;
    failed.backend = "remote";
    failed.seed = req.seed;
    failed.failed = true;
    failed.attempts = params.retries;
    return failed;
}

// ---------------------------------------------------------------------------

std::uint8_t mock_channel_value(double acc, double norm) {
    if (norm <= 0.0) return 128;
    const double v = 127.5 + 127.5 * std::tanh(kMockGain * acc / norm);
    return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

int mock_gram_sign(std::uint64_t gram_hash, int i, int j, int c) {
    const auto h = hash_values(gram_hash, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j),
                               static_cast<std::uint64_t>(c));
    return (h >> 63) ? -1 : 1;
}

std::vector<std::string> char_trigrams(std::string_view caption) {
    std::string lower(caption);
    for (char& ch : lower) {
        if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    }
    std::vector<std::string> grams;
    for (std::size_t i = 0; i + 3 <= lower.size(); ++i) grams.push_back(lower.substr(i, 3));
    return grams;
}

std::vector<std::uint8_t> mock_block_colors(std::string_view caption) {
    std::map<std::string, int> multiset;
    for (auto& g : char_trigrams(caption)) ++multiset[g];
    double norm2 = 0.0;
    std::vector<std::pair<std::uint64_t, int>> weighted;
    for (const auto& [g, n] : multiset) {
        weighted.emplace_back(fnv1a64(g), n);
        norm2 += static_cast<double>(n) * n;
    }
    const double norm = std::sqrt(norm2);

    std::vector<std::uint8_t> colors(kMockGrid * kMockGrid * 3);
    for (int i = 0; i < kMockGrid; ++i) {
        for (int j = 0; j < kMockGrid; ++j) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (const auto& [h, n] : weighted) acc += n * mock_gram_sign(h, i, j, c);
                colors[(i * kMockGrid + j) * 3 + c] = mock_channel_value(acc, norm);
            }
        }
    }
    return colors;
}

ImageRecord render_mock(std::string_view caption, const TtiParams& params, CaptionId id) {
    const int size = params.store_size;
    const auto colors = mock_block_colors(caption);
    Image img;
    img.width = img.height = size;
    img.rgb.resize(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y) {
        const int i = y * kMockGrid / size;  // block row
        for (int x = 0; x < size; ++x) {
            const int j = x * kMockGrid / size;
            for (int c = 0; c < 3; ++c) {
                img.rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c] = colors[(i * kMockGrid + j) * 3 + c];
            }
        }
    }
    return finish_record(id, std::move(img), "mock", image_seed(params.seed_base, id), 1);
}

Renderer mock_renderer(const TtiParams& params) {
    params.validate();
    return [params](std::string_view caption, CaptionId id) { return render_mock(caption, params, id); };
}

Renderer remote_renderer(ImageClient& client, const TtiParams& params) {
    params.validate();
    return [&client, params](std::string_view caption, CaptionId id) {
        return render_remote(client, caption, params, id);
    };
}

std::vector<ManifestEntry> run_generation(const std::vector<CaptionRecord>& captions, const Renderer& render,
                                          std::size_t concurrency, DatasetStore& store, GenerationRunStats* stats) {
    auto existing = store.load_existing();
    std::unordered_set<CaptionId> done;
    for (const auto& e : existing) {
        if (e.status == EntryStatus::Ok) done.insert(e.caption_id);
    }

    std::vector<const CaptionRecord*> todo;
    for (const auto& c : captions) {
        if (!done.count(c.id)) todo.push_back(&c);
    }

    std::vector<ManifestEntry> fresh(todo.size());
    std::vector<unsigned char> finished(todo.size(), 0);
    for_each_bounded(todo.size(), concurrency, [&](std::size_t k) {
        const auto& cap = *todo[k];
        auto rec = render(cap.text, cap.id);
        ManifestEntry e;
        e.caption_id = cap.id;
        e.concept_id = cap.source_concept_id;
        e.caption = cap.text;
        e.backend = rec.backend;
        e.seed = rec.seed;
        if (rec.failed) {
            e.status = EntryStatus::Failed;
        } else {
            store.write_image(cap.id, rec.encoded);
            e.image_path = DatasetStore::image_relpath(cap.id);
            e.checksum = rec.checksum;
            e.status = EntryStatus::Ok;
        }
        store.append(e);
        fresh[k] = std::move(e);
        finished[k] = 1;
    });

    std::map<CaptionId, ManifestEntry> merged;
    for (auto& e : existing) merged[e.caption_id] = std::move(e);
    GenerationRunStats s;
    s.skipped = captions.size() - todo.size();
    for (std::size_t k = 0; k < fresh.size(); ++k) {
        if (!finished[k]) continue;
        ++s.rendered;
        if (fresh[k].status == EntryStatus::Failed) ++s.failed;
        merged[fresh[k].caption_id] = std::move(fresh[k]);
    }
    std::vector<ManifestEntry> out;
    out.reserve(merged.size());
    for (auto& [id, e] : merged) out.push_back(std::move(e));
    write_manifest(store.manifest_path(), out);
    if (stats) *stats = s;
    return out;
}

}  // namespace synthpair
