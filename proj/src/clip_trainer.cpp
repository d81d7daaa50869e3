#include "synthpair/clip_trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <ostream>

#include "synthpair/common.hpp"
#include "synthpair/parallel.hpp"

namespace synthpair {

std::pair<int, double> text_bucket(std::string_view gram) {
    const std::uint64_t h = splitmix64(fnv1a64(gram));
    const int bucket = static_cast<int>(h % kTextFeatureDim);
    const double sign = (h >> 63) ? -1.0 : 1.0;
    return {bucket, sign};
}

TextFeatures extract_text_features(std::string_view caption) {
    TextFeatures out;
    out.values = Vector::Zero(kTextFeatureDim);
    for (const auto& g : char_trigrams(caption)) {
        const auto [bucket, sign] = text_bucket(g);
        out.values[bucket] += sign;
    }
    const double norm = out.values.norm();
    if (norm == 0.0) {
        out.degenerate = true;
        return out;
    }
    out.values /= norm;
    return out;
}

Vector extract_image_features(const Image& img, int x0, int y0, int side) {
    if (side < kMockGrid) throw Error("image feature window must be at least 8 pixels");
    if (x0 < 0 || y0 < 0 || x0 + side > img.width || y0 + side > img.height) {
        throw Error("image feature window outside the image");
    }
    if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
        throw Error("image pixel buffer does not match its dimensions");
    }
    Vector f(kImageFeatureDim);
    for (int i = 0; i < kMockGrid; ++i) {
        const int ya = y0 + i * side / kMockGrid, yb = y0 + (i + 1) * side / kMockGrid;
        for (int j = 0; j < kMockGrid; ++j) {
            const int xa = x0 + j * side / kMockGrid, xb = x0 + (j + 1) * side / kMockGrid;
            const double n = static_cast<double>(yb - ya) * (xb - xa);
            for (int c = 0; c < 3; ++c) {
                std::uint64_t sum = 0;
                for (int y = ya; y < yb; ++y) {
                    for (int x = xa; x < xb; ++x) sum += img.at(x, y, c);
                }
                f[(i * kMockGrid + j) * 3 + c] = static_cast<double>(sum) / n / 255.0;
            }
        }
    }
    const double norm = f.norm();
    if (norm > 0.0) f /= norm;
    return f;
}

Vector extract_image_features(const Image& img) {
    if (img.width != img.height) {
        throw Error("image features need a square image, got " + std::to_string(img.width) + "x" +
                    std::to_string(img.height));
    }
    return extract_image_features(img, 0, 0, img.width);
}

// ---------------------------------------------------------------------------

EncoderParams init_params(int embed_dim, std::uint64_t seed) {
    if (embed_dim < 1) throw Error("embed_dim must be positive");
    Rng rng(hash_values(seed, 0x1417ULL));
    EncoderParams p;
    p.w_text.resize(embed_dim, kTextFeatureDim);
    p.w_image.resize(embed_dim, kImageFeatureDim);
    const double st = 1.0 / std::sqrt(static_cast<double>(kTextFeatureDim));
    const double si = 1.0 / std::sqrt(static_cast<double>(kImageFeatureDim));
    // Row-major fill order so the draw sequence is layout-independent.
    for (int r = 0; r < embed_dim; ++r) {
        for (int c = 0; c < kTextFeatureDim; ++c) p.w_text(r, c) = st * rng.normal();
    }
    for (int r = 0; r < embed_dim; ++r) {
        for (int c = 0; c < kImageFeatureDim; ++c) p.w_image(r, c) = si * rng.normal();
    }
    p.log_tau = std::log(kInitialTemperature);
    return p;
}

void clamp_temperature(EncoderParams& p) {
    p.log_tau = std::clamp(p.log_tau, std::log(kMinTemperature), std::log(kMaxTemperature));
}

namespace {

// Projects rows and normalizes them; returns the pre-normalization norms.
Matrix project_normalize(const Matrix& feats, const Matrix& w, Vector* norms_out) {
    // Plain loops with a fixed summation order: Eigen's vectorized kernels
    // round differently depending on a row's position in the batch.
    Matrix a(feats.rows(), w.rows());
    Vector norms(feats.rows());
    for (Eigen::Index k = 0; k < feats.rows(); ++k) {
        double sq = 0.0;
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            double acc = 0.0;
            for (Eigen::Index j = 0; j < w.cols(); ++j) acc += w(i, j) * feats(k, j);
            a(k, i) = acc;
            sq += acc * acc;
        }
        norms[k] = std::sqrt(sq);
        if (!(norms[k] > 0.0) || !std::isfinite(norms[k])) throw Error("degenerate embedding (zero or non-finite norm)");
        for (Eigen::Index i = 0; i < a.cols(); ++i) a(k, i) /= norms[k];
    }
    if (norms_out) *norms_out = std::move(norms);
    return a;
}

// Gradient through row normalization: d a = (d h - h (h . d h)) / ||a||.
Matrix backprop_normalize(const Matrix& h, const Matrix& dh, const Vector& norms) {
    Matrix da = dh;
    for (Eigen::Index k = 0; k < h.rows(); ++k) {
        const double proj = h.row(k).dot(dh.row(k));
        da.row(k) = (dh.row(k) - proj * h.row(k)) / norms[k];
    }
    return da;
}

void check_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw Error(std::string("non-finite values in ") + what);
}

// Sums in ascending order so the result is independent of input order.
double sorted_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

// logits(i, j) = h_i . z_j / tau, one dot product per entry.
Matrix pair_logits(const Matrix& h, const Matrix& z, double tau) {
    Matrix l(h.rows(), z.rows());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        for (Eigen::Index j = 0; j < z.rows(); ++j) {
            double acc = 0.0;
            for (Eigen::Index k = 0; k < h.cols(); ++k) acc += h(i, k) * z(j, k);
            l(i, j) = acc / tau;
        }
    }
    return l;
}

struct SymmetricSoftmax {
    Matrix p_row, p_col;
    double loss = 0.0;
};

// Row and column softmax of the logits and the symmetric cross-entropy with
// the diagonal as targets. Every reduction is order-independent, so permuting
// the batch permutes the terms without changing the loss.
SymmetricSoftmax symmetric_softmax(const Matrix& logits) {
    const Eigen::Index b = logits.rows();
    SymmetricSoftmax out;
    out.p_row.resize(b, b);
    out.p_col.resize(b, b);
    std::vector<double> terms, e(static_cast<std::size_t>(b));
    terms.reserve(static_cast<std::size_t>(2 * b));
    for (int dir = 0; dir < 2; ++dir) {
        for (Eigen::Index r = 0; r < b; ++r) {
            auto at = [&](Eigen::Index c) { return dir == 0 ? logits(r, c) : logits(c, r); };
            double m = at(0);
            for (Eigen::Index c = 1; c < b; ++c) m = std::max(m, at(c));
            for (Eigen::Index c = 0; c < b; ++c) e[static_cast<std::size_t>(c)] = std::exp(at(c) - m);
            const double sum = sorted_sum(e);
            for (Eigen::Index c = 0; c < b; ++c) {
                (dir == 0 ? out.p_row(r, c) : out.p_col(c, r)) = e[static_cast<std::size_t>(c)] / sum;
            }
            terms.push_back(m + std::log(sum) - logits(r, r));
        }
    }
    out.loss = 0.5 * sorted_sum(std::move(terms)) / static_cast<double>(b);
    return out;
}

}  // namespace

Matrix embed_texts(const EncoderParams& p, const Matrix& text_feats) {
    return project_normalize(text_feats, p.w_text, nullptr);
}

Matrix embed_images(const EncoderParams& p, const Matrix& image_feats) {
    return project_normalize(image_feats, p.w_image, nullptr);
}

double clip_loss_from_embeddings(const Matrix& h, const Matrix& z, double tau) {
    return symmetric_softmax(pair_logits(h, z, tau)).loss;
}

LossGrad clip_loss_and_grad(const EncoderParams& p, const Matrix& text_feats, const Matrix& image_feats) {
    const Eigen::Index b = text_feats.rows();
    if (b < 2) throw Error("contrastive loss needs a batch of at least 2");
    if (image_feats.rows() != b) throw Error("text and image batches differ in size");
    check_finite(text_feats, "text features");
    check_finite(image_feats, "image features");
    check_finite(p.w_text, "text weights");
    check_finite(p.w_image, "image weights");
    if (!std::isfinite(p.log_tau)) throw Error("non-finite log temperature");

    Vector norm_h, norm_z;
    const Matrix h = project_normalize(image_feats, p.w_image, &norm_h);
    const Matrix z = project_normalize(text_feats, p.w_text, &norm_z);
    const double tau = std::exp(p.log_tau);
    const Matrix logits = pair_logits(h, z, tau);
    const auto sm = symmetric_softmax(logits);

    LossGrad out;
    const double inv_b = 1.0 / static_cast<double>(b);
    out.loss = sm.loss;

    const Matrix g_logits = 0.5 * inv_b * (sm.p_row + sm.p_col - 2.0 * Matrix::Identity(b, b));
    out.g_log_tau = -(g_logits.array() * logits.array()).sum();
    const Matrix g_sim = g_logits / tau;
    const Matrix g_h = g_sim * z;
    const Matrix g_z = g_sim.transpose() * h;
    out.g_image = backprop_normalize(h, g_h, norm_h).transpose() * image_feats;
    out.g_text = backprop_normalize(z, g_z, norm_z).transpose() * text_feats;
    return out;
}

// ---------------------------------------------------------------------------

TrainConfig TrainConfig::full_scale() {
    TrainConfig c;
    c.epochs = 40;
    c.batch_size = 4096;
    c.base_lr = 5e-4;
    c.weight_decay = 0.5;
    c.warmup_epochs = 1;
    return c;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (batch_size < 2) throw Error("batch_size must be >= 2 for contrastive negatives");
    if (!(base_lr > 0.0)) throw Error("base_lr must be positive");
    if (weight_decay < 0.0) throw Error("weight_decay must be non-negative");
    if (warmup_epochs < 0 || warmup_epochs > epochs) throw Error("warmup_epochs must be within [0, epochs]");
    if (embed_dim < 1) throw Error("embed_dim must be positive");
}

double learning_rate_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg) {
    const double total = static_cast<double>(steps_per_epoch) * cfg.epochs;
    const double warmup = static_cast<double>(steps_per_epoch) * cfg.warmup_epochs;
    const double s = static_cast<double>(step) + 1.0;  // position after this step
    if (s <= warmup) return cfg.base_lr * s / warmup;
    if (total <= warmup) return cfg.base_lr;
    const double progress = std::min(1.0, (s - warmup) / (total - warmup));
    return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(hash_values(seed, 0xe90cULL, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    std::vector<std::vector<std::size_t>> batches;
    const auto bs = static_cast<std::size_t>(batch_size);
    for (std::size_t start = 0; start < n; start += bs) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
    }
    if (batches.size() > 1 && batches.back().size() < 2) {
        auto tail = std::move(batches.back());
        batches.pop_back();
        batches.back().insert(batches.back().end(), tail.begin(), tail.end());
    }
    return batches;
}

TrainingSet load_training_set(const std::vector<ManifestEntry>& manifest, const std::filesystem::path& root,
                              bool keep_images, std::size_t workers) {
    std::vector<const ManifestEntry*> ok;
    for (const auto& e : manifest) {
        if (e.status == EntryStatus::Ok) ok.push_back(&e);
    }
    std::sort(ok.begin(), ok.end(), [](auto a, auto b) { return a->caption_id < b->caption_id; });

    TrainingSet set;
    const auto n = static_cast<Eigen::Index>(ok.size());
    set.text.resize(n, kTextFeatureDim);
    set.image.resize(n, kImageFeatureDim);
    set.caption_ids.resize(ok.size());
    set.concept_ids.resize(ok.size());
    if (keep_images) set.images.resize(ok.size());

    for_each_bounded(ok.size(), workers, [&](std::size_t k) {
        const auto& e = *ok[k];
        const auto img = decode_ppm(read_file(root / e.image_path));
        set.image.row(static_cast<Eigen::Index>(k)) = extract_image_features(img).transpose();
        set.text.row(static_cast<Eigen::Index>(k)) = extract_text_features(e.caption).values.transpose();
        set.caption_ids[k] = e.caption_id;
        set.concept_ids[k] = e.concept_id;
        if (keep_images) set.images[k] = img;
    });
    return set;
}

namespace {

struct AdamState {
    Matrix m_text, v_text, m_image, v_image;
    double m_tau = 0.0, v_tau = 0.0;
};

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.98;
constexpr double kAdamEps = 1e-6;

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), src.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = src.row(static_cast<Eigen::Index>(idx[k]));
    return out;
}

// Random resized crop on the stored pixels: area scale in [0.5, 1].
Matrix augmented_image_rows(const TrainingSet& data, const std::vector<std::size_t>& idx, Rng& rng) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), kImageFeatureDim);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& img = data.images[idx[k]];
        const double scale = 0.5 + 0.5 * rng.uniform();
        const int side = std::max(kMockGrid, static_cast<int>(std::lround(img.width * std::sqrt(scale))));
        const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.width - side + 1)));
        const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.height - side + 1)));
        out.row(static_cast<Eigen::Index>(k)) = extract_image_features(img, x0, y0, side).transpose();
    }
    return out;
}

}  // namespace

TrainResult train(const TrainingSet& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.size() < static_cast<std::size_t>(cfg.batch_size)) {
        throw Error("training set has " + std::to_string(data.size()) + " pairs, fewer than batch_size " +
                    std::to_string(cfg.batch_size));
    }
    if (cfg.augment && data.images.size() != data.size()) throw Error("augmentation needs the training images");

    TrainResult result;
    result.params = init_params(cfg.embed_dim, cfg.seed);
    auto& p = result.params;

    AdamState st;
    st.m_text = st.v_text = Matrix::Zero(p.w_text.rows(), p.w_text.cols());
    st.m_image = st.v_image = Matrix::Zero(p.w_image.rows(), p.w_image.cols());

    const std::size_t steps_per_epoch = make_batches(data.size(), cfg.batch_size, cfg.seed, 0).size();
    Rng aug_rng(hash_values(cfg.seed, 0xa06ULL));
    std::size_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        const auto batches = make_batches(data.size(), cfg.batch_size, cfg.seed, epoch);
        for (const auto& batch : batches) {
            const Matrix ft = gather_rows(data.text, batch);
            const Matrix fi = cfg.augment ? augmented_image_rows(data, batch, aug_rng) : gather_rows(data.image, batch);
            const auto lg = clip_loss_and_grad(p, ft, fi);
            loss_sum += lg.loss;

            const double lr = learning_rate_at(step, steps_per_epoch, cfg);
            ++step;
            const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));

            auto adam_matrix = [&](Matrix& w, Matrix& m, Matrix& v, const Matrix& g) {
                w *= 1.0 - lr * cfg.weight_decay;
                m = kBeta1 * m + (1.0 - kBeta1) * g;
                v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
                w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kAdamEps);
            };
            adam_matrix(p.w_text, st.m_text, st.v_text, lg.g_text);
            adam_matrix(p.w_image, st.m_image, st.v_image, lg.g_image);

            st.m_tau = kBeta1 * st.m_tau + (1.0 - kBeta1) * lg.g_log_tau;
            st.v_tau = kBeta2 * st.v_tau + (1.0 - kBeta2) * lg.g_log_tau * lg.g_log_tau;
            p.log_tau -= lr * (st.m_tau / bc1) / (std::sqrt(st.v_tau / bc2) + kAdamEps);
            clamp_temperature(p);
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches.size()));
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

void put_f64(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(std::string_view in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw Error("parameter file truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 8;
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_params(const std::filesystem::path& path, const EncoderParams& p) {
    std::string out;
    out.reserve(8 * (4 + p.w_text.size() + p.w_image.size()));
    put_f64(out, static_cast<double>(p.w_text.rows()));
    put_f64(out, static_cast<double>(p.w_text.cols()));
    put_f64(out, static_cast<double>(p.w_image.cols()));
    put_f64(out, p.log_tau);
    for (Eigen::Index r = 0; r < p.w_text.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.w_text.cols(); ++c) put_f64(out, p.w_text(r, c));
    }
    for (Eigen::Index r = 0; r < p.w_image.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.w_image.cols(); ++c) put_f64(out, p.w_image(r, c));
    }
    atomic_write(path, out);
}

EncoderParams load_params(const std::filesystem::path& path) {
    const std::string in = read_file(path);
    std::size_t pos = 0;
    const double d = get_f64(in, pos), dt = get_f64(in, pos), di = get_f64(in, pos);
    auto as_dim = [](double v) {
        if (!(v >= 1.0 && v <= 1e6) || v != std::floor(v)) throw Error("parameter file has a bad dimension");
        return static_cast<Eigen::Index>(v);
    };
    EncoderParams p;
    p.log_tau = get_f64(in, pos);
    p.w_text.resize(as_dim(d), as_dim(dt));
    p.w_image.resize(as_dim(d), as_dim(di));
    if (in.size() != 8 * (4 + static_cast<std::size_t>(p.w_text.size() + p.w_image.size()))) {
        throw Error("parameter file size does not match its header");
    }
    for (Eigen::Index r = 0; r < p.w_text.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.w_text.cols(); ++c) p.w_text(r, c) = get_f64(in, pos);
    }
    for (Eigen::Index r = 0; r < p.w_image.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.w_image.cols(); ++c) p.w_image(r, c) = get_f64(in, pos);
    }
    return p;
}

void write_loss_curve(std::ostream& out, const std::vector<double>& epoch_loss) {
    const auto old = out.precision(17);
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) out << (e + 1) << '\t' << epoch_loss[e] << '\n';
    out.precision(old);
}

}  // namespace synthpair
