#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "synthpair/common.hpp"
#include "synthpair/dataset_store.hpp"
#include "synthpair/image_engine.hpp"

namespace synthpair {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr int kTextFeatureDim = 512;
constexpr int kImageFeatureDim = kMockGrid * kMockGrid * 3;  // 192

struct TextFeatures {
    Vector values;
    bool degenerate = false;  ///< no 3-grams: the zero vector
};

/// Signed hashed bag of character 3-grams, L2-normalized.
TextFeatures extract_text_features(std::string_view caption);

/// Bucket and sign for one 3-gram.
std::pair<int, double> text_bucket(std::string_view gram);

/// 8x8 grid of per-block RGB means scaled to [0,1], flattened block-major
/// (row, column, channel), then L2-normalized. Requires a square image of side
/// >= 8.
Vector extract_image_features(const Image& img);

/// Same grid over the square window [x0, x0+side) x [y0, y0+side).
Vector extract_image_features(const Image& img, int x0, int y0, int side);

struct EncoderParams {
    Matrix w_text;   ///< d x D_t
    Matrix w_image;  ///< d x D_i
    double log_tau = 0.0;

    int embed_dim() const { return static_cast<int>(w_text.rows()); }
    bool operator==(const EncoderParams& o) const {
        return w_text == o.w_text && w_image == o.w_image && log_tau == o.log_tau;
    }
};

constexpr double kMinTemperature = 0.01;
constexpr double kMaxTemperature = 100.0;
constexpr double kInitialTemperature = 0.07;

/// Random init: entries ~ N(0, 1/D_in), temperature 0.07.
EncoderParams init_params(int embed_dim, std::uint64_t seed);

void clamp_temperature(EncoderParams& p);

/// Row-normalized embeddings. Throws on a zero-norm projection.
Matrix embed_texts(const EncoderParams& p, const Matrix& text_feats);
Matrix embed_images(const EncoderParams& p, const Matrix& image_feats);

struct LossGrad {
    double loss = 0.0;
    Matrix g_text;
    Matrix g_image;
    double g_log_tau = 0.0;
};

/// Symmetric contrastive loss over one batch. Rows of the feature matrices are
/// paired samples. logits = (H Z^T) / exp(log_tau).
LossGrad clip_loss_and_grad(const EncoderParams& p, const Matrix& text_feats, const Matrix& image_feats);

/// Loss only, from already-normalized embeddings.
double clip_loss_from_embeddings(const Matrix& h, const Matrix& z, double tau);

struct TrainConfig {
    int epochs = 20;
    int batch_size = 64;
    double base_lr = 1e-2;
    double weight_decay = 1e-4;
    int warmup_epochs = 1;
    std::uint64_t seed = 0;
    int embed_dim = 128;
    bool augment = false;

    /// Settings of the full-scale recipe, kept for reference.
    static TrainConfig full_scale();
    void validate() const;
};

/// Linear warmup to base_lr over warmup steps, then cosine decay reaching 0 on
/// the final step. `step` is 0-based.
double learning_rate_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg);

/// Contiguous batches of a shuffled order; a trailing batch of one sample is
/// folded into the previous batch.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch);

struct TrainingSet {
    Matrix text;   ///< N x D_t
    Matrix image;  ///< N x D_i
    std::vector<CaptionId> caption_ids;
    std::vector<ConceptId> concept_ids;
    std::vector<Image> images;  ///< kept only when augmentation needs pixels

    std::size_t size() const { return caption_ids.size(); }
};

/// Ok entries of the manifest in caption id order; features extracted in
/// parallel and gathered by position.
TrainingSet load_training_set(const std::vector<ManifestEntry>& manifest, const std::filesystem::path& root,
                              bool keep_images = false, std::size_t workers = 1);

struct TrainResult {
    EncoderParams params;
    std::vector<double> epoch_loss;  ///< mean batch loss per epoch
};

TrainResult train(const TrainingSet& data, const TrainConfig& cfg);

/// Little-endian float64 stream: d, D_t, D_i, log_tau, then W_text and
/// W_image row-major.
void save_params(const std::filesystem::path& path, const EncoderParams& p);
EncoderParams load_params(const std::filesystem::path& path);

/// `epoch<TAB>mean_loss` lines, epochs 1-based.
void write_loss_curve(std::ostream& out, const std::vector<double>& epoch_loss);

}  // namespace synthpair
