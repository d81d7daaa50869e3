#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "gradcheck.hpp"
#include "support.hpp"
#include "synthpair/clip_trainer.hpp"

using namespace synthpair;

namespace {

// Direct softmax cross-entropy, one loop per direction.
double oracle_loss(const Matrix& h, const Matrix& z, double tau) {
    const auto b = h.rows();
    double rows = 0.0, cols = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
        double sr = 0.0, sc = 0.0;
        for (Eigen::Index j = 0; j < b; ++j) {
            sr += std::exp(h.row(i).dot(z.row(j)) / tau);
            sc += std::exp(h.row(j).dot(z.row(i)) / tau);
        }
        rows += std::log(sr) - h.row(i).dot(z.row(i)) / tau;
        cols += std::log(sc) - h.row(i).dot(z.row(i)) / tau;
    }
    return 0.5 * (rows + cols) / static_cast<double>(b);
}

EncoderParams identity_params(int d) {
    EncoderParams p;
    p.w_text = Matrix::Identity(d, d);
    p.w_image = Matrix::Identity(d, d);
    p.log_tau = 0.0;
    return p;
}

/// Mock-like dataset: every pair shares a random code; image features are a
/// noisy fixed linear map of the text features.
TrainingSet toy_set(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix mix(kImageFeatureDim, kTextFeatureDim);
    for (Eigen::Index i = 0; i < mix.rows(); ++i) {
        for (Eigen::Index j = 0; j < mix.cols(); ++j) mix(i, j) = g(rng);
    }
    TrainingSet s;
    s.text.resize(static_cast<Eigen::Index>(n), kTextFeatureDim);
    s.image.resize(static_cast<Eigen::Index>(n), kImageFeatureDim);
    for (std::size_t k = 0; k < n; ++k) {
        const auto t = extract_text_features("pair number " + std::to_string(k * 7919 + seed)).values;
        s.text.row(static_cast<Eigen::Index>(k)) = t.transpose();
        Vector im = mix * t;
        s.image.row(static_cast<Eigen::Index>(k)) = im.normalized().transpose();
        s.caption_ids.push_back(static_cast<CaptionId>(k));
        s.concept_ids.push_back(0);
    }
    return s;
}

}  // namespace

TEST_CASE("text features: empty, unit norm, hashing rule") {
    const auto empty = extract_text_features("");
    CHECK(empty.degenerate);
    CHECK(empty.values.norm() == 0.0);
    CHECK(extract_text_features("ab").degenerate);

    const auto abc = extract_text_features("abc");
    CHECK_FALSE(abc.degenerate);
    CHECK(std::abs(abc.values.norm() - 1.0) < 1e-14);
    const auto h = splitmix64(fnv1a64("abc"));
    const int bucket = static_cast<int>(h % kTextFeatureDim);
    CHECK(abc.values[bucket] == ((h >> 63) ? -1.0 : 1.0));
    CHECK(extract_text_features("ABC").values == abc.values);
    CHECK(extract_text_features("abc").values == abc.values);
    CHECK(extract_text_features("abd").values != abc.values);

    testing::WordGen gen(1);
    for (int i = 0; i < 500; ++i) {
        const auto c = gen.caption(10);
        const auto f = extract_text_features(c);
        if (!f.degenerate) CHECK(std::abs(f.values.norm() - 1.0) < 1e-12);
    }
}

TEST_CASE("text features accumulate a signed 3-gram histogram") {
    const std::string caption = "A red kite, a red sky.";
    Vector oracle = Vector::Zero(kTextFeatureDim);
    std::string lower = caption;
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (std::size_t i = 0; i + 3 <= lower.size(); ++i) {
        const auto [b, s] = text_bucket(lower.substr(i, 3));
        oracle[b] += s;
    }
    oracle.normalize();
    CHECK((extract_text_features(caption).values - oracle).norm() < 1e-15);
}

TEST_CASE("image features of a constant image and of a mock image") {
    Image gray{32, 32, std::vector<std::uint8_t>(32 * 32 * 3, 128)};
    const auto f = extract_image_features(gray);
    REQUIRE(f.size() == kImageFeatureDim);
    for (Eigen::Index i = 1; i < f.size(); ++i) CHECK(f[i] == f[0]);
    CHECK(std::abs(f.norm() - 1.0) < 1e-14);

    TtiParams p;
    const auto rec = render_mock("A purple elephant on a bike.", p, 0);
    const auto colors = mock_block_colors("A purple elephant on a bike.");
    Vector oracle(kImageFeatureDim);
    for (int k = 0; k < kImageFeatureDim; ++k) oracle[k] = colors[k] / 255.0;
    oracle.normalize();
    CHECK((extract_image_features(rec.image) - oracle).norm() < 1e-14);

    CHECK(extract_image_features(render_mock("A cat.", p, 0).image) !=
          extract_image_features(render_mock("A dog.", p, 0).image));

    Image rect{16, 8, std::vector<std::uint8_t>(16 * 8 * 3, 1)};
    CHECK_THROWS_AS(extract_image_features(rect), Error);
    Image tiny{4, 4, std::vector<std::uint8_t>(4 * 4 * 3, 1)};
    CHECK_THROWS_AS(extract_image_features(tiny), Error);
}

TEST_CASE("loss examples") {
    const Matrix h = Matrix::Identity(2, 2);
    CHECK(std::abs(clip_loss_from_embeddings(h, h, 1.0) - std::log(1.0 + std::exp(-1.0))) < 1e-15);

    const auto p = identity_params(3);
    Matrix same(4, 3);
    for (int i = 0; i < 4; ++i) same.row(i) << 1.0, 2.0, -1.0;
    CHECK(std::abs(clip_loss_and_grad(p, same, same).loss - std::log(4.0)) < 1e-12);
}

TEST_CASE("loss agrees with the direct softmax oracle and is non-negative") {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 100; ++k) {
        const auto in = testing::random_instance(rng);
        const auto h = embed_images(in.params, in.image);
        const auto z = embed_texts(in.params, in.text);
        const double tau = std::exp(in.params.log_tau);
        const double loss = clip_loss_and_grad(in.params, in.text, in.image).loss;
        CHECK(loss == doctest::Approx(oracle_loss(h, z, tau)).epsilon(1e-12));
        CHECK(loss >= 0.0);
        CHECK(clip_loss_from_embeddings(h, z, tau) == doctest::Approx(loss).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradients match central differences") {
    std::mt19937_64 rng(17);
    for (int k = 0; k < 30; ++k) {
        const auto in = testing::random_instance(rng);
        const auto r = testing::gradcheck(in.params, in.text, in.image);
        CHECK(r.rel_error < 1e-7);
        CHECK(r.max_entry_rel_error < 1e-3);
    }
}

TEST_CASE("loss is equivariant to joint batch permutation") {
    std::mt19937_64 rng(8);
    for (int k = 0; k < 20; ++k) {
        const auto in = testing::random_instance(rng);
        const auto b = in.text.rows();
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(b));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix t(b, in.text.cols()), i(b, in.image.cols());
        for (Eigen::Index r = 0; r < b; ++r) {
            t.row(r) = in.text.row(perm[static_cast<std::size_t>(r)]);
            i.row(r) = in.image.row(perm[static_cast<std::size_t>(r)]);
        }
        const auto a = clip_loss_and_grad(in.params, in.text, in.image);
        const auto c = clip_loss_and_grad(in.params, t, i);
        CHECK(a.loss == c.loss);
        CHECK((a.g_text - c.g_text).norm() < 1e-12);
    }
}

TEST_CASE("loss rejects bad input") {
    const auto p = identity_params(2);
    Matrix one(1, 2);
    one << 1, 0;
    CHECK_THROWS_AS(clip_loss_and_grad(p, one, one), Error);
    Matrix nan(2, 2);
    nan << 1, 0, std::nan(""), 1;
    CHECK_THROWS_AS(clip_loss_and_grad(p, nan, Matrix::Identity(2, 2)), Error);
}

TEST_CASE("embeddings are unit norm") {
    const auto p = init_params(16, 4);
    const auto s = toy_set(20, 1);
    const auto h = embed_images(p, s.image);
    const auto z = embed_texts(p, s.text);
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
        CHECK(std::abs(h.row(r).norm() - 1.0) < 1e-6);
        CHECK(std::abs(z.row(r).norm() - 1.0) < 1e-6);
    }
}

TEST_CASE("init params: shapes, scale and temperature") {
    const auto p = init_params(64, 2);
    CHECK(p.w_text.rows() == 64);
    CHECK(p.w_text.cols() == kTextFeatureDim);
    CHECK(p.w_image.cols() == kImageFeatureDim);
    CHECK(std::exp(p.log_tau) == doctest::Approx(0.07).epsilon(1e-15));
    const double var = p.w_text.squaredNorm() / static_cast<double>(p.w_text.size());
    CHECK(var * kTextFeatureDim == doctest::Approx(1.0).epsilon(0.05));
    CHECK(init_params(64, 2) == p);
    CHECK_FALSE(init_params(64, 3) == p);
}

TEST_CASE("temperature clamping") {
    auto p = init_params(4, 1);
    p.log_tau = std::log(1e-4);
    clamp_temperature(p);
    CHECK(std::exp(p.log_tau) == doctest::Approx(kMinTemperature));
    p.log_tau = std::log(1e4);
    clamp_temperature(p);
    CHECK(std::exp(p.log_tau) == doctest::Approx(kMaxTemperature));
}

TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.warmup_epochs = 1;
    cfg.base_lr = 0.01;
    const std::size_t spe = 7;
    CHECK(std::abs(learning_rate_at(spe - 1, spe, cfg) - cfg.base_lr) < 1e-12);
    CHECK(learning_rate_at(0, spe, cfg) == doctest::Approx(cfg.base_lr / 7));
    CHECK(std::abs(learning_rate_at(spe * 10 - 1, spe, cfg)) < 1e-15);
    double prev = cfg.base_lr;
    for (std::size_t s = spe; s < spe * 10; ++s) {
        const double lr = learning_rate_at(s, spe, cfg);
        CHECK(lr <= prev);
        prev = lr;
    }
    const std::size_t mid = spe + (spe * 9) / 2 - 1;
    CHECK(learning_rate_at(mid, spe, cfg) == doctest::Approx(cfg.base_lr * 0.5 * (1 + std::cos(M_PI * 0.5))).epsilon(0.01));
}

TEST_CASE("batches partition the data and fold a trailing singleton") {
    for (std::size_t n : {2u, 10u, 64u, 65u, 129u, 200u}) {
        const auto batches = make_batches(n, 64, 5, 2);
        std::vector<std::size_t> all;
        for (const auto& b : batches) {
            CHECK(b.size() >= 2);
            all.insert(all.end(), b.begin(), b.end());
        }
        std::sort(all.begin(), all.end());
        std::vector<std::size_t> expect(n);
        std::iota(expect.begin(), expect.end(), 0);
        CHECK(all == expect);
    }
    CHECK(make_batches(65, 64, 5, 0).size() == 1);
    CHECK(make_batches(100, 10, 5, 0) == make_batches(100, 10, 5, 0));
    CHECK(make_batches(100, 10, 5, 0) != make_batches(100, 10, 5, 1));
}

TEST_CASE("training lowers the loss and is bit-reproducible") {
    const auto data = toy_set(512, 9);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.embed_dim = 32;
    cfg.seed = 4;
    const auto a = train(data, cfg);
    CHECK(a.epoch_loss.size() == 5);
    CHECK(a.epoch_loss.back() < a.epoch_loss.front());
    const auto b = train(data, cfg);
    CHECK(a.params == b.params);
    CHECK(a.epoch_loss == b.epoch_loss);
    const double tau = std::exp(a.params.log_tau);
    CHECK(tau >= kMinTemperature);
    CHECK(tau <= kMaxTemperature);
}

TEST_CASE("training rejects datasets smaller than one batch") {
    const auto data = toy_set(10, 1);
    TrainConfig cfg;
    CHECK_THROWS_AS(train(data, cfg), Error);
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("config defaults") {
    const TrainConfig desk;
    CHECK(desk.epochs == 20);
    CHECK(desk.batch_size == 64);
    CHECK(desk.base_lr == 1e-2);
    CHECK(desk.weight_decay == 1e-4);
    CHECK(desk.warmup_epochs == 1);
    const auto full = TrainConfig::full_scale();
    CHECK(full.epochs == 40);
    CHECK(full.batch_size == 4096);
    CHECK(full.base_lr == 5e-4);
    CHECK(full.weight_decay == 0.5);
    CHECK(full.warmup_epochs == 1);
}

TEST_CASE("parameter files round trip and reject corruption") {
    testing::TempDir dir("params");
    const auto p = init_params(8, 3);
    save_params(dir / "p.bin", p);
    CHECK(load_params(dir / "p.bin") == p);
    const auto bytes = read_file(dir / "p.bin");
    CHECK(bytes.size() == 8 * (4 + 8 * kTextFeatureDim + 8 * kImageFeatureDim));
    atomic_write(dir / "short.bin", bytes.substr(0, bytes.size() - 8));
    CHECK_THROWS_AS(load_params(dir / "short.bin"), Error);
}

TEST_CASE("loss curve format") {
    std::ostringstream out;
    write_loss_curve(out, {2.5, 1.25});
    CHECK(out.str() == "1\t2.5\n2\t1.25\n");
}

TEST_CASE("augmentation needs images and stays deterministic") {
    testing::TempDir dir("aug");
    DatasetStore store(dir.path());
    std::vector<CaptionRecord> caps(80);
    for (std::size_t i = 0; i < caps.size(); ++i) {
        caps[i].id = static_cast<CaptionId>(i);
        caps[i].text = "An item called " + std::to_string(i * 31) + ".";
    }
    TtiParams tp;
    tp.store_size = 64;
    const auto manifest = run_generation(caps, mock_renderer(tp), 2, store);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.embed_dim = 16;
    cfg.augment = true;
    CHECK_THROWS_AS(train(load_training_set(manifest, dir.path(), false), cfg), Error);
    const auto data = load_training_set(manifest, dir.path(), true, 3);
    CHECK(train(data, cfg).params == train(data, cfg).params);
    CHECK(data.caption_ids.front() == 0);
    CHECK(data.caption_ids.back() == 79);
}
