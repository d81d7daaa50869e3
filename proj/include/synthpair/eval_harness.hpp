#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "synthpair/clip_trainer.hpp"

namespace synthpair {

enum class Task { LinProb = 0, FewShot, ImgRet, TextRet, ZeroShot };
constexpr std::size_t kTaskCount = 5;

/// Serialized key of each task slot.
constexpr std::array<std::string_view, kTaskCount> kTaskKeys = {"lin_prob", "few_shot", "img_ret", "text_ret",
                                                                "zero_shot"};

struct MetricsReport {
    std::array<double, kTaskCount> values{};
    std::array<bool, kTaskCount> lower_is_better{};

    double& operator[](Task t) { return values[static_cast<std::size_t>(t)]; }
    double operator[](Task t) const { return values[static_cast<std::size_t>(t)]; }

    void validate() const;
};

/// `task<TAB>value` lines in slot order.
void write_metrics(std::ostream& out, const MetricsReport& m);
/// Needs all five keys exactly once; rejects unknown keys and non-finite values.
MetricsReport read_metrics(std::istream& in);
MetricsReport read_metrics_file(const std::string& path);
void write_metrics_table(std::ostream& out, const MetricsReport& m, std::string_view label);

/// Mean signed relative change over the five slots, in percent.
double delta_mtl(const MetricsReport& model, const MetricsReport& baseline);

struct RecallResult {
    double image_to_text = 0.0;  ///< % of image queries whose caption ranks in the top k
    double text_to_image = 0.0;  ///< % of caption queries whose image ranks in the top k
};

/// Rows of `sim` are queries, columns candidates; the partner of query i is
/// candidate i. Ties go to the lower candidate index.
double recall_from_similarity(const Matrix& sim, std::size_t k);

/// H: image embeddings, Z: text embeddings, row i paired with row i.
RecallResult recall_at_k(const Matrix& h, const Matrix& z, std::size_t k);

/// Replaces every "{label}" in the template.
std::string apply_template(std::string_view templ, std::string_view label);

constexpr std::string_view kDefaultTemplate = "a photo of a {label}";

/// Predicted class index per image row; ties go to the lower class index.
std::vector<int> zero_shot_predict(const EncoderParams& p, const Matrix& image_feats,
                                   const std::vector<std::string>& class_names,
                                   std::string_view templ = kDefaultTemplate);

/// Accuracy (%) of zero_shot_predict against labels.
double zero_shot_classify(const EncoderParams& p, const Matrix& image_feats, const std::vector<int>& labels,
                          const std::vector<std::string>& class_names, std::string_view templ = kDefaultTemplate);

// ---------------------------------------------------------------------------
// Linear probe: multinomial logistic regression with bias on frozen features.

constexpr double kProbeL2 = 1e-3;
constexpr double kProbeGradTol = 1e-6;
constexpr int kProbeMaxIters = 10000;

struct LogisticModel {
    Matrix weights;  ///< C x (D + 1), last column is the bias
    int iterations = 0;
    double grad_norm = 0.0;

    std::vector<int> predict(const Matrix& x) const;
};

/// Full-batch gradient descent on mean cross-entropy + (λ/2)‖W‖² (bias not
/// penalized), fixed step 1/(0.5·max‖x̃‖² + λ).
LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& labels, int num_classes,
                           double l2 = kProbeL2, double tol = kProbeGradTol, int max_iters = kProbeMaxIters);

struct ProbeSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Per class, a seeded shuffle puts the first ceil(n/2) examples in the train
/// pool and the rest in the test set. With `shots`, only the first `shots` of
/// each class's train pool are used; the test set is unchanged.
ProbeSplit probe_split(const std::vector<int>& labels, int num_classes, std::optional<std::size_t> shots,
                       std::uint64_t seed);

/// Accuracy (%) on the test side of probe_split. Throws if some class has no
/// training example or the test set is empty.
double linear_probe(const Matrix& features, const std::vector<int>& labels, int num_classes,
                    std::optional<std::size_t> shots, std::uint64_t seed);

}  // namespace synthpair
