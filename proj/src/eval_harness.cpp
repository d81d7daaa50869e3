#include "synthpair/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "synthpair/common.hpp"

namespace synthpair {

void MetricsReport::validate() const {
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        if (!std::isfinite(values[i])) throw Error("metric " + std::string(kTaskKeys[i]) + " is not finite");
    }
}

void write_metrics(std::ostream& out, const MetricsReport& m) {
    m.validate();
    std::ostringstream body;
    body << std::setprecision(17);
    for (std::size_t i = 0; i < kTaskCount; ++i) body << kTaskKeys[i] << '\t' << m.values[i] << '\n';
    out << body.str();
}

MetricsReport read_metrics(std::istream& in) {
    MetricsReport m;
    std::array<bool, kTaskCount> seen{};
    std::string line;
    while (std::getline(in, line)) {
        const auto t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto tab = t.find('\t');
        if (tab == std::string_view::npos) throw Error("metrics line without a tab: " + std::string(t));
        const auto key = trim(t.substr(0, tab));
        const std::string value(trim(t.substr(tab + 1)));
        std::size_t slot = kTaskCount;
        for (std::size_t i = 0; i < kTaskCount; ++i) {
            if (kTaskKeys[i] == key) slot = i;
        }
        if (slot == kTaskCount) throw Error("unknown metrics key '" + std::string(key) + "'");
        if (seen[slot]) throw Error("metrics key '" + std::string(key) + "' appears twice");
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != value.size() || value.empty()) throw Error("bad value for metrics key '" + std::string(key) + "'");
        m.values[slot] = v;
        seen[slot] = true;
    }
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        if (!seen[i]) throw Error("metrics key '" + std::string(kTaskKeys[i]) + "' is missing");
    }
    m.validate();
    return m;
}

MetricsReport read_metrics_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open metrics file " + path);
    try {
        return read_metrics(in);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

void write_metrics_table(std::ostream& out, const MetricsReport& m, std::string_view label) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1);
    s << std::left << std::setw(12) << "Model" << " | Lin. Prob. | Few-shot | Img Ret. | Text Ret. | 0-shot\n";
    s << std::setw(12) << label;
    const int widths[kTaskCount] = {10, 8, 8, 9, 6};
    for (std::size_t i = 0; i < kTaskCount; ++i) s << " | " << std::right << std::setw(widths[i]) << m.values[i];
    s << '\n';
    out << s.str();
}

double delta_mtl(const MetricsReport& model, const MetricsReport& baseline) {
    model.validate();
    baseline.validate();
    double sum = 0.0;
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        if (baseline.values[i] == 0.0) {
            throw Error("baseline metric " + std::string(kTaskKeys[i]) + " is 0; relative change undefined");
        }
        const double sign = baseline.lower_is_better[i] ? -1.0 : 1.0;
        sum += sign * (model.values[i] - baseline.values[i]) / baseline.values[i];
    }
    return 100.0 / static_cast<double>(kTaskCount) * sum;
}

// ---------------------------------------------------------------------------

double recall_from_similarity(const Matrix& sim, std::size_t k) {
    const auto n = sim.rows();
    if (n == 0) throw Error("recall@k needs at least one query");
    if (sim.cols() != n) throw Error("recall@k needs a square similarity matrix");
    if (k < 1) throw Error("recall@k needs k >= 1");
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double own = sim(i, i);
        std::size_t rank = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (sim(i, j) > own || (j < i && sim(i, j) == own)) ++rank;
        }
        if (rank < k) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

RecallResult recall_at_k(const Matrix& h, const Matrix& z, std::size_t k) {
    if (h.rows() != z.rows() || h.cols() != z.cols()) throw Error("recall@k: embedding shapes differ");
    const Matrix sim = h * z.transpose();  // rows images, columns texts
    RecallResult r;
    r.image_to_text = recall_from_similarity(sim, k);
    r.text_to_image = recall_from_similarity(sim.transpose(), k);
    return r;
}

std::string apply_template(std::string_view templ, std::string_view label) {
    static constexpr std::string_view kSlot = "{label}";
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const auto at = templ.find(kSlot, pos);
        out.append(templ.substr(pos, at == std::string_view::npos ? std::string_view::npos : at - pos));
        if (at == std::string_view::npos) break;
        out.append(label);
        pos = at + kSlot.size();
    }
    return out;
}

std::vector<int> zero_shot_predict(const EncoderParams& p, const Matrix& image_feats,
                                   const std::vector<std::string>& class_names, std::string_view templ) {
    if (class_names.empty()) throw Error("zero-shot classification needs at least one class");
    Matrix text(static_cast<Eigen::Index>(class_names.size()), kTextFeatureDim);
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        const auto f = extract_text_features(apply_template(templ, class_names[c]));
        if (f.degenerate) throw Error("class prompt for '" + class_names[c] + "' has no features");
        text.row(static_cast<Eigen::Index>(c)) = f.values.transpose();
    }
    const Matrix zt = embed_texts(p, text);
    const Matrix h = embed_images(p, image_feats);
    const Matrix sim = h * zt.transpose();
    std::vector<int> pred(static_cast<std::size_t>(sim.rows()));
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < sim.cols(); ++c) {
            if (sim(i, c) > sim(i, best)) best = c;
        }
        pred[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return pred;
}

double zero_shot_classify(const EncoderParams& p, const Matrix& image_feats, const std::vector<int>& labels,
                          const std::vector<std::string>& class_names, std::string_view templ) {
    if (static_cast<Eigen::Index>(labels.size()) != image_feats.rows()) {
        throw Error("zero-shot: label count differs from image count");
    }
    if (labels.empty()) throw Error("zero-shot: no images");
    const auto pred = zero_shot_predict(p, image_feats, class_names, templ);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
    return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------

namespace {

Matrix with_bias(const Matrix& x) {
    Matrix out(x.rows(), x.cols() + 1);
    out.leftCols(x.cols()) = x;
    out.col(x.cols()).setOnes();
    return out;
}

void softmax_rows(Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp().matrix();
        m.row(r) /= m.row(r).sum();
    }
}

}  // namespace

std::vector<int> LogisticModel::predict(const Matrix& x) const {
    const Matrix scores = with_bias(x) * weights.transpose();
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < scores.cols(); ++c) {
            if (scores(i, c) > scores(i, best)) best = c;
        }
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& labels, int num_classes, double l2, double tol,
                           int max_iters) {
    const auto n = x.rows();
    if (n == 0) throw Error("linear probe: empty training set");
    if (static_cast<Eigen::Index>(labels.size()) != n) throw Error("linear probe: label count differs from rows");
    if (num_classes < 1) throw Error("linear probe: need at least one class");
    if (!x.allFinite()) throw Error("linear probe: non-finite features");

    const Matrix xb = with_bias(x);
    Matrix y = Matrix::Zero(n, num_classes);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        if (l < 0 || l >= num_classes) throw Error("linear probe: label out of range");
        y(i, l) = 1.0;
    }
    const double step = 1.0 / (0.5 * xb.rowwise().squaredNorm().maxCoeff() + l2);
    const double inv_n = 1.0 / static_cast<double>(n);
    const Eigen::Index d = x.cols();

    LogisticModel model;
    model.weights = Matrix::Zero(num_classes, d + 1);
    for (int it = 0; it < max_iters; ++it) {
        Matrix p = xb * model.weights.transpose();
        softmax_rows(p);
        Matrix grad = inv_n * (p - y).transpose() * xb;
        grad.leftCols(d) += l2 * model.weights.leftCols(d);
        model.grad_norm = grad.norm();
        if (model.grad_norm < tol) break;
        model.weights -= step * grad;
        model.iterations = it + 1;
    }
    return model;
}

ProbeSplit probe_split(const std::vector<int>& labels, int num_classes, std::optional<std::size_t> shots,
                       std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) throw Error("linear probe: label out of range");
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    }
    ProbeSplit split;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        Rng rng(hash_values(seed, 0x9b0beULL, c));
        shuffle(idx, rng);
        const std::size_t pool = (idx.size() + 1) / 2;
        const std::size_t used = shots ? std::min(*shots, pool) : pool;
        split.train.insert(split.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(used));
        split.test.insert(split.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(pool), idx.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

double linear_probe(const Matrix& features, const std::vector<int>& labels, int num_classes,
                    std::optional<std::size_t> shots, std::uint64_t seed) {
    if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
        throw Error("linear probe: label count differs from feature rows");
    }
    if (shots && *shots == 0) throw Error("linear probe: shots must be positive");
    const auto split = probe_split(labels, num_classes, shots, seed);

    std::vector<bool> present(static_cast<std::size_t>(num_classes), false);
    for (auto i : split.train) present[static_cast<std::size_t>(labels[i])] = true;
    for (int c = 0; c < num_classes; ++c) {
        if (!present[static_cast<std::size_t>(c)]) {
            throw Error("linear probe: class " + std::to_string(c) + " has no training example");
        }
    }
    if (split.test.empty()) throw Error("linear probe: empty test split");

    auto gather = [&](const std::vector<std::size_t>& idx, Matrix& x, std::vector<int>& y) {
        x.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
        y.resize(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            x.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(idx[k]));
            y[k] = labels[idx[k]];
        }
    };
    Matrix xtr, xte;
    std::vector<int> ytr, yte;
    gather(split.train, xtr, ytr);
    gather(split.test, xte, yte);

    const auto model = fit_logistic(xtr, ytr, num_classes);
    const auto pred = model.predict(xte);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < yte.size(); ++i) correct += pred[i] == yte[i];
    return 100.0 * static_cast<double>(correct) / static_cast<double>(yte.size());
}

}  // namespace synthpair
