#include "jemb/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "jemb/error.hpp"

namespace jemb {

std::string to_string(LatentSpace which) {
    switch (which) {
        case LatentSpace::appearance:
            return "appearance";
        case LatentSpace::structure_rgb:
            return "structure_rgb";
        case LatentSpace::structure_depth:
            return "structure_depth";
    }
    return "appearance";
}

const std::vector<int>& EmbeddingTable::labels(FactorLabel label) const {
    return label == FactorLabel::appearance_class ? appearance_class : structure_class;
}

namespace {

Eigen::MatrixXd to_matrix(const Tensor& t) {
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t[i * t.dim(1) + j];
    return m;
}

Eigen::MatrixXd unit_rows(const Eigen::MatrixXd& m, const char* op) {
    Eigen::MatrixXd out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double n = m.row(i).norm();
        if (n == 0.0) throw DomainError(std::string(op) + ": row " + std::to_string(i) + " has zero norm");
        out.row(i) /= n;
    }
    return out;
}

void require_aligned(const char* op, const EmbeddingTable& a, const EmbeddingTable& b) {
    if (a.rows() != b.rows() || a.dim() != b.dim()) {
        throw ShapeError(std::string(op) + ": tables differ in shape (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.dim()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.dim()) +
                         ")");
    }
    if (a.rows() == 0) throw ShapeError(std::string(op) + ": empty tables");
}

Tensor repeat_row(std::span<const double> row, std::size_t batch) {
    std::vector<double> out(batch * row.size());
    for (std::size_t b = 0; b < batch; ++b) std::copy(row.begin(), row.end(), out.begin() + b * row.size());
    return Tensor({batch, row.size()}, std::move(out));
}

}  // namespace

EmbeddingTable extract_embeddings(ModelParams& params, std::span<const MultimodalSample> samples, LatentSpace which) {
    const auto& cfg = params.config();
    EmbeddingTable table;
    table.matrix.resize(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(cfg.latent_dim));
    if (!samples.empty() && (samples[0].rgb.dim(1) != cfg.input_size || samples[0].rgb.dim(2) != cfg.input_size)) {
        throw ConfigError("checkpoint expects " + std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) +
                          " images, data has " + shape_str(samples[0].rgb.shape()));
    }
    EncoderParams& enc = which == LatentSpace::appearance      ? params.appearance
                         : which == LatentSpace::structure_rgb ? params.structure_rgb
                                                               : params.structure_depth;
    NoGradGuard no_grad;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        std::vector<std::size_t> idx(std::min(kChunk, samples.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor x = which == LatentSpace::structure_depth ? stack_depth(samples, idx) : stack_rgb(samples, idx);
        table.matrix.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(idx.size())) =
            to_matrix(encoder_forward(enc, x, Mode::eval).mu);
    }
    for (const auto& s : samples) {
        table.appearance_class.push_back(s.factors.appearance_class);
        table.structure_class.push_back(s.factors.structure_class);
        table.view_angle.push_back(s.factors.view_angle);
    }
    return table;
}

double retrieval_accuracy(const EmbeddingTable& za, const EmbeddingTable& zb) {
    require_aligned("retrieval_accuracy", za, zb);
    const Eigen::MatrixXd sim = unit_rows(za.matrix, "retrieval_accuracy") *
                                unit_rows(zb.matrix, "retrieval_accuracy").transpose();
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
        bool hit = true;
        for (Eigen::Index j = 0; j < sim.cols() && hit; ++j) {
            if (j != i && sim(i, j) >= sim(i, i)) hit = false;
        }
        hits += hit;
    }
    return static_cast<double>(hits) / static_cast<double>(za.rows());
}

double alignment(const EmbeddingTable& za, const EmbeddingTable& zs) {
    require_aligned("alignment", za, zs);
    const Eigen::MatrixXd a = unit_rows(za.matrix, "alignment");
    const Eigen::MatrixXd s = unit_rows(zs.matrix, "alignment");
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double c = a.row(i).dot(s.row(i));
        total += c * c;
    }
    return total / static_cast<double>(a.rows());
}

Eigen::VectorXd mean_appearance(const EmbeddingTable& table, int appearance_class) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(table.dim()));
    std::size_t count = 0;
    for (std::size_t i = 0; i < table.rows(); ++i) {
        if (table.appearance_class[i] != appearance_class) continue;
        sum += table.matrix.row(static_cast<Eigen::Index>(i)).transpose();
        ++count;
    }
    if (count == 0) throw Error("mean_appearance: no rows with appearance class " + std::to_string(appearance_class));
    return sum / static_cast<double>(count);
}

Tensor reconstruct(ModelParams& params, const Tensor& rgb) {
    NoGradGuard no_grad;
    const Tensor za = encoder_forward(params.appearance, rgb, Mode::eval).mu;
    const Tensor zs = encoder_forward(params.structure_rgb, rgb, Mode::eval).mu;
    return decoder_forward(params.decoder, za, zs, Mode::eval);
}

Tensor swap_decode(ModelParams& params, const Tensor& rgb, std::span<const double> z_a_override) {
    if (z_a_override.size() != params.config().latent_dim) {
        throw ShapeError("swap_decode: override has length " + std::to_string(z_a_override.size()) +
                         ", latent dimension is " + std::to_string(params.config().latent_dim));
    }
    NoGradGuard no_grad;
    const Tensor zs = encoder_forward(params.structure_rgb, rgb, Mode::eval).mu;
    return decoder_forward(params.decoder, repeat_row(z_a_override, rgb.dim(0)), zs, Mode::eval);
}

LinearProbe LinearProbe::train(const Eigen::MatrixXd& x, std::span<const int> labels) {
    if (static_cast<std::size_t>(x.rows()) != labels.size() || labels.empty()) {
        throw ShapeError("linear probe: label count does not match row count");
    }
    LinearProbe p;
    p.classes_.assign(labels.begin(), labels.end());
    std::sort(p.classes_.begin(), p.classes_.end());
    p.classes_.erase(std::unique(p.classes_.begin(), p.classes_.end()), p.classes_.end());
    if (p.classes_.size() < 2) throw Error("linear probe: needs at least 2 classes");

    const Eigen::Index n = x.rows(), d = x.cols();
    Eigen::MatrixXd a(n, d + 1);
    a.leftCols(d) = x;
    a.col(d).setOnes();
    Eigen::MatrixXd y = Eigen::MatrixXd::Constant(n, static_cast<Eigen::Index>(p.classes_.size()), -1.0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto c = std::lower_bound(p.classes_.begin(), p.classes_.end(), labels[static_cast<std::size_t>(i)]) -
                       p.classes_.begin();
        y(i, c) = 1.0;
    }
    Eigen::MatrixXd gram = a.transpose() * a;
    const double ridge = 1e-9 * gram.topLeftCorner(d, d).trace() / static_cast<double>(std::max<Eigen::Index>(d, 1)) + 1e-12;
    for (Eigen::Index j = 0; j < d; ++j) gram(j, j) += ridge;
    p.weights_ = gram.ldlt().solve(a.transpose() * y);
    return p;
}

int LinearProbe::predict(const Eigen::VectorXd& row) const {
    const Eigen::Index d = weights_.rows() - 1;
    if (row.size() != d) throw ShapeError("linear probe: row has wrong dimension");
    const Eigen::VectorXd scores = weights_.topRows(d).transpose() * row + weights_.row(d).transpose();
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.size(); ++c)
        if (scores(c) > scores(best)) best = c;
    return classes_[static_cast<std::size_t>(best)];
}

std::vector<int> LinearProbe::predict(const Eigen::MatrixXd& x) const {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.push_back(predict(Eigen::VectorXd(x.row(i).transpose())));
    return out;
}

double linear_probe(const EmbeddingTable& table, FactorLabel label, std::uint64_t seed) {
    const auto& labels = table.labels(label);
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    if (by_class.size() < 2) throw Error("linear probe: needs at least 2 classes");
    for (const auto& [cls, rows] : by_class) {
        if (rows.size() < 10) {
            throw Error("linear probe: class " + std::to_string(cls) + " has " + std::to_string(rows.size()) +
                        " rows, needs at least 10");
        }
    }
    Rng rng(seed);
    std::vector<std::size_t> train, test;
    for (auto& [cls, rows] : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng.engine());
        const std::size_t cut = (rows.size() * 8) / 10;
        train.insert(train.end(), rows.begin(), rows.begin() + static_cast<long>(cut));
        test.insert(test.end(), rows.begin() + static_cast<long>(cut), rows.end());
    }
    Eigen::MatrixXd xtrain(static_cast<Eigen::Index>(train.size()), table.matrix.cols());
    std::vector<int> ytrain;
    for (std::size_t k = 0; k < train.size(); ++k) {
        xtrain.row(static_cast<Eigen::Index>(k)) = table.matrix.row(static_cast<Eigen::Index>(train[k]));
        ytrain.push_back(labels[train[k]]);
    }
    const LinearProbe probe = LinearProbe::train(xtrain, ytrain);
    std::size_t correct = 0;
    for (std::size_t i : test) {
        correct += probe.predict(Eigen::VectorXd(table.matrix.row(static_cast<Eigen::Index>(i)).transpose())) == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

LinearProbe fit_probe(const EmbeddingTable& table, FactorLabel label) {
    return LinearProbe::train(table.matrix, table.labels(label));
}

PcaResult pca_project(const EmbeddingTable& table, std::size_t k) {
    const auto n = table.matrix.rows(), d = table.matrix.cols();
    if (static_cast<Eigen::Index>(k) >= n) throw ShapeError("pca_project: needs more rows than components");
    if (k == 0 || static_cast<Eigen::Index>(k) > d) throw ShapeError("pca_project: k must be in [1, d]");
    const Eigen::RowVectorXd mean = table.matrix.colwise().mean();
    const Eigen::MatrixXd centered = table.matrix.rowwise() - mean;
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    const double total = cov.trace();
    if (!(total > 0.0)) throw DomainError("pca_project: data has zero variance");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);

    PcaResult r;
    r.components.resize(d, static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
        const Eigen::Index src = d - 1 - static_cast<Eigen::Index>(c);  // eigenvalues ascend
        Eigen::VectorXd v = eig.eigenvectors().col(src);
        Eigen::Index arg = 0;
        for (Eigen::Index j = 1; j < d; ++j)
            if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
        if (v(arg) < 0.0) v = -v;
        r.components.col(static_cast<Eigen::Index>(c)) = v;
        r.explained.push_back(std::max(0.0, eig.eigenvalues()(src)) / total);
    }
    r.coords = centered * r.components;
    return r;
}

void write_embedding_csv(const std::string& path, const EmbeddingTable& table, const Eigen::MatrixXd& coords) {
    if (static_cast<std::size_t>(coords.rows()) != table.rows()) throw ShapeError("embedding csv: row mismatch");
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.precision(17);
    out << "row,appearance_class,structure_class,view_angle";
    for (Eigen::Index c = 0; c < coords.cols(); ++c) out << ",c" << c;
    out << '\n';
    for (std::size_t i = 0; i < table.rows(); ++i) {
        out << i << ',' << table.appearance_class[i] << ',' << table.structure_class[i] << ',' << table.view_angle[i];
        for (Eigen::Index c = 0; c < coords.cols(); ++c) out << ',' << coords(static_cast<Eigen::Index>(i), c);
        out << '\n';
    }
    if (!out) throw Error("failed writing '" + path + "'");
}

void write_scatter_svg(const std::string& path, const Eigen::MatrixXd& coords, std::span<const int> labels,
                       const std::string& title) {
    if (coords.cols() < 2 || static_cast<std::size_t>(coords.rows()) != labels.size()) {
        throw ShapeError("scatter: need N x 2 coordinates and N labels");
    }
    static const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    constexpr double kSize = 480.0, kMargin = 40.0;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (coords.rows() > 0) {
        x0 = coords.col(0).minCoeff();
        x1 = coords.col(0).maxCoeff();
        y0 = coords.col(1).minCoeff();
        y1 = coords.col(1).maxCoeff();
    }
    const double sx = (kSize - 2 * kMargin) / std::max(x1 - x0, 1e-12);
    const double sy = (kSize - 2 * kMargin) / std::max(y1 - y0, 1e-12);

    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << kMargin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    for (Eigen::Index i = 0; i < coords.rows(); ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        const char* color = kColors[static_cast<std::size_t>(std::abs(label)) % 10];
        out << "<circle cx=\"" << kMargin + (coords(i, 0) - x0) * sx << "\" cy=\""
            << kSize - kMargin - (coords(i, 1) - y0) * sy << "\" r=\"3\" fill=\"" << color
            << "\" fill-opacity=\"0.7\"><title>" << label << "</title></circle>\n";
    }
    out << "</svg>\n";
    if (!out) throw Error("failed writing '" + path + "'");
}

nlohmann::json to_json(const EvalMetrics& m) {
    return {{"val_rec", m.val_rec},
            {"retrieval_top1", m.retrieval_top1},
            {"alignment", m.alignment},
            {"appearance_probe_za", m.appearance_probe_za},
            {"appearance_probe_zs", m.appearance_probe_zs},
            {"structure_probe_za", m.structure_probe_za},
            {"structure_probe_zs", m.structure_probe_zs}};
}

EvalMetrics evaluate_model(ModelParams& params, std::span<const MultimodalSample> samples, TrainMode mode,
                           std::uint64_t probe_seed) {
    EvalMetrics m;
    m.val_rec = validation_recon(params, samples, mode);
    const EmbeddingTable za = extract_embeddings(params, samples, LatentSpace::appearance);
    const EmbeddingTable zs = extract_embeddings(params, samples, LatentSpace::structure_rgb);
    const EmbeddingTable zb = extract_embeddings(params, samples, LatentSpace::structure_depth);
    m.retrieval_top1 = retrieval_accuracy(zs, zb);
    m.alignment = alignment(za, zs);
    m.appearance_probe_za = linear_probe(za, FactorLabel::appearance_class, probe_seed);
    m.appearance_probe_zs = linear_probe(zs, FactorLabel::appearance_class, probe_seed);
    m.structure_probe_za = linear_probe(za, FactorLabel::structure_class, probe_seed);
    m.structure_probe_zs = linear_probe(zs, FactorLabel::structure_class, probe_seed);
    return m;
}

nlohmann::json to_json(const SwapMetrics& m) {
    return {{"count", m.count},
            {"appearance_flip_rate", m.appearance_flip_rate},
            {"structure_retention_rate", m.structure_retention_rate}};
}

SwapMetrics swap_metrics(ModelParams& params, std::span<const MultimodalSample> reference,
                         std::span<const MultimodalSample> targets, int source_class, int target_class) {
    const EmbeddingTable ref_a = extract_embeddings(params, reference, LatentSpace::appearance);
    const EmbeddingTable ref_s = extract_embeddings(params, reference, LatentSpace::structure_rgb);
    const Eigen::VectorXd target_mean = mean_appearance(ref_a, target_class);
    const LinearProbe appearance_probe = fit_probe(ref_a, FactorLabel::appearance_class);
    const LinearProbe structure_probe = fit_probe(ref_s, FactorLabel::structure_class);

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (targets[i].factors.appearance_class == source_class) idx.push_back(i);
    if (idx.empty()) throw Error("swap: no images of source class " + std::to_string(source_class));

    SwapMetrics m;
    m.count = idx.size();
    m.before = stack_rgb(targets, idx);
    if (source_class == target_class) {
        m.after = reconstruct(params, m.before);
    } else {
        const std::vector<double> code(target_mean.data(), target_mean.data() + target_mean.size());
        m.after = swap_decode(params, m.before, code);
    }

    NoGradGuard no_grad;
    const Eigen::MatrixXd a = to_matrix(encoder_forward(params.appearance, m.after, Mode::eval).mu);
    const Eigen::MatrixXd s = to_matrix(encoder_forward(params.structure_rgb, m.after, Mode::eval).mu);
    const auto a_pred = appearance_probe.predict(a);
    const auto s_pred = structure_probe.predict(s);
    std::size_t flipped = 0, retained = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        flipped += a_pred[k] == target_class;
        retained += s_pred[k] == targets[idx[k]].factors.structure_class;
    }
    m.appearance_flip_rate = static_cast<double>(flipped) / static_cast<double>(idx.size());
    m.structure_retention_rate = static_cast<double>(retained) / static_cast<double>(idx.size());
    return m;
}

}  // namespace jemb
