#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "jemb/data.hpp"
#include "jemb/models.hpp"
#include "jemb/training.hpp"

namespace jemb {

enum class LatentSpace { appearance, structure_rgb, structure_depth };
enum class FactorLabel { appearance_class, structure_class };

std::string to_string(LatentSpace which);

/// Eval-mode mean codes, one row per sample, with the sample's factor labels.
struct EmbeddingTable {
    Eigen::MatrixXd matrix;  // N x d
    std::vector<int> appearance_class;
    std::vector<int> structure_class;
    std::vector<double> view_angle;

    std::size_t rows() const { return static_cast<std::size_t>(matrix.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(matrix.cols()); }
    const std::vector<int>& labels(FactorLabel label) const;
};

/// Encodes every sample (rgb for appearance / structure_rgb, depth for
/// structure_depth). Throws ConfigError when the image size does not match
/// the architecture.
EmbeddingTable extract_embeddings(ModelParams& params, std::span<const MultimodalSample> samples, LatentSpace which);

/// Fraction of rows i whose most cosine-similar row of zb is row i. Any other
/// row scoring at least as high counts as a miss.
double retrieval_accuracy(const EmbeddingTable& za, const EmbeddingTable& zb);

/// Mean squared cosine between matched rows.
double alignment(const EmbeddingTable& za, const EmbeddingTable& zs);

/// Mean of the rows carrying the given appearance class.
Eigen::VectorXd mean_appearance(const EmbeddingTable& table, int appearance_class);

/// Eval-mode reconstruction of (B,3,H,W) images from their own codes.
Tensor reconstruct(ModelParams& params, const Tensor& rgb);

/// Decodes each image's structure code with the given appearance code.
Tensor swap_decode(ModelParams& params, const Tensor& rgb, std::span<const double> z_a_override);

/// One-vs-rest least-squares linear classifier with a bias column. A tiny
/// ridge on the weights (not the bias) keeps the normal equations regular.
class LinearProbe {
  public:
    static LinearProbe train(const Eigen::MatrixXd& x, std::span<const int> labels);
    int predict(const Eigen::VectorXd& row) const;
    std::vector<int> predict(const Eigen::MatrixXd& x) const;
    const std::vector<int>& classes() const { return classes_; }

  private:
    std::vector<int> classes_;
    Eigen::MatrixXd weights_;  // (d+1) x classes
};

/// Trains a probe on a seeded, per-class 80/20 split and returns held-out
/// accuracy. Needs at least 2 classes with at least 10 rows each.
double linear_probe(const EmbeddingTable& table, FactorLabel label, std::uint64_t seed = 0);

/// Probe trained on every row of the table.
LinearProbe fit_probe(const EmbeddingTable& table, FactorLabel label);

struct PcaResult {
    Eigen::MatrixXd coords;      // N x k
    Eigen::MatrixXd components;  // d x k, unit columns
    std::vector<double> explained;  // variance fractions, non-increasing
};

/// Projection onto the top-k principal directions of the centered rows. Each
/// direction is signed so its largest-magnitude entry is positive.
PcaResult pca_project(const EmbeddingTable& table, std::size_t k = 2);

/// Columns: row, appearance_class, structure_class, view_angle, then one per coordinate.
void write_embedding_csv(const std::string& path, const EmbeddingTable& table, const Eigen::MatrixXd& coords);

/// Standalone SVG scatter of the first two columns, colored by label.
void write_scatter_svg(const std::string& path, const Eigen::MatrixXd& coords, std::span<const int> labels,
                       const std::string& title);

/// The evaluation report: validation reconstruction loss, cross-modal
/// structure retrieval, appearance/structure alignment and held-out linear
/// probe accuracies of both RGB latent spaces, all on one partition.
struct EvalMetrics {
    double val_rec = 0.0;
    double retrieval_top1 = 0.0;
    double alignment = 0.0;
    double appearance_probe_za = 0.0;
    double appearance_probe_zs = 0.0;
    double structure_probe_za = 0.0;
    double structure_probe_zs = 0.0;
};

nlohmann::json to_json(const EvalMetrics& m);

EvalMetrics evaluate_model(ModelParams& params, std::span<const MultimodalSample> samples, TrainMode mode,
                           std::uint64_t probe_seed = 0);

/// Outcome of moving source-class images to the target class's mean
/// appearance code. Probes are trained on the reference partition; the edited
/// images are re-encoded and classified.
struct SwapMetrics {
    std::size_t count = 0;
    double appearance_flip_rate = 0.0;      // re-encoded appearance predicted as target
    double structure_retention_rate = 0.0;  // re-encoded structure predicted as the true class
    Tensor before;                          // (count,3,H,W) source images
    Tensor after;                           // (count,3,H,W) edited images
};

nlohmann::json to_json(const SwapMetrics& m);

/// When source == target every image keeps its own appearance code, so the
/// edit is the plain reconstruction.
SwapMetrics swap_metrics(ModelParams& params, std::span<const MultimodalSample> reference,
                         std::span<const MultimodalSample> targets, int source_class, int target_class);

}  // namespace jemb
