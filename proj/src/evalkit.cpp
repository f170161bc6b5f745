#include "mipr/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mipr/error.hpp"

namespace mipr {

namespace {

void check_dims(const LabelMask& pred, const LabelMask& gt) {
    require(pred.height() == gt.height() && pred.width() == gt.width(), ErrorKind::Invalid,
            "mask dimensions differ: " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) +
                " vs " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
}

}  // namespace

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt) {
    check_dims(pred, gt);
    ConfusionCounts c;
    auto p = pred.data();
    auto g = gt.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pp = p[i] != 0;
        const bool gg = g[i] != 0;
        if (pp && gg)
            ++c.tp;
        else if (pp)
            ++c.fp;
        else if (gg)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

double dsc(const ConfusionCounts& c, double empty_value) {
    const std::uint64_t denom = c.fp + 2 * c.tp + c.fn;
    if (denom == 0) return empty_value;
    return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double dsc(const LabelMask& pred, const LabelMask& gt, double empty_value) {
    return dsc(confusion(pred, gt), empty_value);
}

double acc(const ConfusionCounts& c) {
    require(c.total() > 0, ErrorKind::Invalid, "accuracy of empty masks");
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double acc(const LabelMask& pred, const LabelMask& gt) { return acc(confusion(pred, gt)); }

namespace {

// Valid-mode separable filtering of a row-major plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int height, int width,
                                 const std::vector<double>& kernel) {
    const int k = static_cast<int>(kernel.size());
    const int ow = width - k + 1;
    const int oh = height - k + 1;
    std::vector<double> rows(static_cast<std::size_t>(height) * ow);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc_v = 0.0;
            for (int t = 0; t < k; ++t) acc_v += kernel[t] * plane[static_cast<std::size_t>(y) * width + x + t];
            rows[static_cast<std::size_t>(y) * ow + x] = acc_v;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc_v = 0.0;
            for (int t = 0; t < k; ++t) acc_v += kernel[t] * rows[static_cast<std::size_t>(y + t) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = acc_v;
        }
    return out;
}

}  // namespace

double ssim(const ImageTensor& a, const ImageTensor& b, const SsimOptions& options) {
    require(a.height() == b.height() && a.width() == b.width(), ErrorKind::Invalid,
            "ssim inputs differ in size");
    require(!a.empty(), ErrorKind::Invalid, "ssim of empty image");
    const int h = a.height();
    const int w = a.width();
    int window = std::min({options.window, h, w});
    if (window % 2 == 0) --window;

    std::vector<double> kernel(window);
    double total = 0.0;
    for (int i = 0; i < window; ++i) {
        const double d = i - (window - 1) / 2.0;
        kernel[i] = std::exp(-d * d / (2.0 * options.sigma * options.sigma));
        total += kernel[i];
    }
    for (double& v : kernel) v /= total;

    const std::vector<double> x = a.luminance();
    const std::vector<double> y = b.luminance();
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, kernel);
    const auto my = filter_valid(y, h, w, kernel);
    const auto sxx = filter_valid(xx, h, w, kernel);
    const auto syy = filter_valid(yy, h, w, kernel);
    const auto sxy = filter_valid(xy, h, w, kernel);

    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cxy = sxy[i] - mx[i] * my[i];
        const double num = (2 * mx[i] * my[i] + options.c1) * (2 * cxy + options.c2);
        const double den = (mx[i] * mx[i] + my[i] * my[i] + options.c1) * (vx + vy + options.c2);
        sum += num / den;
    }
    return sum / static_cast<double>(mx.size());
}

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd r;
    if (values.empty()) return r;
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    if (values.size() < 2) return r;
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return r;
}

MetricsReport summarize(const std::vector<std::string>& ids, const std::vector<LabelMask>& preds,
                        const std::vector<LabelMask>& gts, double empty_dsc) {
    require(ids.size() == preds.size() && preds.size() == gts.size(), ErrorKind::Invalid,
            "summarize needs equally many ids, predictions and ground truths");
    MetricsReport report;
    report.ids = ids;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const ConfusionCounts c = confusion(preds[i], gts[i]);
        report.dsc.push_back(dsc(c, empty_dsc));
        report.acc.push_back(acc(c));
    }
    const MeanStd d = mean_std(report.dsc);
    const MeanStd a = mean_std(report.acc);
    report.dsc_mean = d.mean;
    report.dsc_std = d.std;
    report.acc_mean = a.mean;
    report.acc_std = a.std;
    return report;
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    char line[256];
    out << "id,dsc,acc\n";
    for (std::size_t i = 0; i < report.dsc.size(); ++i) {
        std::snprintf(line, sizeof(line), ",%.10f,%.10f\n", report.dsc[i], report.acc[i]);
        out << report.ids[i] << line;
    }
    std::snprintf(line, sizeof(line), "mean,%.10f,%.10f\nstd,%.10f,%.10f\n", report.dsc_mean, report.acc_mean,
                  report.dsc_std, report.acc_std);
    out << line;
    require(static_cast<bool>(out), ErrorKind::Io, "failed writing " + path.string());
}

std::vector<double> pooled_patch_features(const ImageTensor& image, int grid) {
    require(grid >= 1 && grid <= image.height() && grid <= image.width(), ErrorKind::Invalid,
            "feature grid does not fit the image");
    std::vector<double> features;
    features.reserve(static_cast<std::size_t>(image.channels()) * grid * grid * 2);
    for (int c = 0; c < image.channels(); ++c)
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx) {
                const int y0 = gy * image.height() / grid, y1 = (gy + 1) * image.height() / grid;
                const int x0 = gx * image.width() / grid, x1 = (gx + 1) * image.width() / grid;
                double s = 0.0, ss = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        const double v = image.at(y, x, c);
                        s += v;
                        ss += v * v;
                    }
                const double n = static_cast<double>(y1 - y0) * (x1 - x0);
                const double m = s / n;
                features.push_back(m);
                features.push_back(std::max(0.0, ss / n - m * m));
            }
    return features;
}

namespace {

Eigen::MatrixXd to_matrix(const PointSet& points) {
    require(!points.empty(), ErrorKind::Invalid, "empty point set");
    const std::size_t dim = points.front().size();
    Eigen::MatrixXd m(points.size(), dim);
    for (std::size_t i = 0; i < points.size(); ++i) {
        require(points[i].size() == dim, ErrorKind::Invalid, "points differ in dimension");
        for (std::size_t j = 0; j < dim; ++j) m(i, j) = points[i][j];
    }
    return m;
}

// Conditional probabilities p(j|i) whose entropy matches log(perplexity).
void conditional_row(const Eigen::MatrixXd& d2, int i, double perplexity, Eigen::MatrixXd& p) {
    const int n = static_cast<int>(d2.rows());
    const double target = std::log(perplexity);
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 200; ++iter) {
        double min_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j)
            if (j != i) min_d = std::min(min_d, d2(i, j));
        double z = 0.0, weighted = 0.0;
        for (int j = 0; j < n; ++j) {
            if (j == i) {
                p(i, j) = 0.0;
                continue;
            }
            p(i, j) = std::exp(-beta * (d2(i, j) - min_d));
            z += p(i, j);
            weighted += p(i, j) * (d2(i, j) - min_d);
        }
        const double entropy = std::log(z) + beta * weighted / z;
        for (int j = 0; j < n; ++j) p(i, j) /= z;
        const double diff = entropy - target;
        if (std::abs(diff) < 1e-5) break;
        if (diff > 0) {
            lo = beta;
            beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
}

}  // namespace

std::vector<std::array<double, 2>> pca_2d(const PointSet& points) {
    Eigen::MatrixXd m = to_matrix(points);
    const Eigen::RowVectorXd mean = m.colwise().mean();
    m.rowwise() -= mean;
    const Eigen::MatrixXd cov = m.transpose() * m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const Eigen::Index d = cov.rows();
    std::vector<std::array<double, 2>> out(points.size(), {0.0, 0.0});
    for (int axis = 0; axis < 2 && axis < d; ++axis) {
        Eigen::VectorXd dir = solver.eigenvectors().col(d - 1 - axis);
        // Fix the sign so the output does not depend on the solver.
        Eigen::Index arg;
        dir.cwiseAbs().maxCoeff(&arg);
        if (dir(arg) < 0) dir = -dir;
        const Eigen::VectorXd proj = m * dir;
        for (std::size_t i = 0; i < points.size(); ++i) out[i][axis] = proj(static_cast<Eigen::Index>(i));
    }
    return out;
}

std::vector<std::array<double, 2>> tsne_2d(const PointSet& points, std::uint64_t seed, const TsneOptions& options) {
    const Eigen::MatrixXd x = to_matrix(points);
    const int n = static_cast<int>(x.rows());
    require(n >= 2, ErrorKind::Invalid, "t-SNE needs at least two points");
    const double perplexity = std::max(1.0, std::min(options.perplexity, (n - 1) / 3.0));

    const Eigen::VectorXd sq = x.rowwise().squaredNorm();
    Eigen::MatrixXd d2 = (-2.0 * x * x.transpose()).colwise() + sq;
    d2.rowwise() += sq.transpose();
    d2 = d2.cwiseMax(0.0);

    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) conditional_row(d2, i, perplexity, p);
    const Eigen::MatrixXd joint = (p + p.transpose()) / (2.0 * n);
    p = joint;
    p = p.cwiseMax(1e-12);

    Rng rng(seed);
    std::normal_distribution<double> init(0.0, 1e-4);
    Eigen::MatrixXd y(n, 2);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 2; ++k) y(i, k) = init(rng);
    Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2);
    Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);

    const double lr = options.learning_rate > 0 ? options.learning_rate
                                                : std::max(n / options.early_exaggeration / 4.0, 50.0);
    for (int iter = 0; iter < options.iterations; ++iter) {
        const double exaggeration = iter < options.exaggeration_iterations ? options.early_exaggeration : 1.0;
        const double momentum = iter < options.exaggeration_iterations ? 0.5 : 0.8;
        if (iter == options.exaggeration_iterations) {
            // The second phase starts from fresh momentum and gains.
            velocity.setZero();
            gains.setOnes();
        }
        Eigen::MatrixXd num(n, n);
        double z = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) {
                    num(i, j) = 0.0;
                    continue;
                }
                num(i, j) = 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
                z += num(i, j);
            }
        Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, 2);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                const double q = std::max(num(i, j) / z, 1e-12);
                const double coef = 4.0 * (exaggeration * p(i, j) - q) * num(i, j);
                grad.row(i) += coef * (y.row(i) - y.row(j));
            }
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < 2; ++k) {
                const bool same_sign = (grad(i, k) > 0) == (velocity(i, k) > 0);
                gains(i, k) = same_sign ? std::max(gains(i, k) * 0.8, 0.01) : gains(i, k) + 0.2;
                velocity(i, k) = momentum * velocity(i, k) - lr * gains(i, k) * grad(i, k);
            }
        y += velocity;
        y.rowwise() -= y.colwise().mean();
    }

    std::vector<std::array<double, 2>> out(n);
    for (int i = 0; i < n; ++i) out[i] = {y(i, 0), y(i, 1)};
    return out;
}

Projection export_embedding_projection(const std::vector<std::pair<std::string, ImageTensor>>& real,
                                       const std::vector<std::pair<std::string, ImageTensor>>& generated,
                                       std::uint64_t seed, const TsneOptions& options) {
    require(!real.empty() && !generated.empty(), ErrorKind::Invalid,
            "embedding projection needs real and generated images");
    PointSet features;
    Projection projection;
    for (const auto& [group, set] : {std::pair{"real", &real}, std::pair{"generated", &generated}})
        for (const auto& [id, image] : *set) {
            features.push_back(pooled_patch_features(image));
            projection.points.push_back({0.0, 0.0, group, id});
        }
    std::vector<std::array<double, 2>> xy;
    if (features.size() < kTsneMinPoints) {
        projection.method = "pca";
        projection.warning = std::to_string(features.size()) + " points is below the t-SNE minimum of " +
                             std::to_string(kTsneMinPoints) + "; using PCA";
        xy = pca_2d(features);
    } else {
        projection.method = "tsne";
        xy = tsne_2d(features, seed, options);
    }
    for (std::size_t i = 0; i < xy.size(); ++i) {
        projection.points[i].x = xy[i][0];
        projection.points[i].y = xy[i][1];
    }
    return projection;
}

void write_projection_csv(const std::filesystem::path& path, const Projection& projection) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << "x,y,group,id\n";
    char buf[96];
    for (const auto& p : projection.points) {
        std::snprintf(buf, sizeof(buf), "%.9f,%.9f,", p.x, p.y);
        out << buf << p.group << ',' << p.id << '\n';
    }
    require(static_cast<bool>(out), ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace mipr
