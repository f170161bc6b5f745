#include "mipr/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mipr/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mipr {

// ---------------------------------------------------------------------------
// Core types

ImageTensor::ImageTensor(int height, int width, int channels, float fill)
    : ImageTensor(height, width, channels,
                  std::vector<float>(static_cast<std::size_t>(std::max(height, 0)) * std::max(width, 0) *
                                         std::max(channels, 0),
                                     fill)) {}

ImageTensor::ImageTensor(int height, int width, int channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    require(channels == 1 || channels == 3, ErrorKind::Invalid,
            "image must have 1 or 3 channels, got " + std::to_string(channels));
    require(height >= 8 && width >= 8, ErrorKind::Invalid,
            "image must be at least 8x8, got " + std::to_string(height) + "x" + std::to_string(width));
    require(data_.size() == static_cast<std::size_t>(height) * width * channels, ErrorKind::Invalid,
            "image data size does not match its shape");
    for (float v : data_)
        require(v >= 0.0f && v <= 1.0f, ErrorKind::Invalid, "image value outside [0,1]");
}

ImageTensor ImageTensor::quantized() const {
    ImageTensor out = *this;
    for (float& v : out.data_) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    return out;
}

std::vector<double> ImageTensor::luminance() const {
    std::vector<double> out(static_cast<std::size_t>(height_) * width_);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (channels_ == 1) {
            out[i] = data_[i];
        } else {
            const float* p = &data_[i * 3];
            out[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    }
    return out;
}

LabelMask::LabelMask(int height, int width, std::uint8_t fill)
    : LabelMask(height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(height, 0)) *
                                                             std::max(width, 0),
                                                         fill)) {}

LabelMask::LabelMask(int height, int width, std::vector<std::uint8_t> data)
    : height_(height), width_(width), data_(std::move(data)) {
    require(height > 0 && width > 0, ErrorKind::Invalid, "mask dimensions must be positive");
    require(data_.size() == static_cast<std::size_t>(height) * width, ErrorKind::Invalid,
            "mask data size does not match its shape");
    for (auto v : data_) require(v < kNumClasses, ErrorKind::Invalid, "mask contains invalid class id");
}

std::size_t LabelMask::foreground_count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

Provenance Provenance::mipr(int iteration) {
    require(iteration >= 1, ErrorKind::Invalid, "annotation iteration must be positive");
    return {iteration};
}

std::string Provenance::str() const {
    return is_manual() ? "manual" : "mipr:" + std::to_string(iteration);
}

Provenance Provenance::parse(const std::string& text) {
    if (text == "manual") return manual();
    if (text.rfind("mipr:", 0) == 0) {
        try {
            std::size_t used = 0;
            const int k = std::stoi(text.substr(5), &used);
            if (used == text.size() - 5 && k >= 1) return mipr(k);
        } catch (const std::exception&) {
        }
    }
    fail(ErrorKind::Data, "invalid provenance '" + text + "'");
}

void DatasetSplit::validate() const {
    std::set<std::string> ids;
    auto add_id = [&](const std::string& id) {
        require(!id.empty(), ErrorKind::Data, "empty id in split");
        require(ids.insert(id).second, ErrorKind::Data, "duplicate id '" + id + "' in split");
    };
    auto check_pair = [&](const LabeledPair& p) {
        add_id(p.id);
        require(p.image.height() == p.mask.height() && p.image.width() == p.mask.width(), ErrorKind::Data,
                "image and mask dimensions differ for '" + p.id + "'");
    };
    for (const auto& p : labeled) check_pair(p);
    for (const auto& u : unlabeled) add_id(u.id);
    for (const auto& p : test) check_pair(p);
}

SplitSizes SplitSizes::scaled(std::size_t total) {
    require(total >= 3, ErrorKind::Invalid, "need at least 3 images to populate three splits");
    constexpr double kLabeled = 200.0, kUnlabeled = 1800.0, kTest = 594.0;
    constexpr double kTotal = kLabeled + kUnlabeled + kTest;
    SplitSizes s;
    s.labeled = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(total * kLabeled / kTotal)));
    s.test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(total * kTest / kTotal)));
    if (s.labeled + s.test >= total) {
        s.labeled = 1;
        s.test = 1;
    }
    s.unlabeled = total - s.labeled - s.test;
    return s;
}

// ---------------------------------------------------------------------------
// Image IO

namespace {

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

cv::Mat read_raw(const fs::path& path) {
    require(fs::exists(path), ErrorKind::Io, "file not found: " + path.string());
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    require(!m.empty(), ErrorKind::Io, "unreadable image: " + path.string());
    if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
    require(m.depth() == CV_8U, ErrorKind::Io, "unsupported pixel depth in " + path.string());
    return m;
}

void write_raw(const fs::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    require(cv::imwrite(path.string(), m), ErrorKind::Io, "failed to write " + path.string());
}

}  // namespace

ImageTensor read_image(const fs::path& path) {
    cv::Mat m = read_raw(path);
    int channels = 3;
    switch (m.channels()) {
        case 1: channels = 1; break;
        case 3: cv::cvtColor(m, m, cv::COLOR_BGR2RGB); break;
        case 4: cv::cvtColor(m, m, cv::COLOR_BGRA2RGB); break;
        default: fail(ErrorKind::Io, "unsupported channel count in " + path.string());
    }
    require(m.rows >= 8 && m.cols >= 8, ErrorKind::Data, "image too small: " + path.string());
    std::vector<float> data(static_cast<std::size_t>(m.rows) * m.cols * channels);
    for (int y = 0; y < m.rows; ++y) {
        const std::uint8_t* row = m.ptr<std::uint8_t>(y);
        for (int i = 0; i < m.cols * channels; ++i)
            data[static_cast<std::size_t>(y) * m.cols * channels + i] = row[i] / 255.0f;
    }
    return ImageTensor(m.rows, m.cols, channels, std::move(data));
}

void write_image(const fs::path& path, const ImageTensor& image) {
    const int type = image.channels() == 1 ? CV_8UC1 : CV_8UC3;
    cv::Mat m(image.height(), image.width(), type);
    const auto data = image.data();
    for (int y = 0; y < image.height(); ++y) {
        std::uint8_t* row = m.ptr<std::uint8_t>(y);
        for (int i = 0; i < image.width() * image.channels(); ++i) {
            const float v = data[static_cast<std::size_t>(y) * image.width() * image.channels() + i];
            row[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
    }
    if (image.channels() == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
    write_raw(path, m);
}

LabelMask read_mask(const fs::path& path) {
    cv::Mat m = read_raw(path);
    if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
    if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
    std::vector<std::uint8_t> data(static_cast<std::size_t>(m.rows) * m.cols);
    for (int y = 0; y < m.rows; ++y) {
        const std::uint8_t* row = m.ptr<std::uint8_t>(y);
        for (int x = 0; x < m.cols; ++x) data[static_cast<std::size_t>(y) * m.cols + x] = row[x] > 0 ? 1 : 0;
    }
    return LabelMask(m.rows, m.cols, std::move(data));
}

void write_mask(const fs::path& path, const LabelMask& mask) {
    cv::Mat m(mask.height(), mask.width(), CV_8UC1);
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
    write_raw(path, m);
}

void write_gray(const fs::path& path, std::span<const double> values, int height, int width) {
    require(values.size() == static_cast<std::size_t>(height) * width, ErrorKind::Invalid,
            "write_gray: size mismatch");
    cv::Mat m(height, width, CV_8UC1);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            m.at<std::uint8_t>(y, x) =
                static_cast<std::uint8_t>(std::lround(std::clamp(values[y * width + x], 0.0, 1.0) * 255.0));
    write_raw(path, m);
}

ImageTensor resize_image(const ImageTensor& image, int height, int width) {
    if (image.height() == height && image.width() == width) return image.quantized();
    const int type = image.channels() == 1 ? CV_32FC1 : CV_32FC3;
    cv::Mat src(image.height(), image.width(), type, const_cast<float*>(image.data().data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    std::vector<float> data(reinterpret_cast<const float*>(dst.data),
                            reinterpret_cast<const float*>(dst.data) + static_cast<std::size_t>(height) * width * image.channels());
    for (float& v : data) v = std::clamp(v, 0.0f, 1.0f);
    return ImageTensor(height, width, image.channels(), std::move(data)).quantized();
}

LabelMask resize_mask(const LabelMask& mask, int height, int width) {
    if (mask.height() == height && mask.width() == width) return mask;
    cv::Mat src(mask.height(), mask.width(), CV_32FC1);
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) src.at<float>(y, x) = mask.at(y, x);
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    LabelMask out(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) out.at(y, x) = dst.at<float>(y, x) >= 0.5f ? 1 : 0;
    return out;
}

// ---------------------------------------------------------------------------
// ISIC-layout ingestion

namespace {

std::optional<fs::path> find_mask(const fs::path& masks_dir, const std::string& stem) {
    for (const std::string& name : {stem + ".png", stem + "_segmentation.png"}) {
        const fs::path p = masks_dir / name;
        if (fs::exists(p)) return p;
    }
    return std::nullopt;
}

std::string make_id(const std::string& prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%05zu", prefix.c_str(), index);
    return buf;
}

}  // namespace

DatasetSplit ingest_isic(const fs::path& source, const IngestOptions& options) {
    const fs::path images_dir = source / "images";
    const fs::path masks_dir = source / "masks";
    require(fs::is_directory(images_dir), ErrorKind::Io, "missing directory " + images_dir.string());
    require(options.height >= 8 && options.width >= 8, ErrorKind::Invalid, "target size must be at least 8x8");

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(images_dir))
        if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    require(!files.empty(), ErrorKind::Data, "no images found in " + images_dir.string());

    const SplitSizes sizes = options.sizes ? *options.sizes : SplitSizes::scaled(files.size());
    require(sizes.total() <= files.size(), ErrorKind::Config,
            "split sizes (" + std::to_string(sizes.labeled) + "," + std::to_string(sizes.unlabeled) + "," +
                std::to_string(sizes.test) + ") exceed corpus size " + std::to_string(files.size()));

    // Seeded shuffle renames the files so neighbouring original names do not
    // end up adjacent.
    std::vector<std::size_t> order(files.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(options.seed, "ingest");
    std::shuffle(order.begin(), order.end(), rng);

    DatasetSplit split;
    for (std::size_t pos = 0; pos < sizes.total(); ++pos) {
        const fs::path& file = files[order[pos]];
        const std::string id = make_id("r", pos);
        ImageTensor image = resize_image(read_image(file), options.height, options.width);
        const bool is_unlabeled = pos >= sizes.labeled && pos < sizes.labeled + sizes.unlabeled;
        if (is_unlabeled) {
            split.unlabeled.push_back({id, std::move(image), file.filename().string()});
            continue;
        }
        const auto mask_path = find_mask(masks_dir, file.stem().string());
        require(mask_path.has_value(), ErrorKind::Data,
                "missing mask for " + file.filename().string() + " (assigned to " +
                    (pos < sizes.labeled ? "labeled" : "test") + ")");
        LabelMask mask = resize_mask(read_mask(*mask_path), options.height, options.width);
        LabeledPair pair{id, std::move(image), std::move(mask), Provenance::manual(), file.filename().string()};
        (pos < sizes.labeled ? split.labeled : split.test).push_back(std::move(pair));
    }
    split.validate();
    return split;
}

// ---------------------------------------------------------------------------
// Synthetic data

bool Ellipse::contains(int y, int x) const {
    const double dy = y + 0.5 - center_y;
    const double dx = x + 0.5 - center_x;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / axis_a;
    const double v = (-dx * s + dy * c) / axis_b;
    return u * u + v * v <= 1.0;
}

SyntheticSample synthesize_sample(int height, int width, Rng& rng, const SyntheticOptions& options) {
    require(height >= 16 && width >= 16, ErrorKind::Invalid, "synthetic images must be at least 16x16");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    const double m = std::min(height, width);
    const double pi = std::numbers::pi;

    SyntheticSample s;
    s.lesion.axis_a = uniform(0.15, 0.3) * m;
    s.lesion.axis_b = uniform(0.12, 0.25) * m;
    s.lesion.center_y = uniform(0.3, 0.7) * height;
    s.lesion.center_x = uniform(0.3, 0.7) * width;
    s.lesion.angle = uniform(0.0, pi);

    const double tone = uniform(0.6, 0.8);
    const double base[3] = {tone + 0.08, tone - 0.02, tone - 0.08};
    const double hair_color[3] = {0.16, 0.11, 0.09};

    s.mask = LabelMask(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) s.mask.at(y, x) = s.lesion.contains(y, x) ? 1 : 0;

    // Streaks pass near the lesion so the detail path has structure to carry.
    s.hair = LabelMask(height, width);
    std::uniform_int_distribution<int> hair_count(options.min_hairs, options.max_hairs);
    const int hairs = hair_count(rng);
    std::vector<double> hair_alpha(static_cast<std::size_t>(height) * width, 0.0);
    for (int h = 0; h < hairs; ++h) {
        const double py = s.lesion.center_y + uniform(-0.5, 0.5) * s.lesion.axis_b;
        const double px = s.lesion.center_x + uniform(-0.5, 0.5) * s.lesion.axis_a;
        const double theta = uniform(0.0, pi);
        const double bend = uniform(-0.6, 0.6) / m;
        const double alpha = uniform(0.6, 0.9);
        const double dy = std::sin(theta), dx = std::cos(theta);
        const double reach = std::max(height, width) * 1.5;
        for (double t = -reach; t <= reach; t += 0.25) {
            const double y = py + t * dy + bend * t * t * dx;
            const double x = px + t * dx - bend * t * t * dy;
            const int iy = static_cast<int>(std::floor(y));
            const int ix = static_cast<int>(std::floor(x));
            if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
            s.hair.at(iy, ix) = 1;
            hair_alpha[static_cast<std::size_t>(iy) * width + ix] = alpha;
        }
    }

    // Texture: low-frequency waves plus grain, with lesion mottling inside.
    const double amp = options.texture_amplitude;
    struct Wave {
        double fy, fx, phase;
    };
    Wave waves[3], mottle;
    for (auto& w : waves) w = {uniform(0.5, 3.0) * 2 * pi / height, uniform(0.5, 3.0) * 2 * pi / width, uniform(0, 2 * pi)};
    mottle = {uniform(4.0, 8.0) * 2 * pi / height, uniform(4.0, 8.0) * 2 * pi / width, uniform(0, 2 * pi)};

    const std::size_t pixels = static_cast<std::size_t>(height) * width;
    std::vector<double> texture(pixels * 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double low = 0.0;
            for (const auto& w : waves) low += std::sin(w.fy * y + w.fx * x + w.phase);
            low *= 0.5 * amp / 3.0;
            const double mot = s.mask.at(y, x) ? 0.25 * amp * std::sin(mottle.fy * y + mottle.fx * x + mottle.phase) : 0.0;
            for (int c = 0; c < 3; ++c)
                texture[(static_cast<std::size_t>(y) * width + x) * 3 + c] = low + mot + uniform(-0.25, 0.25) * amp;
        }

    // Zero-mean texture per region over streak-free pixels, so the region
    // means differ by exactly the lesion contrast.
    for (int c = 0; c < 3; ++c) {
        double sum[2] = {0, 0};
        double count[2] = {0, 0};
        for (std::size_t i = 0; i < pixels; ++i) {
            if (s.hair.data()[i]) continue;
            const int r = s.mask.data()[i];
            sum[r] += texture[i * 3 + c];
            count[r] += 1;
        }
        for (std::size_t i = 0; i < pixels; ++i) {
            const int r = s.mask.data()[i];
            if (count[r] > 0) texture[i * 3 + c] -= sum[r] / count[r];
        }
    }

    std::vector<float> data(pixels * 3);
    for (std::size_t i = 0; i < pixels; ++i)
        for (int c = 0; c < 3; ++c) {
            double v = base[c] + texture[i * 3 + c] - options.lesion_contrast * s.mask.data()[i];
            if (s.hair.data()[i]) v = (1 - hair_alpha[i]) * v + hair_alpha[i] * hair_color[c];
            data[i * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    s.image = ImageTensor(height, width, 3, std::move(data)).quantized();
    return s;
}

DatasetSplit make_synthetic_dataset(int count, int height, int width, std::uint64_t seed,
                                    const SyntheticOptions& options) {
    require(count >= 3, ErrorKind::Invalid, "synthetic dataset needs count >= 3 to populate three splits");
    require(height >= 16 && width >= 16, ErrorKind::Invalid, "synthetic images must be at least 16x16");
    const SplitSizes sizes = options.sizes ? *options.sizes : SplitSizes::scaled(static_cast<std::size_t>(count));
    require(sizes.total() == static_cast<std::size_t>(count), ErrorKind::Config,
            "split sizes must sum to the synthetic count");
    require(sizes.labeled >= 1 && sizes.test >= 1, ErrorKind::Config, "labeled and test splits must be non-empty");

    DatasetSplit split;
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        SyntheticSample s = synthesize_sample(height, width, rng, options);
        const std::string id = make_id("syn", static_cast<std::size_t>(i));
        const auto pos = static_cast<std::size_t>(i);
        if (pos < sizes.labeled) {
            split.labeled.push_back({id, std::move(s.image), std::move(s.mask), Provenance::manual(), ""});
        } else if (pos < sizes.labeled + sizes.unlabeled) {
            split.hidden_truth.emplace(id, std::move(s.mask));
            split.unlabeled.push_back({id, std::move(s.image), ""});
        } else {
            split.test.push_back({id, std::move(s.image), std::move(s.mask), Provenance::manual(), ""});
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr const char* kManifestName = "manifest.json";

void check_id(const std::string& id) {
    require(!id.empty() && id.find_first_of("/\\") == std::string::npos && id != "." && id != "..",
            ErrorKind::Data, "id '" + id + "' is not usable as a file name");
}

json image_record(const std::string& id, const std::string& split_name, const std::string& provenance,
                  const std::string& original, const ImageTensor& image) {
    return json{{"id", id},
                {"split", split_name},
                {"provenance", provenance},
                {"original_filename", original},
                {"height", image.height()},
                {"width", image.width()},
                {"channels", image.channels()}};
}

}  // namespace

CorpusSummary save_corpus(const DatasetSplit& split, const fs::path& directory) {
    split.validate();
    fs::create_directories(directory / "images");
    CorpusSummary summary;
    json records = json::array();

    auto save_pair = [&](const LabeledPair& p, const std::string& split_name) {
        check_id(p.id);
        write_image(directory / "images" / (p.id + ".png"), p.image);
        write_mask(directory / "masks" / (p.id + ".png"), p.mask);
        records.push_back(image_record(p.id, split_name, p.provenance.str(), p.original_filename, p.image));
    };
    for (const auto& p : split.labeled) save_pair(p, "labeled");
    for (const auto& u : split.unlabeled) {
        check_id(u.id);
        write_image(directory / "images" / (u.id + ".png"), u.image);
        json record = image_record(u.id, "unlabeled", "none", u.original_filename, u.image);
        record["hidden_mask"] = split.hidden_truth.count(u.id) > 0;
        records.push_back(std::move(record));
    }
    for (const auto& p : split.test) save_pair(p, "test");

    // Ground truth can outlive its image in the pool (annotated images move
    // to the labeled set), so it is listed separately.
    json hidden_ids = json::array();
    for (const auto& [id, mask] : split.hidden_truth) {
        check_id(id);
        write_mask(directory / "hidden" / (id + ".png"), mask);
        hidden_ids.push_back(id);
        ++summary.hidden;
    }

    summary.labeled = split.labeled.size();
    summary.unlabeled = split.unlabeled.size();
    summary.test = split.test.size();

    const json manifest{{"format", "mipr-corpus"},
                        {"version", 1},
                        {"records", std::move(records)},
                        {"hidden_ids", std::move(hidden_ids)}};
    std::ofstream out(directory / kManifestName);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write manifest in " + directory.string());
    out << manifest.dump(2) << '\n';
    return summary;
}

DatasetSplit load_corpus(const fs::path& directory) {
    const fs::path manifest_path = directory / kManifestName;
    std::ifstream in(manifest_path);
    require(static_cast<bool>(in), ErrorKind::Io, "manifest not found: " + manifest_path.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, "corrupted manifest " + manifest_path.string() + ": " + e.what());
    }
    require(manifest.is_object() && manifest.value("format", "") == "mipr-corpus" &&
                manifest.contains("records") && manifest["records"].is_array(),
            ErrorKind::Data, "manifest " + manifest_path.string() + " is not a corpus manifest");

    DatasetSplit split;
    std::size_t index = 0;
    for (const json& r : manifest["records"]) {
        const std::string where = "manifest record " + std::to_string(index++);
        std::string id, split_name, provenance, original;
        int height = 0, width = 0, channels = 0;
        try {
            id = r.at("id").get<std::string>();
            split_name = r.at("split").get<std::string>();
            provenance = r.at("provenance").get<std::string>();
            original = r.at("original_filename").get<std::string>();
            height = r.at("height").get<int>();
            width = r.at("width").get<int>();
            channels = r.at("channels").get<int>();
        } catch (const json::exception& e) {
            fail(ErrorKind::Data, where + ": " + e.what());
        }
        check_id(id);
        const std::string label = where + " ('" + id + "')";

        ImageTensor image = read_image(directory / "images" / (id + ".png"));
        require(image.height() == height && image.width() == width && image.channels() == channels,
                ErrorKind::Data, label + ": image dimensions do not match manifest");

        auto load_mask = [&](const fs::path& path) {
            LabelMask mask = read_mask(path);
            require(mask.height() == height && mask.width() == width, ErrorKind::Data,
                    label + ": mask dimensions do not match image");
            return mask;
        };

        if (split_name == "unlabeled") {
            if (r.value("hidden_mask", false))
                split.hidden_truth.emplace(id, load_mask(directory / "hidden" / (id + ".png")));
            split.unlabeled.push_back({id, std::move(image), original});
        } else if (split_name == "labeled" || split_name == "test") {
            Provenance prov;
            try {
                prov = Provenance::parse(provenance);
            } catch (const Error& e) {
                fail(ErrorKind::Data, label + ": " + e.what());
            }
            LabeledPair pair{id, std::move(image), load_mask(directory / "masks" / (id + ".png")), prov, original};
            (split_name == "labeled" ? split.labeled : split.test).push_back(std::move(pair));
        } else {
            fail(ErrorKind::Data, label + ": unknown split '" + split_name + "'");
        }
    }
    if (manifest.contains("hidden_ids")) {
        require(manifest["hidden_ids"].is_array(), ErrorKind::Data,
                "manifest " + manifest_path.string() + ": hidden_ids must be an array");
        for (const json& entry : manifest["hidden_ids"]) {
            require(entry.is_string(), ErrorKind::Data, "manifest " + manifest_path.string() + ": bad hidden id");
            const std::string id = entry.get<std::string>();
            check_id(id);
            if (!split.hidden_truth.count(id)) split.hidden_truth.emplace(id, read_mask(directory / "hidden" / (id + ".png")));
        }
    }
    split.validate();
    return split;
}

}  // namespace mipr
