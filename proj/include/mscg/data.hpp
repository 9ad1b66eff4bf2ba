#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "mscg/mten.hpp"
#include "mscg/rng.hpp"
#include "mscg/tensor.hpp"

namespace mscg {

inline const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names = {"Background",     "Cloud shadow", "Double plant", "Planter skip",
                                                   "Standing water", "Waterway",     "Weed cluster"};
    return names;
}

// Line-oriented manifest: one sample directory per line, '#' comments.
struct DatasetManifest {
    std::string root;
    std::vector<std::string> sample_dirs;
    std::int64_t num_classes = 7;

    std::size_t size() const { return sample_dirs.size(); }
    std::string sample_path(std::size_t i) const {
        const std::filesystem::path p(sample_dirs[i]);
        if (p.is_absolute()) return p.string();
        return (std::filesystem::path(root) / p).string();
    }
};

inline DatasetManifest load_manifest(const std::string& path, const std::string& data_root = "",
                                     std::int64_t num_classes = 7) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open manifest: " + path);
    DatasetManifest m;
    m.root = data_root.empty() ? std::filesystem::path(path).parent_path().string() : data_root;
    m.num_classes = num_classes;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) line.pop_back();
        std::size_t start = 0;
        while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
        line.erase(0, start);
        if (!line.empty()) m.sample_dirs.push_back(line);
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot write manifest: " + path);
    out << "# one sample directory per line\n";
    for (const auto& d : m.sample_dirs) out << d << "\n";
}

// Spatially aligned training example(s): NIR-RGB image in [0,1], multi-hot
// labels, and the validity mask (boundary AND mask).
template <typename T>
struct SegmentationBatch {
    Tensor<T> images; // b,4,h,w
    Tensor<T> labels; // b,C,h,w
    Tensor<T> valid;  // b,1,h,w

    std::int64_t batch() const { return images.shape[0]; }
    std::int64_t height() const { return images.shape[2]; }
    std::int64_t width() const { return images.shape[3]; }
};

namespace detail {

template <typename T>
Tensor<T> load_optional_mask(const std::string& path, const Shape& want) {
    if (!std::filesystem::exists(path)) return Tensor<T>::full(want, T(1));
    auto t = mten::load<T>(path);
    if (t.shape != want) {
        throw data_error("channel size mismatch: " + path + " has " + shape_str(t.shape) + ", expected " +
                         shape_str(want));
    }
    return t;
}

} // namespace detail

// Loads one sample directory as a b=1 batch. Channel order NIR, R, G, B;
// the background channel is forced to 1 exactly where no other label is set.
template <typename T>
SegmentationBatch<T> load_sample(const DatasetManifest& m, std::size_t index) {
    if (index >= m.size()) throw data_error("sample index out of range");
    const std::string dir = m.sample_path(index);
    const std::string image_path = dir + "/image.mten";
    if (!std::filesystem::exists(image_path)) throw data_error("missing image file: " + image_path);
    auto raw = mten::load_raw(image_path);
    auto image = mten::to_tensor<T>(raw);
    if (image.rank() != 3 || image.shape[0] != 4) {
        throw data_error("image must be [4,h,w]: " + image_path + " has " + shape_str(image.shape));
    }
    if (raw.dtype == mten::Dtype::u8) {
        for (auto& v : image.data) v = static_cast<T>(v / T(255));
    }
    for (auto& v : image.data) v = std::min(T(1), std::max(T(0), v));
    const std::int64_t h = image.shape[1], w = image.shape[2];

    const std::string labels_path = dir + "/labels.mten";
    Tensor<T> labels({m.num_classes, h, w});
    if (std::filesystem::exists(labels_path)) {
        labels = mten::load<T>(labels_path);
        if (labels.shape != Shape{m.num_classes, h, w}) {
            throw data_error("labels size mismatch: " + labels_path + " has " + shape_str(labels.shape) +
                             ", expected " + shape_str({m.num_classes, h, w}));
        }
        for (auto& v : labels.data) v = v != T(0) ? T(1) : T(0);
    }

    auto boundary = detail::load_optional_mask<T>(dir + "/boundary.mten", {1, h, w});
    auto mask = detail::load_optional_mask<T>(dir + "/mask.mten", {1, h, w});

    SegmentationBatch<T> out;
    out.images = image.reshaped({1, 4, h, w});
    out.labels = Tensor<T>({1, m.num_classes, h, w});
    const std::int64_t hw = h * w;
    for (std::int64_t i = 0; i < hw; ++i) {
        bool any = false;
        for (std::int64_t c = 1; c < m.num_classes; ++c) {
            const T v = labels.at(c * hw + i);
            out.labels.at(c * hw + i) = v;
            if (v != T(0)) any = true;
        }
        out.labels.at(i) = any ? T(0) : T(1); // background iff nothing else
    }
    out.valid = Tensor<T>({1, 1, h, w});
    for (std::int64_t i = 0; i < hw; ++i) {
        out.valid.at(i) = (boundary.at(i) != T(0) && mask.at(i) != T(0)) ? T(1) : T(0);
    }
    return out;
}

template <typename T>
std::vector<SegmentationBatch<T>> load_all(const DatasetManifest& m) {
    std::vector<SegmentationBatch<T>> out;
    out.reserve(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out.push_back(load_sample<T>(m, i));
    return out;
}

// ---- patch sampling ----------------------------------------------------------

template <typename T>
Tensor<T> flip_spatial(const Tensor<T>& t, bool flip_h, bool flip_v) {
    const Shape& s = t.shape;
    const std::int64_t lead = shape_numel(s) / (s[s.size() - 2] * s[s.size() - 1]);
    const std::int64_t H = s[s.size() - 2], W = s[s.size() - 1];
    Tensor<T> out(s);
    for (std::int64_t l = 0; l < lead; ++l) {
        const T* src = &t.at(l * H * W);
        T* dst = &out.at(l * H * W);
        for (std::int64_t r = 0; r < H; ++r) {
            const std::int64_t sr = flip_v ? H - 1 - r : r;
            for (std::int64_t c = 0; c < W; ++c) {
                const std::int64_t sc = flip_h ? W - 1 - c : c;
                dst[r * W + c] = src[sr * W + sc];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& t, std::int64_t top, std::int64_t left, std::int64_t size) {
    const Shape& s = t.shape;
    const std::int64_t H = s[s.size() - 2], W = s[s.size() - 1];
    if (top < 0 || left < 0 || top + size > H || left + size > W) {
        throw contract_violation("crop outside image: top " + std::to_string(top) + " left " + std::to_string(left) +
                                 " size " + std::to_string(size) + " in " + shape_str(s));
    }
    Shape os = s;
    os[os.size() - 2] = size;
    os[os.size() - 1] = size;
    const std::int64_t lead = shape_numel(s) / (H * W);
    Tensor<T> out(os);
    for (std::int64_t l = 0; l < lead; ++l) {
        const T* src = &t.at(l * H * W);
        T* dst = &out.at(l * size * size);
        for (std::int64_t r = 0; r < size; ++r) {
            std::copy(src + (top + r) * W + left, src + (top + r) * W + left + size, dst + r * size);
        }
    }
    return out;
}

// Draws one augmented patch: uniform origin, then horizontal/vertical flips
// each with probability flip_prob, applied to image, labels, and mask alike.
template <typename T>
SegmentationBatch<T> sample_patch(const SegmentationBatch<T>& sample, std::int64_t patch, double flip_prob,
                                  CounterRng& rng) {
    if (patch > sample.height() || patch > sample.width()) {
        throw contract_violation("patch size " + std::to_string(patch) + " exceeds image " +
                                 shape_str(sample.images.shape));
    }
    const auto top = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(sample.height() - patch + 1)));
    const auto left = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(sample.width() - patch + 1)));
    const bool fh = flip_prob > 0.0 && rng.next_uniform() < flip_prob;
    const bool fv = flip_prob > 0.0 && rng.next_uniform() < flip_prob;
    SegmentationBatch<T> out;
    out.images = flip_spatial(crop_spatial(sample.images, top, left, patch), fh, fv);
    out.labels = flip_spatial(crop_spatial(sample.labels, top, left, patch), fh, fv);
    out.valid = flip_spatial(crop_spatial(sample.valid, top, left, patch), fh, fv);
    return out;
}

template <typename T>
SegmentationBatch<T> concat_batches(const std::vector<SegmentationBatch<T>>& items) {
    if (items.empty()) throw contract_violation("empty batch");
    const auto& first = items[0];
    SegmentationBatch<T> out;
    const auto b = static_cast<std::int64_t>(items.size());
    auto cat = [&](auto member) {
        Shape s = (first.*member).shape;
        s[0] = b;
        Tensor<T> t(s);
        std::int64_t off = 0;
        for (const auto& item : items) {
            const auto& src = item.*member;
            if (src.shape != (first.*member).shape) {
                throw contract_violation("batch item shape mismatch: " + shape_str(src.shape));
            }
            std::copy(src.data.begin(), src.data.end(), t.data.begin() + off);
            off += src.numel();
        }
        return t;
    };
    out.images = cat(&SegmentationBatch<T>::images);
    out.labels = cat(&SegmentationBatch<T>::labels);
    out.valid = cat(&SegmentationBatch<T>::valid);
    return out;
}

// Deterministic epoch permutation: the same (seed, epoch) always yields the
// same order, so training can resume mid-run without replaying the stream.
inline std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::int64_t epoch) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    CounterRng rng = CounterRng(seed).fork(0x45504F43ull ^ static_cast<std::uint64_t>(epoch));
    for (std::size_t i = count; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

// Batch for one training iteration, fully determined by (seed, iteration).
template <typename T>
SegmentationBatch<T> batch_for_iteration(const std::vector<SegmentationBatch<T>>& dataset, std::int64_t iteration,
                                         std::int64_t batch_size, std::int64_t patch, double flip_prob,
                                         std::uint64_t seed) {
    if (dataset.empty()) throw data_error("empty dataset");
    const auto n = dataset.size();
    const std::int64_t per_epoch = static_cast<std::int64_t>((n + static_cast<std::size_t>(batch_size) - 1) /
                                                             static_cast<std::size_t>(batch_size));
    const std::int64_t epoch = iteration / per_epoch;
    const std::int64_t slot = iteration % per_epoch;
    const auto order = epoch_order(n, seed, epoch);
    CounterRng rng = CounterRng(seed).fork(0x49544552ull ^ static_cast<std::uint64_t>(iteration));
    std::vector<SegmentationBatch<T>> items;
    items.reserve(static_cast<std::size_t>(batch_size));
    for (std::int64_t k = 0; k < batch_size; ++k) {
        const auto pos = static_cast<std::size_t>(slot * batch_size + k) % n;
        items.push_back(sample_patch(dataset[order[pos]], patch, flip_prob, rng));
    }
    return concat_batches(items);
}

} // namespace mscg
