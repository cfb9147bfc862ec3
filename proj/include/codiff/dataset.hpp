// SPDX-License-Identifier: Apache-2.0
//
// Face dataset archives: n rendered scenes with ground-truth masks and
// attributes plus a deterministic train/val split, stored as one .nta file.
// Generation is keyed entirely by (n, resolution, seed) — scene i draws from
// substream i of the given stream — so rebuilding with the same inputs
// produces byte-identical archives.

#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ntar.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "toyface.hpp"

namespace codiff::toy {

// 90/10 split, val rounded down; the val block is the tail of the archive.
inline std::pair<int, int> split_sizes(int n) {
    int val = n / 10;
    return {n - val, val};
}

struct FaceDataset {
    int count = 0;
    int resolution = 0;
    Tensor images;               // [n,H,W,3]
    std::vector<uint8_t> masks;  // n*H*W class ids
    Tensor attrs;                // [n,2] = (age, beard)
    std::vector<uint8_t> split;  // n entries, 0 = train, 1 = val

    Tensor image(int i) const {
        check(i);
        const int R = resolution;
        Tensor t = Tensor::zeros({R, R, 3});
        const size_t stride = static_cast<size_t>(R) * R * 3;
        for (size_t j = 0; j < stride; j++) t.at(j) = images.at(stride * i + j);
        return t;
    }

    MaskCondition mask(int i) const {
        check(i);
        MaskCondition m(resolution, resolution);
        const size_t stride = static_cast<size_t>(resolution) * resolution;
        for (size_t j = 0; j < stride; j++) m.classes[j] = masks[stride * i + j];
        return m;
    }

    AttributeCondition attr(int i) const {
        check(i);
        AttributeCondition a;
        a.age = attrs.at(static_cast<size_t>(i) * 2);
        a.beard = attrs.at(static_cast<size_t>(i) * 2 + 1);
        return a;
    }

    std::vector<int> train_indices() const { return where(0); }
    std::vector<int> val_indices() const { return where(1); }

    // Content hash over every payload (images, masks, attrs, split), used to
    // stamp checkpoints with the exact data they were trained on.
    std::string fingerprint() const {
        uint64_t h = 0xCBF29CE484222325ULL;
        auto eat = [&h](const uint8_t* p, size_t n) {
            for (size_t i = 0; i < n; i++) {
                h ^= p[i];
                h *= 0x100000001B3ULL;
            }
        };
        auto eat_f32 = [&](const Tensor& t) {
            for (size_t i = 0; i < t.numel(); i++) {
                float v = t.at(i);
                uint8_t b[4];
                std::memcpy(b, &v, 4);
                eat(b, 4);
            }
        };
        eat_f32(images);
        eat(masks.data(), masks.size());
        eat_f32(attrs);
        eat(split.data(), split.size());
        return io::hex64(h);
    }

private:
    void check(int i) const {
        if (i < 0 || i >= count)
            throw std::out_of_range("dataset: index " + std::to_string(i) + " of " +
                                    std::to_string(count));
    }
    std::vector<int> where(uint8_t flag) const {
        std::vector<int> out;
        for (int i = 0; i < count; i++)
            if (split[static_cast<size_t>(i)] == flag) out.push_back(i);
        return out;
    }
};

inline void build_dataset(int n, int resolution, RngStream& rng, const std::string& out_path) {
    if (n < 1) throw std::invalid_argument("build_dataset: need n >= 1");
    if (resolution != 16 && resolution != 32)
        throw std::invalid_argument("build_dataset: resolution must be 16 or 32");

    const int R = resolution;
    const size_t img_stride = static_cast<size_t>(R) * R * 3;
    const size_t mask_stride = static_cast<size_t>(R) * R;
    std::vector<float> images(static_cast<size_t>(n) * img_stride);
    std::vector<uint8_t> masks(static_cast<size_t>(n) * mask_stride);
    std::vector<float> attrs(static_cast<size_t>(n) * 2);

    for (int i = 0; i < n; i++) {
        RngStream sub = rng.substream(static_cast<uint64_t>(i));
        ToyFaceScene scene = sample_scene(sub, R);
        RenderResult r = render(scene);
        for (size_t j = 0; j < img_stride; j++)
            images[img_stride * i + j] = r.image.at(j);
        for (size_t j = 0; j < mask_stride; j++)
            masks[mask_stride * i + j] = r.mask.classes[j];
        attrs[static_cast<size_t>(i) * 2] = static_cast<float>(scene.age);
        attrs[static_cast<size_t>(i) * 2 + 1] = static_cast<float>(scene.beard);
    }

    auto [n_train, n_val] = split_sizes(n);
    std::vector<uint8_t> split(static_cast<size_t>(n), 0);
    for (int i = n_train; i < n; i++) split[static_cast<size_t>(i)] = 1;

    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t ur = static_cast<uint64_t>(R);
    io::NamedTensorArchive a;
    a.add_f32("images", {un, ur, ur, 3}, images.data(), images.size());
    a.add_u8("masks", {un, ur, ur}, masks);
    a.add_f32("attrs", {un, 2}, attrs.data(), attrs.size());
    a.add_u8("split", {un}, split);
    a.set_meta("kind", "face-dataset");
    a.set_meta("count", std::to_string(n));
    a.set_meta("resolution", std::to_string(R));
    a.set_meta("seed", io::hex64(rng.seed));
    a.set_meta("train", std::to_string(n_train));
    a.set_meta("val", std::to_string(n_val));
    a.save(out_path);
}

inline FaceDataset load_dataset(const std::string& path) {
    io::NamedTensorArchive a = io::NamedTensorArchive::load(path);
    if (a.meta("kind") != "face-dataset")
        throw std::runtime_error("dataset: '" + path + "' is not a face dataset archive");

    FaceDataset d;
    d.images = a.tensor("images");
    d.masks = a.bytes("masks");
    d.attrs = a.tensor("attrs");
    d.split = a.bytes("split");

    if (d.images.rank() != 4 || d.images.dim(3) != 3 || d.images.dim(1) != d.images.dim(2))
        throw std::runtime_error("dataset: images entry has shape " + shape_str(d.images.shape));
    d.count = d.images.dim(0);
    d.resolution = d.images.dim(1);
    if (d.resolution != 16 && d.resolution != 32)
        throw std::runtime_error("dataset: unsupported resolution " +
                                 std::to_string(d.resolution));
    const size_t expect_mask = static_cast<size_t>(d.count) * d.resolution * d.resolution;
    if (d.masks.size() != expect_mask)
        throw std::runtime_error("dataset: masks entry size mismatch");
    for (uint8_t c : d.masks)
        if (c >= kNumClasses) throw std::runtime_error("dataset: mask class id out of range");
    if (d.attrs.rank() != 2 || d.attrs.dim(0) != d.count || d.attrs.dim(1) != 2)
        throw std::runtime_error("dataset: attrs entry has shape " + shape_str(d.attrs.shape));
    if (d.split.size() != static_cast<size_t>(d.count))
        throw std::runtime_error("dataset: split entry size mismatch");
    for (uint8_t f : d.split)
        if (f > 1) throw std::runtime_error("dataset: split flag out of range");
    return d;
}

}  // namespace codiff::toy
