// SPDX-License-Identifier: Apache-2.0
//
// Procedural face scenes with exact ground truth. Every scene carries a
// segmentation layout (8 classes) and two scalar attributes (age, beard),
// and the renderer encodes both so that deterministic pixel statistics can
// read them back out: class identity survives nearest-color classification
// by a margin argument, and the attribute encodings invert exactly on clean
// renders. Those read-back functions are the measurement side of every
// downstream quality metric, so their error budgets are worked out in the
// comments below rather than tuned by eye.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace codiff::toy {

// ---------------------------------------------------------------------------
// Classes and palette

enum class FaceClass : uint8_t {
    background = 0,
    skin,
    hair,
    eye_l,
    eye_r,
    brow,
    nose,
    mouth,
};

constexpr int kNumClasses = 8;

inline const char* to_string(FaceClass c) {
    switch (c) {
        case FaceClass::background: return "background";
        case FaceClass::skin: return "skin";
        case FaceClass::hair: return "hair";
        case FaceClass::eye_l: return "eye_l";
        case FaceClass::eye_r: return "eye_r";
        case FaceClass::brow: return "brow";
        case FaceClass::nose: return "nose";
        case FaceClass::mouth: return "mouth";
    }
    return "?";
}

// Base colors, one per class. The layout is chosen for classification
// margin, not looks:
//   - background sits at exact black so an all-black input classifies as
//     background with distance zero;
//   - every non-skin pair is at least 0.28 apart in RGB L2 (worst pair:
//     background/hair), which beats twice the largest displacement a
//     non-skin pixel can suffer (render noise 0.03 plus external noise up
//     to 0.04 per channel -> 0.07 * sqrt(3) ~= 0.121, doubled 0.243);
//   - skin keeps at least 0.78 to every other color (worst: mouth, 0.785),
//     because skin pixels additionally carry the attribute encodings
//     (stripe or stipple, 0.12 per channel), giving a worst case of
//     0.19 * sqrt(3) ~= 0.329 per pixel, doubled 0.658.
// Skin also stays at least 0.15 away from the [0,1] walls per channel so
// the attribute modulation plus noise never clips.
inline const float kPalette[kNumClasses][3] = {
    {0.00f, 0.00f, 0.00f},  // background
    {0.84f, 0.74f, 0.60f},  // skin
    {0.25f, 0.12f, 0.05f},  // hair
    {0.10f, 0.30f, 0.95f},  // eye_l
    {0.10f, 0.85f, 0.25f},  // eye_r
    {0.30f, 0.10f, 0.55f},  // brow
    {0.10f, 0.90f, 0.95f},  // nose
    {0.90f, 0.10f, 0.15f},  // mouth
};

// Texture noise added to every channel, uniform in [-kNoiseAmp, kNoiseAmp].
constexpr float kNoiseAmp = 0.03f;

// Age encoding: rows in the forehead band alternate +/- kStripeAmp * age on
// all channels (even absolute row index up, odd down). The decoder averages
// even and odd band rows separately, so the skin base cancels exactly and
// the halved difference recovers kStripeAmp * age.
constexpr float kStripeAmp = 0.12f;

// Beard encoding: a fraction beard * kStippleMaxFrac of the chin pixels is
// darkened by kStippleDrop on every channel. Detection thresholds at half
// the drop, and noise (0.03) can never cross a 0.06 threshold, so counting
// dark chin pixels recovers the stipple count exactly.
constexpr float kStippleDrop = 0.12f;
constexpr float kStippleMaxFrac = 0.7f;

// Feature band thickness (brows, mouth) and mouth curvature throw, both in
// canvas units so resolutions 16 and 32 rasterize the same geometry.
constexpr double kFeatureTh = 0.0625;
constexpr double kMouthCurveAmp = 0.02;

// ---------------------------------------------------------------------------
// Scene

// All lengths are canvas fractions in [0,1]; vertical feature anchors
// (hair_frac .. mouth_y) are fractions of the face height measured from the
// top of the face ellipse. sample_scene draws every field from a fixed range
// chosen so the invariants below hold for any values in range — validate()
// re-checks them rather than trusting the sampler.
struct ToyFaceScene {
    int resolution = 32;

    double cx = 0.5, cy = 0.515;  // face ellipse center
    double ax = 0.32, ay = 0.435; // face ellipse semi-axes

    double hair_frac = 0.12;      // hairline depth; face top down to here is hair
    double brow_y = 0.31;         // brow band top
    double eye_y = 0.455;         // eye center height
    double eye_dx = 0.125;        // eye center offset from cx
    double eye_r = 0.055;         // eye radius (canvas units)
    double nose_y = 0.575;        // nose center height
    double nose_r = 0.05;         // nose radius (canvas units)
    double mouth_y = 0.775;       // mouth baseline height
    double mouth_w = 0.12;        // mouth half-width (canvas units)
    double mouth_curve = 0.0;     // [-1,1]; bends the mouth ends down/up

    double age = 0.5;             // [0,1]
    double beard = 0.5;           // [0,1]

    uint64_t noise_key = 0;       // seeds texture noise and stipple placement

    // Throws std::runtime_error naming the first violated constraint.
    void validate() const {
        auto fail = [](const std::string& why) {
            throw std::runtime_error("scene: " + why);
        };
        if (resolution != 16 && resolution != 32) fail("resolution must be 16 or 32");
        for (double v : {cx, cy, ax, ay, hair_frac, brow_y, eye_y, eye_dx, eye_r,
                         nose_y, nose_r, mouth_y, mouth_w, mouth_curve, age, beard})
            if (!std::isfinite(v)) fail("non-finite field");
        if (age < 0.0 || age > 1.0 || beard < 0.0 || beard > 1.0)
            fail("attributes must lie in [0,1]");
        if (cx - ax <= 0.0 || cx + ax >= 1.0 || cy - ay <= 0.0 || cy + ay >= 1.0)
            fail("face ellipse must lie inside the canvas");
        const double px = 1.0 / resolution;
        const double fh = 2.0 * ay;
        if (!(0.0 < hair_frac && hair_frac < brow_y && brow_y < eye_y &&
              eye_y < nose_y && nose_y < mouth_y && mouth_y < 1.0))
            fail("vertical feature order violated");
        // The forehead band needs at least two pixel rows (one of each
        // parity) or the stripe decoder has nothing to difference.
        if ((brow_y - hair_frac) * fh < 2.0 * px)
            fail("forehead band thinner than two pixel rows");
        if (2.0 * (eye_dx - eye_r) < px) fail("eyes overlap or touch");
        if (eye_dx + eye_r >= 0.9 * ax) fail("eyes poke out of the face");
        if (eye_dx - eye_r < nose_r) fail("eye and nose columns overlap");
        if ((mouth_y - nose_y) * fh - kMouthCurveAmp - nose_r < px)
            fail("mouth not clearly below the nose");
        if ((1.0 - mouth_y) * fh - kMouthCurveAmp - kFeatureTh < px)
            fail("no chin rows below the mouth");
        if (mouth_w >= 0.7 * ax) fail("mouth wider than the face");
    }
};

// Draws each field uniformly from its fixed range. The draw order is part of
// the replay contract: reordering fields changes every seeded scene.
inline ToyFaceScene sample_scene(RngStream& rng, int resolution) {
    if (resolution != 16 && resolution != 32)
        throw std::invalid_argument("sample_scene: resolution must be 16 or 32");
    auto in = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
    ToyFaceScene s;
    s.resolution = resolution;
    s.cx = in(0.47, 0.53);
    s.cy = in(0.50, 0.53);
    s.ax = in(0.30, 0.34);
    s.ay = in(0.42, 0.45);
    s.hair_frac = in(0.10, 0.145);
    s.brow_y = in(0.30, 0.32);
    s.eye_y = in(0.44, 0.47);
    s.eye_dx = in(0.115, 0.135);
    s.eye_r = in(0.05, 0.06);
    s.nose_y = in(0.56, 0.59);
    s.nose_r = in(0.045, 0.055);
    s.mouth_y = in(0.76, 0.79);
    s.mouth_w = in(0.10, 0.14);
    s.mouth_curve = in(-1.0, 1.0);
    s.age = rng.uniform();
    s.beard = rng.uniform();
    s.noise_key = rng.next_u64();
    return s;
}

// ---------------------------------------------------------------------------
// Conditions

struct MaskCondition {
    int h = 0, w = 0;
    std::vector<uint8_t> classes;  // row-major, values in 0..kNumClasses-1

    MaskCondition() = default;
    MaskCondition(int h_, int w_) : h(h_), w(w_), classes(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return classes[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return classes[static_cast<size_t>(y) * w + x]; }

    bool is(int y, int x, FaceClass c) const { return at(y, x) == static_cast<uint8_t>(c); }

    int count(FaceClass c) const {
        int n = 0;
        for (uint8_t v : classes) n += (v == static_cast<uint8_t>(c));
        return n;
    }

    // Lowest/highest row containing the class, or -1 if absent.
    int min_row(FaceClass c) const {
        for (int y = 0; y < h; y++)
            for (int x = 0; x < w; x++)
                if (is(y, x, c)) return y;
        return -1;
    }
    int max_row(FaceClass c) const {
        for (int y = h - 1; y >= 0; y--)
            for (int x = 0; x < w; x++)
                if (is(y, x, c)) return y;
        return -1;
    }
};

struct AttributeCondition {
    float age = 0.0f;
    float beard = 0.0f;
    // An attribute is unmeasurable when the regions its decoder needs are
    // missing (no band rows, no chin pixels). Metrics skip such entries.
    bool age_measurable = true;
    bool beard_measurable = true;
};

// ---------------------------------------------------------------------------
// Rendering

struct RenderResult {
    Tensor image;        // [H,W,3], values in [0,1]
    MaskCondition mask;  // ground-truth classes
};

namespace detail {

// Stable per-pixel rank used to pick stipple pixels. Mixing the flat index
// into the scene's noise key makes the pattern a pure function of the scene
// while keeping neighboring pixels uncorrelated.
inline uint64_t stipple_rank(uint64_t key, int flat_idx) {
    return codiff::detail::mix64(key ^ (0x9E3779B97F4A7C15ULL *
                                        (static_cast<uint64_t>(flat_idx) + 1)));
}

}  // namespace detail

inline RenderResult render(const ToyFaceScene& s) {
    s.validate();
    const int R = s.resolution;
    const double fh = 2.0 * s.ay;
    const double y0 = s.cy - s.ay;
    const double y_hair = y0 + s.hair_frac * fh;
    const double y_brow = y0 + s.brow_y * fh;
    const double y_eye = y0 + s.eye_y * fh;
    const double y_nose = y0 + s.nose_y * fh;
    const double y_mouth = y0 + s.mouth_y * fh;

    MaskCondition mask(R, R);
    auto set = [&](int y, int x, FaceClass c) { mask.at(y, x) = static_cast<uint8_t>(c); };
    auto inside_face = [&](double px, double py) {
        double dx = (px - s.cx) / s.ax, dy = (py - s.cy) / s.ay;
        return dx * dx + dy * dy <= 1.0;
    };
    auto in_disk = [](double px, double py, double cx, double cy, double r) {
        double dx = px - cx, dy = py - cy;
        return dx * dx + dy * dy <= r * r;
    };

    // Features paint only over skin, in a fixed order, so classes stay
    // mutually exclusive even where shapes graze each other.
    for (int y = 0; y < R; y++) {
        for (int x = 0; x < R; x++) {
            const double px = (x + 0.5) / R, py = (y + 0.5) / R;
            if (!inside_face(px, py)) continue;  // stays background
            if (py < y_hair) {
                set(y, x, FaceClass::hair);
                continue;
            }
            set(y, x, FaceClass::skin);
            if (py >= y_brow && py < y_brow + kFeatureTh &&
                std::abs(std::abs(px - s.cx) - s.eye_dx) <= s.eye_r + 0.01) {
                set(y, x, FaceClass::brow);
                continue;
            }
            if (in_disk(px, py, s.cx - s.eye_dx, y_eye, s.eye_r)) {
                set(y, x, FaceClass::eye_l);
                continue;
            }
            if (in_disk(px, py, s.cx + s.eye_dx, y_eye, s.eye_r)) {
                set(y, x, FaceClass::eye_r);
                continue;
            }
            if (in_disk(px, py, s.cx, y_nose, s.nose_r)) {
                set(y, x, FaceClass::nose);
                continue;
            }
            const double u = px - s.cx;
            if (std::abs(u) <= s.mouth_w) {
                double bend = s.mouth_curve * kMouthCurveAmp * (u / s.mouth_w) * (u / s.mouth_w);
                double top = y_mouth + bend;
                if (py >= top && py < top + kFeatureTh) set(y, x, FaceClass::mouth);
            }
        }
    }

    // Region rows are derived from the finished mask, not from the scene, so
    // the decoder (which only sees image + mask) can reconstruct the exact
    // same pixel sets.
    const int hair_bottom = mask.max_row(FaceClass::hair);
    const int brow_top = mask.min_row(FaceClass::brow);
    const int mouth_bottom = mask.max_row(FaceClass::mouth);

    Tensor img = Tensor::zeros({R, R, 3});
    for (int y = 0; y < R; y++)
        for (int x = 0; x < R; x++) {
            const float* base = kPalette[mask.at(y, x)];
            for (int c = 0; c < 3; c++) img.at((static_cast<size_t>(y) * R + x) * 3 + c) = base[c];
        }

    // Age stripes on forehead skin rows between hair and brows.
    for (int y = hair_bottom + 1; y < brow_top; y++) {
        const float d = (y % 2 == 0 ? 1.0f : -1.0f) * kStripeAmp * static_cast<float>(s.age);
        for (int x = 0; x < R; x++)
            if (mask.is(y, x, FaceClass::skin))
                for (int c = 0; c < 3; c++) img.at((static_cast<size_t>(y) * R + x) * 3 + c) += d;
    }

    // Beard stipple on chin skin rows below the mouth: rank all chin pixels
    // by a scene-keyed hash and darken the first round(beard * max_frac * n).
    std::vector<std::pair<uint64_t, int>> chin;
    for (int y = mouth_bottom + 1; y < R; y++)
        for (int x = 0; x < R; x++)
            if (mask.is(y, x, FaceClass::skin)) {
                int idx = y * R + x;
                chin.emplace_back(detail::stipple_rank(s.noise_key, idx), idx);
            }
    std::sort(chin.begin(), chin.end());
    const int k = static_cast<int>(
        std::lround(s.beard * kStippleMaxFrac * static_cast<double>(chin.size())));
    for (int i = 0; i < k; i++) {
        int idx = chin[static_cast<size_t>(i)].second;
        for (int c = 0; c < 3; c++)
            img.at(static_cast<size_t>(idx) * 3 + c) -= kStippleDrop;
    }

    // Texture noise everywhere, then clamp. Only background can actually
    // clip (black is a palette wall); skin was placed so encodings never do.
    RngStream noise(s.noise_key);
    for (size_t i = 0; i < img.numel(); i++) {
        float n = kNoiseAmp * (2.0f * static_cast<float>(noise.uniform()) - 1.0f);
        img.at(i) = std::clamp(img.at(i) + n, 0.0f, 1.0f);
    }

    return {std::move(img), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Read-back oracles

// Nearest palette color per pixel (RGB L2, ties to the lowest class id).
inline MaskCondition parse_mask(const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw std::invalid_argument("parse_mask: expected [H,W,3], got " + shape_str(image.shape));
    const int h = image.dim(0), w = image.dim(1);
    MaskCondition mask(h, w);
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            const size_t base = (static_cast<size_t>(y) * w + x) * 3;
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < kNumClasses; c++) {
                double d = 0.0;
                for (int k = 0; k < 3; k++) {
                    double diff = static_cast<double>(image.at(base + k)) - kPalette[c][k];
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            mask.at(y, x) = static_cast<uint8_t>(best);
        }
    return mask;
}

// Renders a mask back to flat palette colors (no noise, no attributes).
inline Tensor class_colors(const MaskCondition& mask) {
    Tensor img = Tensor::zeros({mask.h, mask.w, 3});
    for (size_t i = 0; i < mask.classes.size(); i++)
        for (int c = 0; c < 3; c++) img.at(i * 3 + c) = kPalette[mask.classes[i]][c];
    return img;
}

// Inverts the attribute encodings using regions taken from the mask. On a
// clean render with its ground-truth (or parsed) mask this recovers age up
// to averaged noise and beard up to stipple-count rounding; on arbitrary
// input it returns clamped values or flags the attribute unmeasurable.
inline AttributeCondition extract_attributes(const Tensor& image, const MaskCondition& mask) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw std::invalid_argument("extract_attributes: expected [H,W,3], got " +
                                    shape_str(image.shape));
    if (image.dim(0) != mask.h || image.dim(1) != mask.w)
        throw std::invalid_argument("extract_attributes: image/mask size mismatch");

    AttributeCondition out;
    auto mean3 = [&](int y, int x) {
        const size_t base = (static_cast<size_t>(y) * mask.w + x) * 3;
        return (static_cast<double>(image.at(base)) + image.at(base + 1) + image.at(base + 2)) /
               3.0;
    };

    // Age: halved difference of even-row and odd-row band means.
    const int hair_bottom = mask.max_row(FaceClass::hair);
    const int brow_top = mask.min_row(FaceClass::brow);
    double sum_even = 0.0, sum_odd = 0.0;
    int n_even = 0, n_odd = 0;
    if (hair_bottom >= 0 && brow_top >= 0) {
        for (int y = hair_bottom + 1; y < brow_top; y++)
            for (int x = 0; x < mask.w; x++)
                if (mask.is(y, x, FaceClass::skin)) {
                    if (y % 2 == 0) {
                        sum_even += mean3(y, x);
                        n_even++;
                    } else {
                        sum_odd += mean3(y, x);
                        n_odd++;
                    }
                }
    }
    if (n_even > 0 && n_odd > 0) {
        double contrast = 0.5 * (sum_even / n_even - sum_odd / n_odd);
        double age = contrast / kStripeAmp;
        if (std::isfinite(age)) {
            out.age = static_cast<float>(std::clamp(age, 0.0, 1.0));
        } else {
            out.age_measurable = false;
        }
    } else {
        out.age_measurable = false;
    }

    // Beard: fraction of chin pixels darker than half the stipple drop.
    const int mouth_bottom = mask.max_row(FaceClass::mouth);
    int n_chin = 0, n_dark = 0;
    if (mouth_bottom >= 0) {
        const double skin_mean =
            (kPalette[1][0] + kPalette[1][1] + kPalette[1][2]) / 3.0;
        const double thresh = skin_mean - 0.5 * kStippleDrop;
        for (int y = mouth_bottom + 1; y < mask.h; y++)
            for (int x = 0; x < mask.w; x++)
                if (mask.is(y, x, FaceClass::skin)) {
                    n_chin++;
                    double v = mean3(y, x);
                    if (std::isfinite(v) && v < thresh) n_dark++;
                }
    }
    if (n_chin > 0) {
        double beard = static_cast<double>(n_dark) / (kStippleMaxFrac * n_chin);
        out.beard = static_cast<float>(std::clamp(beard, 0.0, 1.0));
    } else {
        out.beard_measurable = false;
    }

    return out;
}

// ---------------------------------------------------------------------------
// Mask transforms shared by encoders and exporters

// One-hot class planes, [K,H,W].
inline Tensor mask_onehot(const MaskCondition& mask) {
    Tensor t = Tensor::zeros({kNumClasses, mask.h, mask.w});
    for (size_t i = 0; i < mask.classes.size(); i++)
        t.at(static_cast<size_t>(mask.classes[i]) * mask.classes.size() + i) = 1.0f;
    return t;
}

// Class ids as evenly spaced gray levels, [H,W] in [0,1]; pairs with the
// PGM writer for mask export.
inline Tensor mask_to_gray(const MaskCondition& mask) {
    Tensor t = Tensor::zeros({mask.h, mask.w});
    for (size_t i = 0; i < mask.classes.size(); i++)
        t.at(i) = static_cast<float>(mask.classes[i]) / (kNumClasses - 1);
    return t;
}

// Pixel accuracy between two masks of equal size.
inline double mask_accuracy(const MaskCondition& a, const MaskCondition& b) {
    if (a.h != b.h || a.w != b.w)
        throw std::invalid_argument("mask_accuracy: size mismatch");
    if (a.classes.empty()) throw std::invalid_argument("mask_accuracy: empty mask");
    size_t same = 0;
    for (size_t i = 0; i < a.classes.size(); i++) same += (a.classes[i] == b.classes[i]);
    return static_cast<double>(same) / static_cast<double>(a.classes.size());
}

}  // namespace codiff::toy
