// SPDX-License-Identifier: Apache-2.0
// Face scenes and their read-back oracles. The tests pin the palette margin
// arithmetic (which is what makes nearest-color parsing exact), the
// attribute encode/decode round trip, and byte-level determinism of dataset
// archives — everything downstream metrics lean on.

#include <catch2/catch_amalgamated.hpp>
#include <codiff/dataset.hpp>
#include <codiff/image_io.hpp>
#include <codiff/toyface.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <vector>

using namespace codiff;
using namespace codiff::toy;

namespace {

double l2(const float* a, const float* b) {
    double s = 0.0;
    for (int k = 0; k < 3; k++) {
        double d = static_cast<double>(a[k]) - b[k];
        s += d * d;
    }
    return std::sqrt(s);
}

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    REQUIRE(f.good());
    std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), n);
    REQUIRE(f.good());
    return buf;
}

}  // namespace

TEST_CASE("palette margins cover every worst-case pixel displacement") {
    // A pixel can drift from its class color by render noise (0.03/channel),
    // plus up to 0.04/channel of external noise in the degraded-parse
    // contract; skin pixels additionally carry stripe or stipple modulation
    // (0.12/channel). Nearest-color classification is exact as long as each
    // class keeps more than twice its displacement bound to every other
    // prototype.
    const double sq3 = std::sqrt(3.0);
    const double skin_disp = (kStripeAmp + kNoiseAmp + 0.04) * sq3;
    const double other_disp = (kNoiseAmp + 0.04) * sq3;

    double min_skin = 1e9, min_other = 1e9;
    for (int a = 0; a < kNumClasses; a++)
        for (int b = a + 1; b < kNumClasses; b++) {
            double d = l2(kPalette[a], kPalette[b]);
            if (a == 1 || b == 1)
                min_skin = std::min(min_skin, d);
            else
                min_other = std::min(min_other, d);
        }

    CHECK(min_skin > 2.0 * skin_disp);    // 0.785 vs 0.658
    CHECK(min_other > 2.0 * other_disp);  // 0.282 vs 0.243
    CHECK(kStippleDrop <= kStripeAmp);    // stipple reuses the skin budget

    // Stipple detection thresholds at half the drop; render noise on a
    // 3-channel mean can never reach it.
    CHECK(kNoiseAmp < 0.5f * kStippleDrop);

    // Skin plus modulation plus noise must stay strictly inside [0,1] so
    // clamping never distorts the encodings.
    for (int k = 0; k < 3; k++) {
        CHECK(kPalette[1][k] + kStripeAmp + kNoiseAmp < 1.0f);
        CHECK(kPalette[1][k] - kStripeAmp - kNoiseAmp > 0.0f);
    }
}

TEST_CASE("class ids and names are frozen") {
    CHECK(kNumClasses == 8);
    CHECK(static_cast<int>(FaceClass::background) == 0);
    CHECK(static_cast<int>(FaceClass::skin) == 1);
    CHECK(static_cast<int>(FaceClass::mouth) == 7);
    CHECK(std::string(to_string(FaceClass::nose)) == "nose");
    // Background is exact black: an all-black input must land there.
    CHECK(kPalette[0][0] == 0.0f);
    CHECK(kPalette[0][1] == 0.0f);
    CHECK(kPalette[0][2] == 0.0f);
}

TEST_CASE("scene sampling is deterministic and respects the ranges") {
    RngStream a(42), b(42);
    ToyFaceScene s1 = sample_scene(a, 32);
    ToyFaceScene s2 = sample_scene(b, 32);
    CHECK(s1.cx == s2.cx);
    CHECK(s1.ay == s2.ay);
    CHECK(s1.age == s2.age);
    CHECK(s1.beard == s2.beard);
    CHECK(s1.noise_key == s2.noise_key);

    // A second draw from the same stream gives a different scene.
    ToyFaceScene s3 = sample_scene(a, 32);
    CHECK(s3.noise_key != s1.noise_key);

    CHECK_THROWS_AS(sample_scene(a, 17), std::invalid_argument);
    CHECK_THROWS_AS(sample_scene(a, 0), std::invalid_argument);
}

TEST_CASE("1000 sampled scenes are valid and cover the attribute range") {
    RngStream rng(7);
    double age_sum = 0.0;
    int young = 0, old = 0;
    for (int i = 0; i < 1000; i++) {
        RngStream sub = rng.substream(static_cast<uint64_t>(i));
        ToyFaceScene s = sample_scene(sub, i % 2 ? 16 : 32);
        REQUIRE_NOTHROW(s.validate());
        age_sum += s.age;
        young += s.age < 0.1;
        old += s.age > 0.9;
    }
    // Uniform sampling: mean 0.5 (s.e. ~0.009), each decile ~100 +- 3*9.5.
    CHECK(age_sum / 1000.0 > 0.45);
    CHECK(age_sum / 1000.0 < 0.55);
    CHECK(young > 60);
    CHECK(old > 60);
}

TEST_CASE("scene validation rejects broken geometry") {
    RngStream rng(3);
    ToyFaceScene s = sample_scene(rng, 32);
    REQUIRE_NOTHROW(s.validate());

    ToyFaceScene t = s;
    t.age = 1.5;
    CHECK_THROWS_AS(t.validate(), std::runtime_error);
    t = s;
    t.eye_r = 0.2;
    CHECK_THROWS_AS(t.validate(), std::runtime_error);
    t = s;
    t.mouth_y = 0.99;  // no chin left
    CHECK_THROWS_AS(t.validate(), std::runtime_error);
    t = s;
    t.ax = 0.6;  // ellipse pokes out of the canvas
    CHECK_THROWS_AS(t.validate(), std::runtime_error);
    t = s;
    t.nose_y = t.mouth_y + 0.01;  // ordering violated
    CHECK_THROWS_AS(t.validate(), std::runtime_error);
    t = s;
    t.resolution = 24;
    CHECK_THROWS_AS(t.validate(), std::runtime_error);
}

TEST_CASE("every rendered scene contains all eight classes, cleanly ordered") {
    RngStream rng(11);
    for (int i = 0; i < 100; i++) {
        RngStream sub = rng.substream(static_cast<uint64_t>(i));
        ToyFaceScene s = sample_scene(sub, i % 2 ? 16 : 32);
        RenderResult r = render(s);
        for (int c = 0; c < kNumClasses; c++)
            REQUIRE(r.mask.count(static_cast<FaceClass>(c)) > 0);
        // Mouth strictly below nose, nose below brows, brows below hair.
        REQUIRE(r.mask.min_row(FaceClass::mouth) > r.mask.max_row(FaceClass::nose));
        REQUIRE(r.mask.min_row(FaceClass::brow) > r.mask.max_row(FaceClass::hair));
        // The forehead band needs both row parities for the stripe decoder.
        int band_lo = r.mask.max_row(FaceClass::hair) + 1;
        int band_hi = r.mask.min_row(FaceClass::brow);
        REQUIRE(band_hi - band_lo >= 2);
        // Eyes are disjoint: no row has touching eye_l and eye_r pixels.
        int n_eye_l = r.mask.count(FaceClass::eye_l);
        int n_eye_r = r.mask.count(FaceClass::eye_r);
        REQUIRE(n_eye_l > 0);
        REQUIRE(n_eye_r > 0);
    }
}

TEST_CASE("rendering is a pure function of the scene") {
    RngStream rng(19);
    ToyFaceScene s = sample_scene(rng, 32);
    RenderResult a = render(s);
    RenderResult b = render(s);
    REQUIRE(a.image.numel() == b.image.numel());
    for (size_t i = 0; i < a.image.numel(); i++) REQUIRE(a.image.at(i) == b.image.at(i));
    REQUIRE(a.mask.classes == b.mask.classes);

    // The noise key moves texture but never class geometry.
    ToyFaceScene s2 = s;
    s2.noise_key ^= 0x1234;
    RenderResult c = render(s2);
    CHECK(c.mask.classes == a.mask.classes);
    size_t differing = 0;
    for (size_t i = 0; i < a.image.numel(); i++) differing += (c.image.at(i) != a.image.at(i));
    CHECK(differing > a.image.numel() / 2);
}

TEST_CASE("age zero renders a flat forehead and reads back as zero") {
    RngStream rng(23);
    ToyFaceScene s = sample_scene(rng, 32);
    s.age = 0.0;
    RenderResult r = render(s);

    int band_lo = r.mask.max_row(FaceClass::hair) + 1;
    int band_hi = r.mask.min_row(FaceClass::brow);
    for (int y = band_lo; y < band_hi; y++)
        for (int x = 0; x < 32; x++)
            if (r.mask.is(y, x, FaceClass::skin))
                for (int c = 0; c < 3; c++) {
                    float v = r.image.at((static_cast<size_t>(y) * 32 + x) * 3 + c);
                    REQUIRE(std::abs(v - kPalette[1][c]) <= kNoiseAmp + 1e-6f);
                }

    AttributeCondition got = extract_attributes(r.image, r.mask);
    REQUIRE(got.age_measurable);
    CHECK(got.age <= 0.05f);
}

TEST_CASE("beard zero leaves the chin entirely unstippled") {
    RngStream rng(29);
    ToyFaceScene s = sample_scene(rng, 32);
    s.beard = 0.0;
    RenderResult r = render(s);

    const double skin_mean = (kPalette[1][0] + kPalette[1][1] + kPalette[1][2]) / 3.0;
    int mouth_bottom = r.mask.max_row(FaceClass::mouth);
    for (int y = mouth_bottom + 1; y < 32; y++)
        for (int x = 0; x < 32; x++)
            if (r.mask.is(y, x, FaceClass::skin)) {
                const size_t base = (static_cast<size_t>(y) * 32 + x) * 3;
                double m = (r.image.at(base) + r.image.at(base + 1) + r.image.at(base + 2)) / 3.0;
                REQUIRE(m >= skin_mean - kNoiseAmp - 1e-6);
            }

    AttributeCondition got = extract_attributes(r.image, r.mask);
    REQUIRE(got.beard_measurable);
    CHECK(got.beard == 0.0f);
}

TEST_CASE("parse_mask recovers exact classes from flat palette colors") {
    RngStream rng(31);
    ToyFaceScene s = sample_scene(rng, 32);
    RenderResult r = render(s);
    MaskCondition parsed = parse_mask(class_colors(r.mask));
    CHECK(parsed.classes == r.mask.classes);

    // All-black input: everything is background (distance exactly zero).
    MaskCondition black = parse_mask(Tensor::zeros({8, 8, 3}));
    for (uint8_t c : black.classes) REQUIRE(c == 0);

    CHECK_THROWS_AS(parse_mask(Tensor::zeros({8, 8})), std::invalid_argument);
    CHECK_THROWS_AS(parse_mask(Tensor::zeros({8, 8, 4})), std::invalid_argument);
}

TEST_CASE("clean renders parse perfectly; 0.04 extra noise stays above 0.99") {
    RngStream rng(37);
    RngStream extra(101);
    size_t clean_same = 0, noisy_same = 0, total = 0;
    for (int i = 0; i < 100; i++) {
        RngStream sub = rng.substream(static_cast<uint64_t>(i));
        ToyFaceScene s = sample_scene(sub, 32);
        RenderResult r = render(s);

        MaskCondition parsed = parse_mask(r.image);
        Tensor noisy = r.image.clone();
        for (size_t j = 0; j < noisy.numel(); j++)
            noisy.at(j) += 0.04f * (2.0f * static_cast<float>(extra.uniform()) - 1.0f);
        MaskCondition parsed_noisy = parse_mask(noisy);

        for (size_t j = 0; j < r.mask.classes.size(); j++) {
            clean_same += (parsed.classes[j] == r.mask.classes[j]);
            noisy_same += (parsed_noisy.classes[j] == r.mask.classes[j]);
            total++;
        }
    }
    // The margin argument makes the clean parse exact, not merely accurate.
    CHECK(clean_same == total);
    CHECK(static_cast<double>(noisy_same) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("attributes round-trip within 0.05 on clean 32x32 renders") {
    // Error budget: age decoding averages noise over the band (worst-case
    // s.e. well under 0.01 after the 1/(2*0.12) gain), beard decoding is
    // exact up to stipple-count rounding (< 0.03 for 32x32 chins).
    RngStream rng(41);
    {
        RngStream sub = rng.substream(9999);
        ToyFaceScene s = sample_scene(sub, 32);
        s.age = 0.8;
        s.beard = 0.3;
        RenderResult r = render(s);
        AttributeCondition got = extract_attributes(r.image, r.mask);
        REQUIRE(got.age_measurable);
        REQUIRE(got.beard_measurable);
        CHECK(std::abs(got.age - 0.8f) <= 0.05f);
        CHECK(std::abs(got.beard - 0.3f) <= 0.05f);
    }
    double worst_age = 0.0, worst_beard = 0.0;
    for (int i = 0; i < 100; i++) {
        RngStream sub = rng.substream(static_cast<uint64_t>(i));
        ToyFaceScene s = sample_scene(sub, 32);
        RenderResult r = render(s);
        // Use the parsed mask, exactly as downstream metrics must.
        MaskCondition parsed = parse_mask(r.image);
        AttributeCondition got = extract_attributes(r.image, parsed);
        REQUIRE(got.age_measurable);
        REQUIRE(got.beard_measurable);
        worst_age = std::max(worst_age, std::abs(static_cast<double>(got.age) - s.age));
        worst_beard = std::max(worst_beard, std::abs(static_cast<double>(got.beard) - s.beard));
    }
    CHECK(worst_age <= 0.05);
    CHECK(worst_beard <= 0.05);
}

TEST_CASE("16x16 renders keep the parse exact and attributes close") {
    // At 16x16 the band and chin hold a handful of pixels, so decode noise
    // and stipple rounding are coarser; the class margin is resolution-free.
    RngStream rng(43);
    double worst_age = 0.0, worst_beard = 0.0;
    for (int i = 0; i < 50; i++) {
        RngStream sub = rng.substream(static_cast<uint64_t>(i));
        ToyFaceScene s = sample_scene(sub, 16);
        RenderResult r = render(s);
        MaskCondition parsed = parse_mask(r.image);
        REQUIRE(parsed.classes == r.mask.classes);
        AttributeCondition got = extract_attributes(r.image, parsed);
        REQUIRE(got.age_measurable);
        REQUIRE(got.beard_measurable);
        worst_age = std::max(worst_age, std::abs(static_cast<double>(got.age) - s.age));
        worst_beard = std::max(worst_beard, std::abs(static_cast<double>(got.beard) - s.beard));
    }
    CHECK(worst_age <= 0.12);
    CHECK(worst_beard <= 0.12);
}

TEST_CASE("extraction on junk input clamps and flags instead of lying") {
    // Pure noise: whatever the parsed regions look like, results are finite
    // and in range or flagged unmeasurable.
    RngStream rng(47);
    Tensor junk = Tensor::zeros({16, 16, 3});
    for (size_t i = 0; i < junk.numel(); i++) junk.at(i) = static_cast<float>(rng.uniform());
    MaskCondition parsed = parse_mask(junk);
    AttributeCondition got = extract_attributes(junk, parsed);
    REQUIRE(std::isfinite(got.age));
    REQUIRE(std::isfinite(got.beard));
    CHECK(got.age >= 0.0f);
    CHECK(got.age <= 1.0f);
    CHECK(got.beard >= 0.0f);
    CHECK(got.beard <= 1.0f);

    // A maskless image (all background) must flag both attributes.
    MaskCondition empty(16, 16);
    AttributeCondition none = extract_attributes(Tensor::zeros({16, 16, 3}), empty);
    CHECK_FALSE(none.age_measurable);
    CHECK_FALSE(none.beard_measurable);

    CHECK_THROWS_AS(extract_attributes(Tensor::zeros({8, 8, 3}), empty), std::invalid_argument);
}

TEST_CASE("onehot and gray transforms agree with the mask") {
    RngStream rng(53);
    ToyFaceScene s = sample_scene(rng, 16);
    RenderResult r = render(s);

    Tensor hot = mask_onehot(r.mask);
    REQUIRE(hot.shape == Shape{kNumClasses, 16, 16});
    for (int y = 0; y < 16; y++)
        for (int x = 0; x < 16; x++) {
            float sum = 0.0f;
            for (int c = 0; c < kNumClasses; c++)
                sum += hot.at((static_cast<size_t>(c) * 16 + y) * 16 + x);
            REQUIRE(sum == 1.0f);
            REQUIRE(hot.at((static_cast<size_t>(r.mask.at(y, x)) * 16 + y) * 16 + x) == 1.0f);
        }

    Tensor gray = mask_to_gray(r.mask);
    REQUIRE(gray.shape == Shape{16, 16});
    REQUIRE(gray.at(0) == 0.0f);  // corner is background
    // Gray levels are evenly spaced class ids.
    for (int y = 0; y < 16; y++)
        for (int x = 0; x < 16; x++)
            REQUIRE(gray.at(static_cast<size_t>(y) * 16 + x) ==
                    static_cast<float>(r.mask.at(y, x)) / 7.0f);
}

TEST_CASE("image and mask exports write well-formed PPM/PGM") {
    RngStream rng(59);
    ToyFaceScene s = sample_scene(rng, 16);
    RenderResult r = render(s);

    const std::string ppm = "toyface_test_image.ppm";
    const std::string pgm = "toyface_test_mask.pgm";
    io::write_ppm(ppm, r.image);
    io::write_pgm(pgm, mask_to_gray(r.mask));

    std::vector<uint8_t> pb = slurp(ppm);
    REQUIRE(pb.size() == 13 + 16 * 16 * 3);  // "P6\n16 16\n255\n" + payload
    CHECK(pb[0] == 'P');
    CHECK(pb[1] == '6');
    std::vector<uint8_t> gb = slurp(pgm);
    REQUIRE(gb.size() == 13 + 16 * 16);
    CHECK(gb[0] == 'P');
    CHECK(gb[1] == '5');
    // First payload byte is the top-left background pixel of the mask.
    CHECK(gb[13] == 0);
    std::remove(ppm.c_str());
    std::remove(pgm.c_str());
}

TEST_CASE("split sizes follow the 90/10 rule") {
    CHECK(split_sizes(2000) == std::pair<int, int>{1800, 200});
    CHECK(split_sizes(10) == std::pair<int, int>{9, 1});
    CHECK(split_sizes(1) == std::pair<int, int>{1, 0});
    CHECK(split_sizes(30) == std::pair<int, int>{27, 3});
}

TEST_CASE("dataset archives are byte-identical across rebuilds") {
    const std::string p1 = "toyface_ds_a.nta";
    const std::string p2 = "toyface_ds_b.nta";
    RngStream r1(1), r2(1);
    build_dataset(10, 16, r1, p1);
    build_dataset(10, 16, r2, p2);
    CHECK(slurp(p1) == slurp(p2));

    // A different seed must change the bytes.
    RngStream r3(2);
    build_dataset(10, 16, r3, p2);
    CHECK(slurp(p1) != slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("dataset round-trips through the archive and matches re-renders") {
    const std::string path = "toyface_ds_c.nta";
    RngStream rng(77);
    build_dataset(30, 16, rng, path);
    FaceDataset d = load_dataset(path);

    REQUIRE(d.count == 30);
    REQUIRE(d.resolution == 16);
    REQUIRE(d.images.shape == Shape{30, 16, 16, 3});
    REQUIRE(d.attrs.shape == Shape{30, 2});
    CHECK(d.train_indices().size() == 27);
    CHECK(d.val_indices().size() == 3);
    // Split blocks: train first, val tail.
    for (int i = 0; i < 27; i++) REQUIRE(d.split[static_cast<size_t>(i)] == 0);
    for (int i = 27; i < 30; i++) REQUIRE(d.split[static_cast<size_t>(i)] == 1);

    // Entry 3 equals an independent re-render of substream 3.
    RngStream sub = RngStream(77).substream(3);
    ToyFaceScene s = sample_scene(sub, 16);
    RenderResult r = render(s);
    Tensor img = d.image(3);
    for (size_t j = 0; j < img.numel(); j++) REQUIRE(img.at(j) == r.image.at(j));
    REQUIRE(d.mask(3).classes == r.mask.classes);
    CHECK(d.attr(3).age == static_cast<float>(s.age));
    CHECK(d.attr(3).beard == static_cast<float>(s.beard));

    // Stored attributes are the ground truth the decoder should recover.
    AttributeCondition got = extract_attributes(img, d.mask(3));
    CHECK(std::abs(got.age - d.attr(3).age) <= 0.12f);

    std::remove(path.c_str());
}

TEST_CASE("dataset errors are loud") {
    RngStream rng(5);
    CHECK_THROWS_AS(build_dataset(0, 16, rng, "x.nta"), std::invalid_argument);
    CHECK_THROWS_AS(build_dataset(4, 24, rng, "x.nta"), std::invalid_argument);
    CHECK_THROWS_AS(build_dataset(4, 16, rng, "/no/such/dir/x.nta"), std::runtime_error);
    CHECK_THROWS_AS(load_dataset("/no/such/file.nta"), std::runtime_error);

    // A valid archive of the wrong kind is rejected.
    const std::string path = "toyface_notds.nta";
    io::NamedTensorArchive a;
    a.set_meta("kind", "something-else");
    a.save(path);
    CHECK_THROWS_AS(load_dataset(path), std::runtime_error);
    std::remove(path.c_str());
}
