#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "signbart/dataset_io.hpp"
#include "signbart/skeleton.hpp"

using namespace signbart;

namespace {

SkeletonSequence make_raw(std::size_t frames = 2, double width = 640, double height = 480) {
    SkeletonSequence seq;
    seq.id = "test";
    seq.label = 0;
    seq.num_frames = frames;
    seq.num_keypoints = KeypointLayout::total;
    seq.coords.assign(frames * KeypointLayout::total * 2, 0.0);
    seq.source_width = width;
    seq.source_height = height;
    seq.state = {SequenceState::Kind::raw_pixels, NormalizationMode::none};
    return seq;
}

SkeletonSequence make_frame_normalized(std::size_t frames = 1) {
    SkeletonSequence seq = make_raw(frames);
    seq.source_width = 0;
    seq.source_height = 0;
    seq.state = {SequenceState::Kind::frame_normalized, NormalizationMode::none};
    return seq;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(FrameNormalize, FormulaEvaluation) {
    SkeletonSequence seq = make_raw(1);
    seq.set(0, 0, 320, 240);
    SkeletonSequence out = frame_normalize(seq);
    EXPECT_DOUBLE_EQ(out.x(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(out.y(0, 0), 0.5);
    EXPECT_EQ(out.state.kind, SequenceState::Kind::frame_normalized);
}

TEST(FrameNormalize, MissingKeypointStaysMissing) {
    SkeletonSequence seq = make_raw(1);
    seq.set(0, 3, 100, 100);
    SkeletonSequence out = frame_normalize(seq);
    EXPECT_TRUE(out.missing(0, 0));
    EXPECT_FALSE(out.missing(0, 3));
}

TEST(FrameNormalize, BoundaryCase) {
    SkeletonSequence seq = make_raw(1);
    seq.set(0, 0, 640, 1e-12);  // y must not be exactly 0 alongside x=640? x=640,y=0 is non-missing
    seq.set(0, 1, 640, 0);
    SkeletonSequence out = frame_normalize(seq);
    EXPECT_DOUBLE_EQ(out.x(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(out.y(0, 1), 0.0);
}

TEST(FrameNormalize, OutOfFrameClampsWithCounter) {
    SkeletonSequence seq = make_raw(1);
    seq.set(0, 0, 700, -5);
    seq.set(0, 1, 320, 240);
    std::size_t clamped = 0;
    SkeletonSequence out = frame_normalize(seq, &clamped);
    EXPECT_EQ(clamped, 2u);
    EXPECT_DOUBLE_EQ(out.x(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(out.y(0, 0), 0.0);
}

TEST(FrameNormalize, WrongStateRejected) {
    SkeletonSequence seq = make_frame_normalized();
    EXPECT_THROW(frame_normalize(seq), StateError);
}

TEST(PartBoundingBox, MarginExpansion) {
    auto box = part_bounding_box({{0.2, 0.3}, {0.4, 0.7}}, 0.05);
    ASSERT_TRUE(box.has_value());
    EXPECT_NEAR(box->x_min, 0.19, 1e-12);
    EXPECT_NEAR(box->y_min, 0.28, 1e-12);
    EXPECT_NEAR(box->x_max, 0.41, 1e-12);
    EXPECT_NEAR(box->y_max, 0.72, 1e-12);
}

TEST(PartBoundingBox, SinglePointEpsilonExpanded) {
    auto box = part_bounding_box({{0.5, 0.5}});
    ASSERT_TRUE(box.has_value());
    EXPECT_DOUBLE_EQ(box->x_min, 0.5 - 1e-6);
    EXPECT_DOUBLE_EQ(box->x_max, 0.5 + 1e-6);
    EXPECT_DOUBLE_EQ(box->y_min, 0.5 - 1e-6);
    EXPECT_DOUBLE_EQ(box->y_max, 0.5 + 1e-6);
}

TEST(PartBoundingBox, ZeroMarginIsTight) {
    auto box = part_bounding_box({{0.0, 0.1}, {1.0, 0.9}}, 0.0);
    ASSERT_TRUE(box.has_value());
    EXPECT_DOUBLE_EQ(box->x_min, 0.0);
    EXPECT_DOUBLE_EQ(box->y_min, 0.1);
    EXPECT_DOUBLE_EQ(box->x_max, 1.0);
    EXPECT_DOUBLE_EQ(box->y_max, 0.9);
}

TEST(PartBoundingBox, EmptySignalsPartAbsent) {
    EXPECT_FALSE(part_bounding_box({}).has_value());
}

TEST(NormalizeParts, ModeNoneIsIdentityWithStateTag) {
    SkeletonSequence seq = make_frame_normalized(2);
    seq.set(0, 0, 0.3, 0.4);
    seq.set(1, 30, 0.8, 0.2);
    SkeletonSequence out = normalize_parts(seq, NormalizationMode::none);
    EXPECT_EQ(out.coords, seq.coords);
    EXPECT_EQ(out.state.str(), "part-normalized:none");
}

TEST(NormalizeParts, MarginAlgebraAtBoxMin) {
    // body group {(0.2, 0.3), (0.4, 0.7)}: the min corner lands at
    // margin / (1 + 2 margin) = 1/22 on each axis
    SkeletonSequence seq = make_frame_normalized(1);
    seq.set(0, 0, 0.2, 0.3);
    seq.set(0, 1, 0.4, 0.7);
    SkeletonSequence out = normalize_parts(seq, NormalizationMode::three_box);
    EXPECT_NEAR(out.x(0, 0), 1.0 / 22.0, 1e-12);
    EXPECT_NEAR(out.y(0, 0), 1.0 / 22.0, 1e-12);
    EXPECT_NEAR(out.x(0, 1), 21.0 / 22.0, 1e-12);
    EXPECT_NEAR(out.y(0, 1), 21.0 / 22.0, 1e-12);
}

TEST(NormalizeParts, SymmetricGroupCenterMapsToHalf) {
    SkeletonSequence seq = make_frame_normalized(1);
    seq.set(0, 0, 0.2, 0.2);
    seq.set(0, 1, 0.4, 0.4);
    seq.set(0, 2, 0.3, 0.3);  // geometric center of the group
    SkeletonSequence out = normalize_parts(seq, NormalizationMode::three_box);
    EXPECT_DOUBLE_EQ(out.x(0, 2), 0.5);
    EXPECT_DOUBLE_EQ(out.y(0, 2), 0.5);
}

TEST(NormalizeParts, AllMissingGroupLeftAsZeros) {
    SkeletonSequence seq = make_frame_normalized(2);
    seq.set(0, 0, 0.2, 0.3);  // body present, hands fully missing
    SkeletonSequence out = normalize_parts(seq, NormalizationMode::three_box);
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t k = 6; k < 48; ++k) {
            EXPECT_TRUE(out.missing(t, k));
        }
    }
}

TEST(NormalizeParts, WrongStateRejected) {
    SkeletonSequence raw = make_raw();
    EXPECT_THROW(normalize_parts(raw, NormalizationMode::three_box), StateError);
    SkeletonSequence seq = make_frame_normalized();
    SkeletonSequence done = normalize_parts(seq, NormalizationMode::three_box);
    EXPECT_THROW(normalize_parts(done, NormalizationMode::three_box), StateError);
}

TEST(NormalizeParts, OutputInUnitSquareAndMissingPreserved) {
    Rng rng(5);
    SkeletonSequence seq = make_frame_normalized(4);
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t k = 0; k < 48; ++k) {
            if (rng.bernoulli(0.1)) continue;
            seq.set(t, k, rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95));
        }
    }
    for (auto mode : {NormalizationMode::one_box, NormalizationMode::two_box, NormalizationMode::three_box}) {
        SkeletonSequence out = normalize_parts(seq, mode);
        for (double v : out.coords) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        for (std::size_t t = 0; t < 4; ++t) {
            for (std::size_t k = 0; k < 75; ++k) {
                EXPECT_EQ(out.missing(t, k), seq.missing(t, k));
            }
        }
    }
}

namespace {

// Grid-aligned random sequence: coordinates are multiples of 2^-16 so that
// translations by grid constants and scalings by powers of two are exact in
// double arithmetic and the invariance properties hold bitwise.
SkeletonSequence grid_sequence(Rng& rng, std::size_t frames = 3) {
    SkeletonSequence seq = make_frame_normalized(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t k = 0; k < 48; ++k) {
            if (rng.bernoulli(0.1)) continue;  // some missing points
            const double px = static_cast<double>(28672 + rng.uniform_index(8193)) / 65536.0;
            const double py = static_cast<double>(28672 + rng.uniform_index(8193)) / 65536.0;
            seq.set(t, k, px, py);
        }
    }
    return seq;
}

}  // namespace

TEST(NormalizeParts, TranslationInvariantPerGroupExactly) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        SkeletonSequence seq = grid_sequence(rng);
        const double cx = (static_cast<double>(rng.uniform_index(16385)) - 8192.0) / 65536.0;
        const double cy = (static_cast<double>(rng.uniform_index(16385)) - 8192.0) / 65536.0;
        SkeletonSequence shifted = seq;
        for (std::size_t t = 0; t < seq.num_frames; ++t) {
            for (std::size_t k = 0; k < 48; ++k) {
                if (seq.missing(t, k)) continue;
                shifted.set(t, k, seq.x(t, k) + cx, seq.y(t, k) + cy);
            }
        }
        const SkeletonSequence a = normalize_parts(seq, NormalizationMode::three_box);
        const SkeletonSequence b = normalize_parts(shifted, NormalizationMode::three_box);
        ASSERT_EQ(a.coords, b.coords) << "trial " << trial;
    }
}

TEST(NormalizeParts, ScaleInvariantPerGroupExactly) {
    Rng rng(13);
    const double scales[] = {0.5, 0.25, 2.0};
    for (int trial = 0; trial < 100; ++trial) {
        SkeletonSequence seq = grid_sequence(rng);
        const double s = scales[rng.uniform_index(3)];
        SkeletonSequence scaled = seq;
        for (Part part : {Part::body, Part::left_hand, Part::right_hand}) {
            const auto [begin, end] = KeypointLayout::span(part);
            // group box center (grid-aligned by construction)
            double x_lo = 1.0, x_hi = 0.0, y_lo = 1.0, y_hi = 0.0;
            bool any = false;
            for (std::size_t t = 0; t < seq.num_frames; ++t) {
                for (std::size_t k = begin; k < end; ++k) {
                    if (seq.missing(t, k)) continue;
                    any = true;
                    x_lo = std::min(x_lo, seq.x(t, k));
                    x_hi = std::max(x_hi, seq.x(t, k));
                    y_lo = std::min(y_lo, seq.y(t, k));
                    y_hi = std::max(y_hi, seq.y(t, k));
                }
            }
            if (!any) continue;
            const double mx = (x_lo + x_hi) / 2.0, my = (y_lo + y_hi) / 2.0;
            for (std::size_t t = 0; t < seq.num_frames; ++t) {
                for (std::size_t k = begin; k < end; ++k) {
                    if (seq.missing(t, k)) continue;
                    scaled.set(t, k, mx + s * (seq.x(t, k) - mx), my + s * (seq.y(t, k) - my));
                }
            }
        }
        const SkeletonSequence a = normalize_parts(seq, NormalizationMode::three_box);
        const SkeletonSequence b = normalize_parts(scaled, NormalizationMode::three_box);
        ASSERT_EQ(a.coords, b.coords) << "trial " << trial << " scale " << s;
    }
}

TEST(SelectComponents, FullSubsetIsIdentity) {
    SkeletonSequence seq = make_frame_normalized(2);
    seq.set(1, 50, 0.5, 0.5);
    SkeletonSequence out = select_components(seq, {Part::body, Part::left_hand, Part::right_hand});
    EXPECT_EQ(out.num_keypoints, 75u);
    EXPECT_EQ(out.coords, seq.coords);
}

TEST(SelectComponents, RightHandSlice) {
    SkeletonSequence seq = make_frame_normalized(2);
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t k = 0; k < 75; ++k) {
            seq.set(t, k, 0.001 * static_cast<double>(k + 1), 0.002 * static_cast<double>(t + 1));
        }
    }
    SkeletonSequence out = select_components(seq, {Part::right_hand});
    ASSERT_EQ(out.num_keypoints, 21u);
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t k = 0; k < 21; ++k) {
            EXPECT_DOUBLE_EQ(out.x(t, k), seq.x(t, 27 + k));
            EXPECT_DOUBLE_EQ(out.y(t, k), seq.y(t, 27 + k));
        }
    }
}

TEST(SelectComponents, BodyPlusLeftConcatenation) {
    SkeletonSequence seq = make_frame_normalized(1);
    for (std::size_t k = 0; k < 75; ++k) seq.set(0, k, 0.001 * static_cast<double>(k + 1), 0.5);
    SkeletonSequence out = select_components(seq, {Part::body, Part::left_hand});
    ASSERT_EQ(out.num_keypoints, 27u);
    EXPECT_DOUBLE_EQ(out.x(0, 0), seq.x(0, 0));
    EXPECT_DOUBLE_EQ(out.x(0, 6), seq.x(0, 6));
    EXPECT_DOUBLE_EQ(out.x(0, 26), seq.x(0, 26));
}

TEST(SelectComponents, EmptySubsetRejected) {
    SkeletonSequence seq = make_frame_normalized(1);
    EXPECT_THROW(select_components(seq, {}), ParameterError);
}

TEST(PadBatch, PaddingSemantics) {
    SkeletonSequence a = make_frame_normalized(3);
    SkeletonSequence b = make_frame_normalized(5);
    a.set(0, 0, 0.5, 0.5);
    b.set(4, 0, 0.25, 0.75);
    Batch batch = pad_batch({a, b});
    ASSERT_EQ(batch.num_frames(), 5u);
    const std::vector<double> want_mask{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
    EXPECT_EQ(batch.frame_mask.data(), want_mask);
    EXPECT_EQ(batch.lengths, (std::vector<std::size_t>{3, 5}));
    // padded slots hold exactly zero
    for (std::size_t t = 3; t < 5; ++t) {
        for (std::size_t k = 0; k < 75; ++k) {
            EXPECT_EQ(batch.x_coords.at({0, t, k}), 0.0);
            EXPECT_EQ(batch.y_coords.at({0, t, k}), 0.0);
        }
    }
    EXPECT_DOUBLE_EQ(batch.y_coords.at({1, 4, 0}), 0.75);
}

TEST(PadBatch, SingleSequenceNoPadding) {
    SkeletonSequence a = make_frame_normalized(4);
    Batch batch = pad_batch({a});
    EXPECT_EQ(batch.num_frames(), 4u);
    for (double m : batch.frame_mask.data()) EXPECT_EQ(m, 1.0);
}

TEST(PadBatch, TruncationKeepsFirstFrames) {
    SkeletonSequence a = make_frame_normalized(6);
    for (std::size_t t = 0; t < 6; ++t) a.set(t, 0, 0.1 * static_cast<double>(t + 1), 0.5);
    Batch batch = pad_batch({a}, 4);
    ASSERT_EQ(batch.num_frames(), 4u);
    for (double m : batch.frame_mask.data()) EXPECT_EQ(m, 1.0);
    EXPECT_DOUBLE_EQ(batch.x_coords.at({0, 3, 0}), 0.4);
}

TEST(PadBatch, MixedKeypointCountsRejected) {
    SkeletonSequence a = make_frame_normalized(2);
    SkeletonSequence b = select_components(a, {Part::right_hand});
    EXPECT_THROW(pad_batch({a, b}), ContractError);
}

TEST(PadBatch, MissingLabelRejected) {
    SkeletonSequence a = make_frame_normalized(2);
    a.label.reset();
    EXPECT_THROW(pad_batch({a}), ContractError);
    EXPECT_NO_THROW(pad_batch({a}, std::nullopt, false));
}

TEST(DatasetIo, RoundTripIdentity) {
    const std::string path = temp_path("signbart_roundtrip.jsonl");
    auto seqs = generate_synthetic(3, 2, 42);
    write_dataset(seqs, path);
    auto loaded = read_dataset(path);
    ASSERT_EQ(loaded.size(), seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        EXPECT_EQ(loaded[i].id, seqs[i].id);
        EXPECT_EQ(loaded[i].label, seqs[i].label);
        EXPECT_EQ(loaded[i].gloss, seqs[i].gloss);
        EXPECT_EQ(loaded[i].num_frames, seqs[i].num_frames);
        EXPECT_EQ(loaded[i].num_keypoints, seqs[i].num_keypoints);
        EXPECT_EQ(loaded[i].coords, seqs[i].coords);
        EXPECT_EQ(loaded[i].source_width, seqs[i].source_width);
        EXPECT_EQ(loaded[i].state, seqs[i].state);
    }
    std::remove(path.c_str());
}

TEST(DatasetIo, EmptyFramesRejected) {
    const std::string path = temp_path("signbart_empty_frames.jsonl");
    std::ofstream(path) << R"({"id":"a","label":0,"gloss":null,"width":640,"height":480,"state":"raw-pixels","frames":[]})"
                        << "\n";
    EXPECT_THROW(read_dataset(path), SchemaError);
    std::remove(path.c_str());
}

TEST(DatasetIo, WrongKeypointCountNamesExpected75) {
    const std::string path = temp_path("signbart_bad_k.jsonl");
    std::string frame = "[";
    for (int i = 0; i < 74; ++i) frame += std::string(i ? "," : "") + "[0.1,0.2]";
    frame += "]";
    std::ofstream(path) << R"({"id":"a","label":0,"gloss":null,"width":null,"height":null,"state":"frame-normalized","frames":[)"
                        << frame << "]}" << "\n";
    try {
        read_dataset(path);
        FAIL() << "expected SchemaError";
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("75"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("74"), std::string::npos);
    }
    std::remove(path.c_str());
}

TEST(DatasetIo, MalformedLineReportsLineNumber) {
    const std::string path = temp_path("signbart_bad_line.jsonl");
    {
        std::ofstream out(path);
        auto seqs = generate_synthetic(2, 1, 1);
        write_dataset({seqs[0]}, path);
        out.close();
        std::ofstream app(path, std::ios::app);
        app << "{not json\n";
    }
    try {
        read_dataset(path);
        FAIL() << "expected SchemaError";
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos);
    }
    std::remove(path.c_str());
}

TEST(DatasetIo, MixedStatesRejected) {
    const std::string path = temp_path("signbart_mixed.jsonl");
    auto seqs = generate_synthetic(2, 1, 7);
    std::vector<SkeletonSequence> mixed{seqs[0], frame_normalize(seqs[1])};
    EXPECT_THROW(
        {
            write_dataset(mixed, path);
            read_dataset(path);
        },
        SchemaError);
    std::remove(path.c_str());
}

TEST(DatasetIo, UnknownKeyRejected) {
    const std::string path = temp_path("signbart_unknown_key.jsonl");
    std::ofstream(path) << R"({"id":"a","label":0,"gloss":null,"width":null,"height":null,"state":"frame-normalized","frames":[[[0.1,0.2]]],"extra":1})"
                        << "\n";
    EXPECT_THROW(read_dataset(path), SchemaError);
    std::remove(path.c_str());
}

TEST(Synthetic, DeterministicPerSeed) {
    auto a = generate_synthetic(8, 25, 7);
    auto b = generate_synthetic(8, 25, 7);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(a.size(), 200u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].coords, b[i].coords);
        EXPECT_EQ(a[i].num_frames, b[i].num_frames);
    }
    auto c = generate_synthetic(8, 25, 8);
    EXPECT_NE(a[0].coords, c[0].coords);
}

TEST(Synthetic, SequencesSatisfyInvariants) {
    for (const auto& seq : generate_synthetic(4, 3, 3)) {
        ASSERT_NO_THROW(seq.validate());
        EXPECT_GE(seq.num_frames, 16u);
        EXPECT_LE(seq.num_frames, 48u);
        for (std::size_t t = 0; t < seq.num_frames; ++t) {
            for (std::size_t k = 48; k < 75; ++k) EXPECT_TRUE(seq.missing(t, k));
        }
    }
}

TEST(Synthetic, NearestCentroidSeparability) {
    // independent oracle: resample each sequence to 16 frames, classify by
    // nearest per-class mean trajectory
    const std::size_t classes = 8;
    auto seqs = generate_synthetic(classes, 25, 7);
    const std::size_t resample = 16;
    auto featurize = [&](const SkeletonSequence& raw) {
        SkeletonSequence seq = frame_normalize(raw);
        std::vector<double> f;
        f.reserve(resample * 96);
        for (std::size_t i = 0; i < resample; ++i) {
            const std::size_t t = i * (seq.num_frames - 1) / (resample - 1);
            for (std::size_t k = 0; k < 48; ++k) {
                f.push_back(seq.x(t, k));
                f.push_back(seq.y(t, k));
            }
        }
        return f;
    };
    std::vector<std::vector<double>> centroids(classes);
    std::vector<std::size_t> counts(classes, 0);
    std::vector<std::vector<double>> features;
    features.reserve(seqs.size());
    for (const auto& seq : seqs) {
        features.push_back(featurize(seq));
        auto& centroid = centroids[static_cast<std::size_t>(*seq.label)];
        if (centroid.empty()) centroid.assign(features.back().size(), 0.0);
        for (std::size_t i = 0; i < centroid.size(); ++i) centroid[i] += features.back()[i];
        ++counts[static_cast<std::size_t>(*seq.label)];
    }
    for (std::size_t c = 0; c < classes; ++c) {
        for (auto& v : centroids[c]) v /= static_cast<double>(counts[c]);
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        double best = 1e300;
        std::size_t best_class = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            double dist = 0.0;
            for (std::size_t j = 0; j < features[i].size(); ++j) {
                const double d = features[i][j] - centroids[c][j];
                dist += d * d;
            }
            if (dist < best) {
                best = dist;
                best_class = c;
            }
        }
        correct += best_class == static_cast<std::size_t>(*seqs[i].label) ? 1 : 0;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(seqs.size());
    EXPECT_GT(accuracy, 0.9) << "nearest-centroid accuracy " << accuracy;
}

TEST(Synthetic, ParameterValidation) {
    EXPECT_THROW(generate_synthetic(1, 5, 0), ParameterError);
    EXPECT_THROW(generate_synthetic(4, 0, 0), ParameterError);
}
