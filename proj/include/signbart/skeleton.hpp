#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "signbart/error.hpp"
#include "signbart/rng.hpp"
#include "signbart/tensor.hpp"

namespace signbart {

// Canonical frame layout: 75 keypoint slots. The tracked parts occupy
// [0, 48) (6 body + 21 left hand + 21 right hand); slots [48, 75) are
// reserved by the upstream extraction format and are carried through as
// missing (0, 0) points.
enum class Part { body, left_hand, right_hand };

struct KeypointLayout {
    static constexpr std::size_t total = 75;

    static constexpr std::pair<std::size_t, std::size_t> span(Part part) {
        switch (part) {
            case Part::body: return {0, 6};
            case Part::left_hand: return {6, 27};
            case Part::right_hand: return {27, 48};
        }
        return {0, 0};
    }

    static constexpr std::size_t span_length(Part part) {
        return span(part).second - span(part).first;
    }
};

inline std::string to_string(Part part) {
    switch (part) {
        case Part::body: return "body";
        case Part::left_hand: return "left_hand";
        case Part::right_hand: return "right_hand";
    }
    return "?";
}

inline Part parse_part(const std::string& name) {
    if (name == "body") return Part::body;
    if (name == "left" || name == "left_hand") return Part::left_hand;
    if (name == "right" || name == "right_hand") return Part::right_hand;
    throw ParameterError("unknown skeleton part '" + name + "' (expected body, left, right)");
}

enum class NormalizationMode { none, one_box, two_box, three_box };

inline std::string to_string(NormalizationMode mode) {
    switch (mode) {
        case NormalizationMode::none: return "none";
        case NormalizationMode::one_box: return "one-box";
        case NormalizationMode::two_box: return "two-box";
        case NormalizationMode::three_box: return "three-box";
    }
    return "?";
}

inline NormalizationMode parse_normalization_mode(const std::string& name) {
    if (name == "none") return NormalizationMode::none;
    if (name == "one-box") return NormalizationMode::one_box;
    if (name == "two-box") return NormalizationMode::two_box;
    if (name == "three-box") return NormalizationMode::three_box;
    throw ParameterError("unknown normalization mode '" + name +
                         "' (expected none, one-box, two-box, three-box)");
}

// keypoint part groupings normalized together under each mode
inline std::vector<std::vector<Part>> normalization_groups(NormalizationMode mode) {
    switch (mode) {
        case NormalizationMode::none: return {};
        case NormalizationMode::one_box:
            return {{Part::body, Part::left_hand, Part::right_hand}};
        case NormalizationMode::two_box:
            return {{Part::body}, {Part::left_hand, Part::right_hand}};
        case NormalizationMode::three_box:
            return {{Part::body}, {Part::left_hand}, {Part::right_hand}};
    }
    return {};
}

/// Pipeline position of a sequence: raw pixel coordinates, frame-normalized
/// to [0,1], or part-normalized under a bounding-box mode.
struct SequenceState {
    enum class Kind { raw_pixels, frame_normalized, part_normalized };

    Kind kind = Kind::raw_pixels;
    NormalizationMode mode = NormalizationMode::none;  // only for part_normalized

    bool operator==(const SequenceState&) const = default;

    std::string str() const {
        switch (kind) {
            case Kind::raw_pixels: return "raw-pixels";
            case Kind::frame_normalized: return "frame-normalized";
            case Kind::part_normalized: return "part-normalized:" + to_string(mode);
        }
        return "?";
    }

    static SequenceState parse(const std::string& text) {
        if (text == "raw-pixels") return {Kind::raw_pixels, NormalizationMode::none};
        if (text == "frame-normalized") return {Kind::frame_normalized, NormalizationMode::none};
        const std::string prefix = "part-normalized:";
        if (text.rfind(prefix, 0) == 0) {
            return {Kind::part_normalized, parse_normalization_mode(text.substr(prefix.size()))};
        }
        throw SchemaError("unknown sequence state '" + text + "'");
    }
};

/// A keypoint sequence: T frames x K keypoints x (x, y), row-major. Missing
/// keypoints are exactly (0, 0) in every state.
struct SkeletonSequence {
    std::string id;
    std::optional<std::int64_t> label;
    std::optional<std::string> gloss;
    std::size_t num_frames = 0;
    std::size_t num_keypoints = KeypointLayout::total;
    std::vector<double> coords;  // num_frames * num_keypoints * 2
    double source_width = 0.0;   // raw-pixels state only
    double source_height = 0.0;
    SequenceState state;

    double x(std::size_t t, std::size_t k) const { return coords[(t * num_keypoints + k) * 2]; }
    double y(std::size_t t, std::size_t k) const { return coords[(t * num_keypoints + k) * 2 + 1]; }
    void set(std::size_t t, std::size_t k, double vx, double vy) {
        coords[(t * num_keypoints + k) * 2] = vx;
        coords[(t * num_keypoints + k) * 2 + 1] = vy;
    }
    bool missing(std::size_t t, std::size_t k) const { return x(t, k) == 0.0 && y(t, k) == 0.0; }

    void validate() const {
        if (num_frames < 1) throw ContractError("sequence '" + id + "': needs at least 1 frame");
        if (coords.size() != num_frames * num_keypoints * 2) {
            throw DimensionError("sequence '" + id + "': coordinate buffer size " +
                                 std::to_string(coords.size()) + " does not match " +
                                 std::to_string(num_frames) + "x" + std::to_string(num_keypoints) + "x2");
        }
        if (state.kind == SequenceState::Kind::raw_pixels) {
            if (source_width <= 0.0 || source_height <= 0.0) {
                throw ContractError("sequence '" + id + "': raw-pixels state needs positive frame dimensions");
            }
        } else {
            for (double v : coords) {
                if (v < 0.0 || v > 1.0) {
                    throw ContractError("sequence '" + id + "': normalized coordinate " +
                                        std::to_string(v) + " outside [0, 1]");
                }
            }
        }
    }
};

/// Margin-expanded axis-aligned box in frame coordinates.
struct BoundingBox {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;
};

namespace detail {

constexpr double kDegenerateHalfWidth = 1e-6;

struct AxisBox {
    double min = 0.0;
    double extent = 0.0;  // tight max - min
    double margin = 0.0;  // per-side expansion
};

inline AxisBox axis_box(double lo, double hi, double margin_frac) {
    AxisBox box;
    box.min = lo;
    box.extent = hi - lo;
    box.margin = box.extent > 0.0 ? margin_frac * box.extent : kDegenerateHalfWidth;
    return box;
}

// min-max rescale into the margin-expanded box; written as
// (rel + margin) / (extent + 2 margin) so that translating or scaling the
// group transforms the result exactly
inline double axis_normalize(const AxisBox& box, double v) {
    return ((v - box.min) + box.margin) / (box.extent + 2.0 * box.margin);
}

}  // namespace detail

/// Rescales raw pixel coordinates by the frame dimensions. Out-of-frame
/// points are clamped first; `clamped`, when given, receives the number of
/// clamped coordinates. Missing keypoints stay (0, 0).
inline SkeletonSequence frame_normalize(const SkeletonSequence& seq, std::size_t* clamped = nullptr) {
    if (seq.state.kind != SequenceState::Kind::raw_pixels) {
        throw StateError("frame_normalize: sequence '" + seq.id + "' is in state '" +
                         seq.state.str() + "', expected 'raw-pixels'");
    }
    if (seq.source_width <= 0.0 || seq.source_height <= 0.0) {
        throw ParameterError("frame_normalize: frame dimensions must be positive");
    }
    SkeletonSequence out = seq;
    out.state = {SequenceState::Kind::frame_normalized, NormalizationMode::none};
    out.source_width = 0.0;
    out.source_height = 0.0;
    std::size_t clamp_count = 0;
    for (std::size_t t = 0; t < seq.num_frames; ++t) {
        for (std::size_t k = 0; k < seq.num_keypoints; ++k) {
            if (seq.missing(t, k)) continue;
            double vx = seq.x(t, k);
            double vy = seq.y(t, k);
            if (vx < 0.0 || vx > seq.source_width) {
                vx = std::clamp(vx, 0.0, seq.source_width);
                ++clamp_count;
            }
            if (vy < 0.0 || vy > seq.source_height) {
                vy = std::clamp(vy, 0.0, seq.source_height);
                ++clamp_count;
            }
            out.set(t, k, vx / seq.source_width, vy / seq.source_height);
        }
    }
    if (clamped != nullptr) *clamped = clamp_count;
    return out;
}

/// Tight box around the given points, expanded per side by `margin_frac` of
/// the extent on that axis. Zero-extent axes expand by a fixed epsilon.
/// Returns nothing for an empty point list (part absent).
inline std::optional<BoundingBox> part_bounding_box(const std::vector<std::pair<double, double>>& points,
                                                    double margin_frac = 0.05) {
    if (margin_frac < 0.0) {
        throw ParameterError("part_bounding_box: margin_frac must be >= 0, got " + std::to_string(margin_frac));
    }
    if (points.empty()) return std::nullopt;
    double x_lo = points[0].first, x_hi = points[0].first;
    double y_lo = points[0].second, y_hi = points[0].second;
    for (const auto& [px, py] : points) {
        x_lo = std::min(x_lo, px);
        x_hi = std::max(x_hi, px);
        y_lo = std::min(y_lo, py);
        y_hi = std::max(y_hi, py);
    }
    const auto bx = detail::axis_box(x_lo, x_hi, margin_frac);
    const auto by = detail::axis_box(y_lo, y_hi, margin_frac);
    return BoundingBox{bx.min - bx.margin, by.min - by.margin,
                       bx.min + bx.extent + bx.margin, by.min + by.extent + by.margin};
}

/// Per-group min-max normalization. Boxes are computed once over the whole
/// sequence (all frames) per group of parts; missing keypoints are excluded
/// from the boxes and stay (0, 0). Groups with no visible keypoint anywhere
/// in the sequence are left untouched.
inline SkeletonSequence normalize_parts(const SkeletonSequence& seq, NormalizationMode mode,
                                        double margin_frac = 0.05) {
    if (seq.state.kind != SequenceState::Kind::frame_normalized) {
        throw StateError("normalize_parts: sequence '" + seq.id + "' is in state '" +
                         seq.state.str() + "', expected 'frame-normalized'");
    }
    if (seq.num_keypoints != KeypointLayout::total) {
        throw ContractError("normalize_parts: needs the full " +
                            std::to_string(KeypointLayout::total) + "-keypoint layout, got " +
                            std::to_string(seq.num_keypoints));
    }
    SkeletonSequence out = seq;
    out.state = {SequenceState::Kind::part_normalized, mode};
    for (const auto& group : normalization_groups(mode)) {
        double x_lo = 0.0, x_hi = 0.0, y_lo = 0.0, y_hi = 0.0;
        bool any = false;
        for (Part part : group) {
            const auto [begin, end] = KeypointLayout::span(part);
            for (std::size_t t = 0; t < seq.num_frames; ++t) {
                for (std::size_t k = begin; k < end; ++k) {
                    if (seq.missing(t, k)) continue;
                    const double px = seq.x(t, k), py = seq.y(t, k);
                    if (!any) {
                        x_lo = x_hi = px;
                        y_lo = y_hi = py;
                        any = true;
                    } else {
                        x_lo = std::min(x_lo, px);
                        x_hi = std::max(x_hi, px);
                        y_lo = std::min(y_lo, py);
                        y_hi = std::max(y_hi, py);
                    }
                }
            }
        }
        if (!any) continue;  // group absent for the whole sequence
        const auto bx = detail::axis_box(x_lo, x_hi, margin_frac);
        const auto by = detail::axis_box(y_lo, y_hi, margin_frac);
        for (Part part : group) {
            const auto [begin, end] = KeypointLayout::span(part);
            for (std::size_t t = 0; t < seq.num_frames; ++t) {
                for (std::size_t k = begin; k < end; ++k) {
                    if (seq.missing(t, k)) continue;
                    out.set(t, k, detail::axis_normalize(bx, seq.x(t, k)),
                            detail::axis_normalize(by, seq.y(t, k)));
                }
            }
        }
    }
    return out;
}

/// Restricts the keypoint axis to the chosen parts, preserving
/// body -> left -> right order. Selecting all three parts returns the
/// sequence unchanged (including the reserved slots, K stays 75).
inline SkeletonSequence select_components(const SkeletonSequence& seq, const std::vector<Part>& parts) {
    if (parts.empty()) throw ParameterError("select_components: part subset must not be empty");
    bool has[3] = {false, false, false};
    for (Part p : parts) has[static_cast<int>(p)] = true;
    if (has[0] && has[1] && has[2]) return seq;
    if (seq.num_keypoints != KeypointLayout::total) {
        throw ContractError("select_components: needs the full " +
                            std::to_string(KeypointLayout::total) + "-keypoint layout, got " +
                            std::to_string(seq.num_keypoints));
    }
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (Part p : {Part::body, Part::left_hand, Part::right_hand}) {
        if (has[static_cast<int>(p)]) spans.push_back(KeypointLayout::span(p));
    }
    std::size_t new_k = 0;
    for (const auto& [b, e] : spans) new_k += e - b;
    SkeletonSequence out = seq;
    out.num_keypoints = new_k;
    out.coords.assign(seq.num_frames * new_k * 2, 0.0);
    for (std::size_t t = 0; t < seq.num_frames; ++t) {
        std::size_t dst = 0;
        for (const auto& [b, e] : spans) {
            for (std::size_t k = b; k < e; ++k, ++dst) {
                out.set(t, dst, seq.x(t, k), seq.y(t, k));
            }
        }
    }
    return out;
}

/// Padded coordinate tensors plus the per-frame validity mask. Rows of
/// frame_mask hold lengths[b] leading ones followed by zero padding; padded
/// coordinate slots are exactly 0.
struct Batch {
    Tensor x_coords;   // (B, T, K)
    Tensor y_coords;   // (B, T, K)
    Tensor frame_mask; // (B, T), 0/1
    std::vector<std::int64_t> labels;
    std::vector<std::size_t> lengths;

    std::size_t size() const { return lengths.size(); }
    std::size_t num_frames() const { return x_coords.dim(1); }
    std::size_t num_keypoints() const { return x_coords.dim(2); }
};

/// Right-pads sequences with zeros to the batch maximum (truncating to
/// `max_len` first, when given) and splits coordinates into separate x and y
/// tensors.
inline Batch pad_batch(const std::vector<SkeletonSequence>& seqs,
                       std::optional<std::size_t> max_len = std::nullopt,
                       bool require_labels = true) {
    if (seqs.empty()) throw ParameterError("pad_batch: batch must not be empty");
    const std::size_t k = seqs[0].num_keypoints;
    const SequenceState state = seqs[0].state;
    std::size_t t_max = 0;
    for (const auto& seq : seqs) {
        if (seq.num_keypoints != k) {
            throw ContractError("pad_batch: mixed keypoint counts " + std::to_string(k) + " and " +
                                std::to_string(seq.num_keypoints));
        }
        if (!(seq.state == state)) {
            throw ContractError("pad_batch: mixed sequence states '" + state.str() + "' and '" +
                                seq.state.str() + "'");
        }
        if (require_labels && !seq.label.has_value()) {
            throw ContractError("pad_batch: sequence '" + seq.id + "' has no label");
        }
        std::size_t t = seq.num_frames;
        if (max_len.has_value()) t = std::min(t, *max_len);
        t_max = std::max(t_max, t);
    }
    const std::size_t batch = seqs.size();
    Batch out;
    out.x_coords = Tensor::zeros({batch, t_max, k});
    out.y_coords = Tensor::zeros({batch, t_max, k});
    out.frame_mask = Tensor::zeros({batch, t_max});
    out.labels.reserve(batch);
    out.lengths.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& seq = seqs[b];
        std::size_t len = seq.num_frames;
        if (max_len.has_value()) len = std::min(len, *max_len);  // keep the first frames
        out.lengths.push_back(len);
        out.labels.push_back(seq.label.value_or(-1));
        for (std::size_t t = 0; t < len; ++t) {
            out.frame_mask.data()[b * t_max + t] = 1.0;
            for (std::size_t kp = 0; kp < k; ++kp) {
                out.x_coords.data()[(b * t_max + t) * k + kp] = seq.x(t, kp);
                out.y_coords.data()[(b * t_max + t) * k + kp] = seq.y(t, kp);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace detail {

// 21-point hand template: wrist plus five 4-point fingers fanned upwards.
// `fold_bits` selects fingers curled toward the wrist, giving each class a
// static hand-shape signature that survives bounding-box normalization and
// temporal pooling.
inline std::pair<double, double> hand_offset(std::size_t slot, unsigned fold_bits, double mirror) {
    if (slot == 0) return {0.0, 0.0};  // wrist
    const std::size_t finger = (slot - 1) / 4;     // 0..4
    const std::size_t joint = (slot - 1) % 4 + 1;  // 1..4 along the finger
    static constexpr double angles[5] = {-0.9, -0.45, 0.0, 0.45, 0.9};  // radians off vertical
    const bool folded = (fold_bits >> finger) & 1u;
    // folded fingers curl past the wrist to the opposite side
    const double reach = 0.022 * static_cast<double>(joint) * (folded ? -0.45 : 1.0);
    const double angle = angles[finger];
    return {mirror * reach * std::sin(angle), -reach * std::cos(angle)};
}

}  // namespace detail

/// Deterministic parametric dataset: each class pairs a hand-shape signature
/// (folded-finger pattern on each hand) with a distinct right-hand trajectory
/// (center, radius, frequency, phase), rendered over a random length T in
/// [16, 48] with Gaussian jitter (sigma 0.01) and 5% missing keypoints.
/// Output is in the raw-pixels state on a 640x480 frame.
inline std::vector<SkeletonSequence> generate_synthetic(std::size_t classes,
                                                        std::size_t samples_per_class,
                                                        std::uint64_t seed) {
    if (classes < 2) throw ParameterError("generate_synthetic: needs at least 2 classes");
    if (samples_per_class < 1) throw ParameterError("generate_synthetic: needs at least 1 sample per class");
    constexpr double kWidth = 640.0, kHeight = 480.0;
    constexpr double kTau = 6.28318530717958647692;
    Rng rng(seed);
    std::vector<SkeletonSequence> out;
    out.reserve(classes * samples_per_class);
    for (std::size_t c = 0; c < classes; ++c) {
        const unsigned right_fold = static_cast<unsigned>(c % 32);
        const unsigned left_fold = static_cast<unsigned>((5 * c + 3) % 32);
        const double cx = 0.56 + 0.11 * (static_cast<double>(c % 3) - 1.0);
        const double cy = 0.54 + 0.11 * (static_cast<double>((c / 3) % 3) - 1.0);
        const double radius = 0.07 + 0.02 * static_cast<double>(c % 5);
        const double freq = 1.0 + static_cast<double>(c % 4);
        const double phase = kTau * static_cast<double>(c % 8) / 8.0;
        const double left_amp = 0.03 + 0.015 * static_cast<double>((c / 2) % 3);
        for (std::size_t s = 0; s < samples_per_class; ++s) {
            const std::size_t frames = 16 + rng.uniform_index(33);  // T in [16, 48]
            SkeletonSequence seq;
            seq.id = "c" + std::to_string(c) + "_s" + std::to_string(s);
            seq.label = static_cast<std::int64_t>(c);
            seq.gloss = "gloss_" + std::to_string(c);
            seq.num_frames = frames;
            seq.num_keypoints = KeypointLayout::total;
            seq.coords.assign(frames * KeypointLayout::total * 2, 0.0);
            seq.source_width = kWidth;
            seq.source_height = kHeight;
            seq.state = {SequenceState::Kind::raw_pixels, NormalizationMode::none};
            for (std::size_t t = 0; t < frames; ++t) {
                const double u = static_cast<double>(t) / static_cast<double>(frames - 1);
                const double sway = 0.012 * std::sin(kTau * u + phase);
                // body: nose, shoulders, elbows, hip center
                const double body_pts[6][2] = {
                    {0.50 + sway, 0.18}, {0.40 + sway, 0.30}, {0.60 + sway, 0.30},
                    {0.34 + sway, 0.46}, {0.66 + sway, 0.46}, {0.50 + sway, 0.64},
                };
                const double wrist_x = cx + radius * std::sin(kTau * freq * u + phase);
                const double wrist_y = cy + 0.8 * radius * std::cos(kTau * freq * u + phase);
                const double left_x = 1.0 - cx + left_amp * std::sin(kTau * (freq * 0.5) * u);
                const double left_y = cy + 0.1 + left_amp * std::cos(kTau * (freq * 0.5) * u + phase);
                for (std::size_t k = 0; k < 48; ++k) {
                    if (rng.bernoulli(0.05)) continue;  // missing keypoint
                    double px, py;
                    if (k < 6) {
                        px = body_pts[k][0];
                        py = body_pts[k][1];
                    } else if (k < 27) {
                        const auto [ox, oy] = detail::hand_offset(k - 6, left_fold, -1.0);
                        px = left_x + ox;
                        py = left_y + oy;
                    } else {
                        const auto [ox, oy] = detail::hand_offset(k - 27, right_fold, 1.0);
                        px = wrist_x + ox;
                        py = wrist_y + oy;
                    }
                    px = std::clamp(px + rng.normal(0.0, 0.01), 0.002, 0.998);
                    py = std::clamp(py + rng.normal(0.0, 0.01), 0.002, 0.998);
                    seq.set(t, k, px * kWidth, py * kHeight);
                }
            }
            seq.validate();
            out.push_back(std::move(seq));
        }
    }
    return out;
}

/// Deterministic stratified split: per class, the first ceil(train_fraction*n)
/// samples (in dataset order) go to the train split, the rest to validation.
inline std::pair<std::vector<SkeletonSequence>, std::vector<SkeletonSequence>> split_train_val(
    const std::vector<SkeletonSequence>& seqs, double train_fraction) {
    if (train_fraction <= 0.0 || train_fraction >= 1.0) {
        throw ParameterError("split_train_val: train_fraction must be in (0, 1)");
    }
    std::map<std::int64_t, std::size_t> seen, totals;
    for (const auto& seq : seqs) {
        if (!seq.label.has_value()) {
            throw ContractError("split_train_val: sequence '" + seq.id + "' has no label");
        }
        ++totals[*seq.label];
    }
    std::pair<std::vector<SkeletonSequence>, std::vector<SkeletonSequence>> out;
    for (const auto& seq : seqs) {
        const std::size_t quota = static_cast<std::size_t>(
            std::ceil(train_fraction * static_cast<double>(totals[*seq.label])));
        if (seen[*seq.label]++ < quota) {
            out.first.push_back(seq);
        } else {
            out.second.push_back(seq);
        }
    }
    return out;
}

}  // namespace signbart
