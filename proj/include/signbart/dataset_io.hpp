#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "signbart/error.hpp"
#include "signbart/skeleton.hpp"

namespace signbart {

namespace detail {

inline const std::vector<std::size_t>& valid_keypoint_counts() {
    // full layout plus every component-selected count
    static const std::vector<std::size_t> counts{6, 21, 27, 42, 48, 75};
    return counts;
}

inline bool keypoint_count_ok(std::size_t k) {
    const auto& counts = valid_keypoint_counts();
    return std::find(counts.begin(), counts.end(), k) != counts.end();
}

}  // namespace detail

/// One record per line:
/// {"id", "label", "gloss", "width", "height", "state", "frames"} with
/// frames = [[[x, y] * K] * T]. All records of a file must share K and state.
inline void write_dataset(const std::vector<SkeletonSequence>& seqs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& seq : seqs) {
        nlohmann::ordered_json record;
        record["id"] = seq.id;
        if (seq.label.has_value()) {
            record["label"] = *seq.label;
        } else {
            record["label"] = nullptr;
        }
        if (seq.gloss.has_value()) {
            record["gloss"] = *seq.gloss;
        } else {
            record["gloss"] = nullptr;
        }
        if (seq.state.kind == SequenceState::Kind::raw_pixels) {
            record["width"] = static_cast<std::int64_t>(seq.source_width);
            record["height"] = static_cast<std::int64_t>(seq.source_height);
        } else {
            record["width"] = nullptr;
            record["height"] = nullptr;
        }
        record["state"] = seq.state.str();
        nlohmann::ordered_json frames = nlohmann::ordered_json::array();
        for (std::size_t t = 0; t < seq.num_frames; ++t) {
            nlohmann::ordered_json frame = nlohmann::ordered_json::array();
            for (std::size_t k = 0; k < seq.num_keypoints; ++k) {
                frame.push_back({seq.x(t, k), seq.y(t, k)});
            }
            frames.push_back(std::move(frame));
        }
        record["frames"] = std::move(frames);
        out << record.dump() << '\n';
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

inline std::vector<SkeletonSequence> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<SkeletonSequence> seqs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(where + ": malformed JSON record: " + e.what());
        }
        try {
            if (!record.is_object()) throw SchemaError("record is not an object");
            for (const auto& [key, value] : record.items()) {
                (void)value;
                if (key != "id" && key != "label" && key != "gloss" && key != "width" &&
                    key != "height" && key != "state" && key != "frames") {
                    throw SchemaError("unknown key '" + key + "'");
                }
            }
            for (const char* key : {"id", "label", "gloss", "width", "height", "state", "frames"}) {
                if (!record.contains(key)) throw SchemaError(std::string("missing key '") + key + "'");
            }
            SkeletonSequence seq;
            seq.id = record["id"].get<std::string>();
            if (!record["label"].is_null()) seq.label = record["label"].get<std::int64_t>();
            if (!record["gloss"].is_null()) seq.gloss = record["gloss"].get<std::string>();
            seq.state = SequenceState::parse(record["state"].get<std::string>());
            if (seq.state.kind == SequenceState::Kind::raw_pixels) {
                if (record["width"].is_null() || record["height"].is_null()) {
                    throw SchemaError("raw-pixels record needs width and height");
                }
                seq.source_width = record["width"].get<double>();
                seq.source_height = record["height"].get<double>();
            }
            const auto& frames = record["frames"];
            if (!frames.is_array() || frames.empty()) {
                throw SchemaError("frames must be a non-empty array (T >= 1)");
            }
            seq.num_frames = frames.size();
            std::size_t k = 0;
            for (std::size_t t = 0; t < frames.size(); ++t) {
                const auto& frame = frames[t];
                if (!frame.is_array()) throw SchemaError("frame " + std::to_string(t) + " is not an array");
                if (t == 0) {
                    k = frame.size();
                    if (!detail::keypoint_count_ok(k)) {
                        throw SchemaError("expected 75 keypoints per frame (or a component-selected "
                                          "count: 6, 21, 27, 42, 48), got " + std::to_string(k));
                    }
                    seq.num_keypoints = k;
                    seq.coords.assign(seq.num_frames * k * 2, 0.0);
                } else if (frame.size() != k) {
                    throw SchemaError("frame " + std::to_string(t) + " has " +
                                      std::to_string(frame.size()) + " keypoints, expected " + std::to_string(k));
                }
                for (std::size_t kp = 0; kp < k; ++kp) {
                    const auto& point = frame[kp];
                    if (!point.is_array() || point.size() != 2 || !point[0].is_number() || !point[1].is_number()) {
                        throw SchemaError("keypoint " + std::to_string(kp) + " of frame " +
                                          std::to_string(t) + " is not an [x, y] pair");
                    }
                    seq.set(t, kp, point[0].get<double>(), point[1].get<double>());
                }
            }
            seq.validate();
            if (!seqs.empty()) {
                if (seqs.front().num_keypoints != seq.num_keypoints) {
                    throw SchemaError("mixed keypoint counts in one file: " +
                                      std::to_string(seqs.front().num_keypoints) + " and " +
                                      std::to_string(seq.num_keypoints));
                }
                if (!(seqs.front().state == seq.state)) {
                    throw SchemaError("mixed states in one file: '" + seqs.front().state.str() +
                                      "' and '" + seq.state.str() + "'");
                }
            }
            seqs.push_back(std::move(seq));
        } catch (const Error& e) {
            throw SchemaError(where + ": " + e.message());
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(where + ": " + e.what());
        }
    }
    return seqs;
}

}  // namespace signbart
