#pragma once

// Event-file ingestion and export.
//
//   CSV     header `trial,neuron,time` (an optional trailing `mark` column is
//           accepted and ignored), one spike per row, 1-based indices.
//   NDJSON  one object per line: {"trial":r,"neuron":i,"time":t}.
//   Sidecar <stem>.meta.json holding {"T":..., "nu":..., "n_trials":...}.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "spikesync/errors.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

using json = nlohmann::json;

enum class EventFormat { csv, ndjson };

inline EventFormat format_from_path(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".ndjson" || ext == ".jsonl") return EventFormat::ndjson;
    return EventFormat::csv;
}

inline EventFormat parse_format(std::string_view name) {
    if (name == "csv") return EventFormat::csv;
    if (name == "ndjson") return EventFormat::ndjson;
    throw ArgumentError("unknown event format '" + std::string(name) + "' (expected csv or ndjson)");
}

struct ExperimentMeta {
    double duration = 0.0;
    int neuron_count = 0;
    std::optional<std::size_t> trial_count;
};

/// data.csv -> data.meta.json
inline std::filesystem::path sidecar_path(const std::filesystem::path& events) {
    auto p = events;
    p.replace_extension(".meta.json");
    return p;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline ExperimentMeta load_meta(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("metadata sidecar not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ParseError(std::string("metadata is not valid JSON: ") + e.what(), 1);
    }
    ExperimentMeta meta;
    if (!j.contains("T") || !j.contains("nu")) throw ValidationError("metadata must define T and nu");
    meta.duration = j.at("T").get<double>();
    meta.neuron_count = j.at("nu").get<int>();
    if (j.contains("n_trials")) meta.trial_count = j.at("n_trials").get<std::size_t>();
    return meta;
}

inline std::string meta_to_string(const ExperimentData& data) {
    json j = {{"T", data.duration}, {"nu", data.neuron_count}, {"n_trials", data.trial_count()}};
    return j.dump(2) + "\n";
}

/// Shortest fixed-notation text that parses back to exactly `v`.
inline std::string format_number(double v) {
    char buf[512];
    auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
    if (res.ec != std::errc{}) throw IoError("cannot format number");
    return {buf, res.ptr};
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(sep, start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <class T>
std::optional<T> parse_value(std::string_view s) {
    T v{};
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

struct RawEvent {
    long trial;
    long neuron;
    double time;
    std::size_t line;
};

inline std::vector<RawEvent> parse_csv(const std::string& text) {
    std::vector<RawEvent> events;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        const auto body = trim(line);
        if (body.empty()) continue;
        const auto cols = split(body, ',');
        if (!header_seen) {
            if (cols.size() < 3 || cols[0] != "trial" || cols[1] != "neuron" || cols[2] != "time" ||
                (cols.size() == 4 && cols[3] != "mark") || cols.size() > 4)
                throw ParseError("expected header 'trial,neuron,time'", lineno);
            header_seen = true;
            continue;
        }
        if (cols.size() < 3 || cols.size() > 4) throw ParseError("expected 3 columns", lineno);
        auto trial = parse_value<long>(cols[0]);
        auto neuron = parse_value<long>(cols[1]);
        auto time = parse_value<double>(cols[2]);
        if (!trial || !neuron || !time) throw ParseError("malformed row '" + std::string(body) + "'", lineno);
        events.push_back({*trial, *neuron, *time, lineno});
    }
    if (!header_seen && !events.empty()) throw ParseError("missing header", 1);
    return events;
}

inline std::vector<RawEvent> parse_ndjson(const std::string& text) {
    std::vector<RawEvent> events;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            const auto j = json::parse(line);
            if (!j.is_object() || !j.contains("trial") || !j.contains("neuron") || !j.contains("time"))
                throw ParseError("object must have trial, neuron and time", lineno);
            if (!j["trial"].is_number_integer() || !j["neuron"].is_number_integer() || !j["time"].is_number())
                throw ParseError("trial and neuron must be integers and time a number", lineno);
            events.push_back({j["trial"].get<long>(), j["neuron"].get<long>(), j["time"].get<double>(), lineno});
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
        }
    }
    return events;
}

}  // namespace detail

/// Builds validated ExperimentData from raw rows. Labels already inside
/// 1..nu are used as-is; any other labelling is re-indexed densely in
/// ascending label order.
inline ExperimentData assemble_experiment(const std::vector<detail::RawEvent>& events, const ExperimentMeta& meta) {
    if (!(meta.duration > 0.0)) throw ValidationError("T must be positive");
    if (meta.neuron_count <= 0) throw ValidationError("nu must be positive");

    std::set<long> labels;
    long max_trial = 0;
    for (const auto& e : events) {
        if (e.trial < 1) throw ValidationError("line " + std::to_string(e.line) + ": trial index must be >= 1");
        labels.insert(e.neuron);
        max_trial = std::max(max_trial, e.trial);
    }
    const std::size_t n_trials = meta.trial_count.value_or(static_cast<std::size_t>(max_trial));
    if (static_cast<std::size_t>(max_trial) > n_trials)
        throw ValidationError("trial " + std::to_string(max_trial) + " exceeds n_trials");

    ExperimentData data;
    data.duration = meta.duration;
    data.neuron_count = meta.neuron_count;
    std::map<long, int> index;
    const bool identity = labels.empty() || (*labels.begin() >= 1 && *labels.rbegin() <= meta.neuron_count);
    if (identity) {
        for (int i = 0; i < meta.neuron_count; ++i) {
            data.neuron_labels.push_back(i + 1);
            index[i + 1] = i;
        }
    } else {
        if (labels.size() > static_cast<std::size_t>(meta.neuron_count))
            throw ValidationError("file has " + std::to_string(labels.size()) + " distinct neurons but nu = " +
                                  std::to_string(meta.neuron_count));
        int next = 0;
        for (long l : labels) {
            index[l] = next++;
            data.neuron_labels.push_back(l);
        }
        // Unobserved neurons get fresh labels above the observed ones.
        long extra = *labels.rbegin();
        while (data.neuron_labels.size() < static_cast<std::size_t>(meta.neuron_count))
            data.neuron_labels.push_back(++extra);
    }

    data.trials.assign(n_trials, std::vector<SpikeTrain>(static_cast<std::size_t>(meta.neuron_count)));
    for (const auto& e : events) {
        if (!(e.time >= 0.0) || !(e.time < meta.duration))
            throw ValidationError("line " + std::to_string(e.line) + ": time " + format_number(e.time) +
                                  " outside [0, T)");
        const auto neuron = static_cast<std::size_t>(index.at(e.neuron));
        data.trials[static_cast<std::size_t>(e.trial - 1)][neuron].times.push_back(e.time);
    }
    for (std::size_t r = 0; r < data.trials.size(); ++r)
        for (std::size_t i = 0; i < data.trials[r].size(); ++i) {
            auto& t = data.trials[r][i].times;
            std::sort(t.begin(), t.end());
            if (std::adjacent_find(t.begin(), t.end()) != t.end())
                throw ValidationError("duplicate spike in trial " + std::to_string(r + 1) + ", neuron " +
                                      std::to_string(data.neuron_labels[i]));
        }
    data.validate();
    return data;
}

inline ExperimentData parse_experiment(const std::string& text, EventFormat format, const ExperimentMeta& meta) {
    auto events = format == EventFormat::csv ? detail::parse_csv(text) : detail::parse_ndjson(text);
    return assemble_experiment(events, meta);
}

/// Reads an event file. Without explicit metadata the sidecar next to the
/// file is used.
inline ExperimentData load_experiment(const std::filesystem::path& path, EventFormat format,
                                      std::optional<ExperimentMeta> meta = std::nullopt) {
    if (!std::filesystem::exists(path)) throw IoError("input file not found: " + path.string());
    if (!meta) meta = load_meta(sidecar_path(path));
    return parse_experiment(read_file(path), format, *meta);
}

inline std::string experiment_to_string(const ExperimentData& data, EventFormat format) {
    std::string out;
    if (format == EventFormat::csv) out += "trial,neuron,time\n";
    for (std::size_t r = 0; r < data.trials.size(); ++r)
        for (std::size_t i = 0; i < data.trials[r].size(); ++i)
            for (double t : data.trials[r][i].times) {
                const auto trial = std::to_string(r + 1);
                const auto neuron = std::to_string(data.label_of(static_cast<int>(i)));
                if (format == EventFormat::csv) {
                    out += trial + "," + neuron + "," + format_number(t) + "\n";
                } else {
                    out += "{\"trial\":" + trial + ",\"neuron\":" + neuron + ",\"time\":" + format_number(t) + "}\n";
                }
            }
    return out;
}

/// Writes the event file and its metadata sidecar.
inline void save_experiment(const ExperimentData& data, const std::filesystem::path& path, EventFormat format) {
    write_file(path, experiment_to_string(data, format));
    write_file(sidecar_path(path), meta_to_string(data));
}

}  // namespace spikesync
