#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dgrcl/common.hpp"

namespace dgrcl {

// Feature channel order within a panel row.
enum Channel : std::size_t { OPEN = 0, HIGH = 1, LOW = 2, CLOSE = 3, VOLUME = 4 };
inline constexpr std::size_t kChannels = 5;

// N tickers x T trading days x 5 channels, row-major.
struct StockPanel {
    std::vector<std::string> tickers;
    std::vector<std::string> dates;
    std::vector<double> values;

    std::size_t n_stocks() const { return tickers.size(); }
    std::size_t n_days() const { return dates.size(); }

    double at(std::size_t stock, std::size_t day, std::size_t channel) const {
        return values[(stock * dates.size() + day) * kChannels + channel];
    }
    double& at(std::size_t stock, std::size_t day, std::size_t channel) {
        return values[(stock * dates.size() + day) * kChannels + channel];
    }
    double close(std::size_t stock, std::size_t day) const { return at(stock, day, CLOSE); }
    double volume(std::size_t stock, std::size_t day) const { return at(stock, day, VOLUME); }
};

// Static sector-industry relation encodings. Logically an N x N x R binary
// tensor, stored sparsely; symmetric in the node axes with a zero diagonal.
class RelationTensor {
public:
    RelationTensor() = default;
    RelationTensor(std::size_t n_nodes, std::vector<std::string> names)
        : n_(n_nodes), relation_names_(std::move(names)) {}

    std::size_t n_nodes() const { return n_; }
    std::size_t n_relations() const { return relation_names_.size(); }
    const std::vector<std::string>& relation_names() const { return relation_names_; }

    void add(std::size_t i, std::size_t j, std::size_t relation) {
        if (i == j) throw SelfRelation("relation tensor: self relation on node " + std::to_string(i));
        auto key = canonical(i, j);
        auto& rels = entries_[key];
        if (!std::binary_search(rels.begin(), rels.end(), relation)) {
            rels.insert(std::lower_bound(rels.begin(), rels.end(), relation), relation);
        }
    }

    bool entry(std::size_t i, std::size_t j, std::size_t relation) const {
        if (i == j) return false;
        auto it = entries_.find(canonical(i, j));
        if (it == entries_.end()) return false;
        return std::binary_search(it->second.begin(), it->second.end(), relation);
    }

    // Number of relation types shared by the pair.
    std::size_t count(std::size_t i, std::size_t j) const {
        if (i == j) return 0;
        auto it = entries_.find(canonical(i, j));
        return it == entries_.end() ? 0 : it->second.size();
    }

    template <typename Fn>
    void for_each_pair(Fn&& fn) const {
        for (const auto& [key, rels] : entries_) fn(key.first, key.second, rels);
    }

    bool operator==(const RelationTensor& other) const {
        return n_ == other.n_ && relation_names_ == other.relation_names_ &&
               entries_ == other.entries_;
    }

private:
    static std::pair<std::size_t, std::size_t> canonical(std::size_t i, std::size_t j) {
        return i < j ? std::pair{i, j} : std::pair{j, i};
    }

    std::size_t n_ = 0;
    std::vector<std::string> relation_names_;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> entries_;
};

// One labeled prediction window: features are the delta days before
// `end_day`, the label compares close(end_day + 1) against close(end_day).
struct LabeledWindow {
    std::size_t stock;
    std::size_t end_day;
};

struct LabeledWindowSet {
    std::size_t delta = 0;
    std::vector<LabeledWindow> windows;
    std::vector<std::uint8_t> labels;
};

struct SplitRanges {
    // Half-open ranges of anchor day indices.
    std::size_t train_begin, train_end;
    std::size_t valid_begin, valid_end;
    std::size_t test_begin, test_end;
};

namespace detail {

inline double parse_number(const std::string& field, const std::string& context) {
    double out = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last)
        throw MalformedRow(context + ": non-numeric field '" + field + "'");
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline bool looks_like_iso_date(const std::string& s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
    for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
        if (s[i] < '0' || s[i] > '9') return false;
    return true;
}

struct RawSeries {
    std::string ticker;
    std::vector<std::string> dates;
    std::vector<std::array<double, kChannels>> rows;
};

inline RawSeries parse_ticker_csv(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw MalformedRow("cannot open " + file.string());
    RawSeries series;
    series.ticker = file.stem().string();

    std::string line;
    if (!std::getline(in, line)) throw MalformedRow(file.string() + ": empty file");
    auto header = split_csv_line(line);
    const std::vector<std::string> expected = {"date", "open", "high", "low", "close", "volume"};
    if (std::vector<std::string>(header.begin(), header.end()) != expected)
        throw MalformedRow(file.string() + ": bad header");

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        const std::string ctx = file.string() + ":" + std::to_string(lineno);
        if (fields.size() != 6) throw MalformedRow(ctx + ": expected 6 fields");
        if (!looks_like_iso_date(fields[0])) throw MalformedRow(ctx + ": bad date '" + fields[0] + "'");
        std::array<double, kChannels> row{};
        for (std::size_t c = 0; c < kChannels; ++c) row[c] = parse_number(fields[c + 1], ctx);

        for (std::size_t c = OPEN; c <= CLOSE; ++c)
            if (row[c] <= 0.0) throw NegativePrice(ctx + ": nonpositive price");
        if (row[VOLUME] < 0.0) throw NegativePrice(ctx + ": negative volume");
        if (row[HIGH] < std::max(row[OPEN], row[CLOSE]))
            throw MalformedRow(ctx + ": high below open/close");
        if (row[LOW] > std::min(row[OPEN], row[CLOSE]))
            throw MalformedRow(ctx + ": low above open/close");

        if (!series.dates.empty() && fields[0] <= series.dates.back())
            throw MalformedRow(ctx + ": dates not strictly increasing");
        series.dates.push_back(fields[0]);
        series.rows.push_back(row);
    }
    if (series.dates.empty()) throw MalformedRow(file.string() + ": no data rows");
    return series;
}

}  // namespace detail

// Ingests one CSV per ticker. The shared calendar is the union of observed
// trading days inside the common date span (latest first date to earliest
// last date); in-span gaps are forward-filled with the previous close and
// zero volume. Tickers missing more than 20% of calendar days are dropped
// with a warning.
inline StockPanel load_panel(const std::filesystem::path& dir, double max_missing_frac = 0.2) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw CalendarMismatch("load_panel: no csv files in " + dir.string());

    std::vector<detail::RawSeries> all;
    all.reserve(files.size());
    for (const auto& f : files) all.push_back(detail::parse_ticker_csv(f));
    std::sort(all.begin(), all.end(),
              [](const auto& a, const auto& b) { return a.ticker < b.ticker; });

    // Iterate span + calendar until the kept set is stable.
    std::vector<bool> keep(all.size(), true);
    std::vector<std::string> calendar;
    for (;;) {
        std::string span_begin, span_end;
        bool first = true;
        for (std::size_t s = 0; s < all.size(); ++s) {
            if (!keep[s]) continue;
            if (first) {
                span_begin = all[s].dates.front();
                span_end = all[s].dates.back();
                first = false;
            } else {
                span_begin = std::max(span_begin, all[s].dates.front());
                span_end = std::min(span_end, all[s].dates.back());
            }
        }
        if (first || span_begin > span_end)
            throw CalendarMismatch("load_panel: tickers share no common date span");

        std::set<std::string> days;
        for (std::size_t s = 0; s < all.size(); ++s) {
            if (!keep[s]) continue;
            for (const auto& d : all[s].dates)
                if (d >= span_begin && d <= span_end) days.insert(d);
        }
        calendar.assign(days.begin(), days.end());
        if (calendar.empty())
            throw CalendarMismatch("load_panel: empty shared calendar");

        bool dropped = false;
        for (std::size_t s = 0; s < all.size(); ++s) {
            if (!keep[s]) continue;
            std::size_t present = 0;
            std::set<std::string> own(all[s].dates.begin(), all[s].dates.end());
            for (const auto& d : calendar)
                if (own.count(d)) ++present;
            const double missing =
                1.0 - static_cast<double>(present) / static_cast<double>(calendar.size());
            if (missing > max_missing_frac) {
                std::cerr << "load_panel: dropping " << all[s].ticker << " (missing "
                          << missing * 100.0 << "% of calendar days)\n";
                keep[s] = false;
                dropped = true;
            }
        }
        if (!dropped) break;
    }

    StockPanel panel;
    panel.dates = calendar;
    for (std::size_t s = 0; s < all.size(); ++s)
        if (keep[s]) panel.tickers.push_back(all[s].ticker);
    panel.values.assign(panel.tickers.size() * calendar.size() * kChannels, 0.0);

    std::size_t out_idx = 0;
    for (std::size_t s = 0; s < all.size(); ++s) {
        if (!keep[s]) continue;
        const auto& series = all[s];
        std::size_t cursor = 0;
        double last_close = 0.0;
        bool seen = false;
        for (std::size_t t = 0; t < calendar.size(); ++t) {
            while (cursor < series.dates.size() && series.dates[cursor] < calendar[t]) {
                last_close = series.rows[cursor][CLOSE];
                seen = true;
                ++cursor;
            }
            if (cursor < series.dates.size() && series.dates[cursor] == calendar[t]) {
                for (std::size_t c = 0; c < kChannels; ++c)
                    panel.at(out_idx, t, c) = series.rows[cursor][c];
                last_close = series.rows[cursor][CLOSE];
                seen = true;
                ++cursor;
            } else {
                if (!seen)
                    throw CalendarMismatch("load_panel: " + series.ticker +
                                           " has no observation at or before " + calendar[t]);
                panel.at(out_idx, t, OPEN) = last_close;
                panel.at(out_idx, t, HIGH) = last_close;
                panel.at(out_idx, t, LOW) = last_close;
                panel.at(out_idx, t, CLOSE) = last_close;
                panel.at(out_idx, t, VOLUME) = 0.0;
            }
        }
        ++out_idx;
    }
    return panel;
}

// One window per (stock, anchor day t) with t in [delta, T-2]; label is 1
// iff close(t+1) - close(t) > 0. Windows are emitted day-major.
inline LabeledWindowSet compute_labels(const StockPanel& panel, std::size_t delta) {
    const std::size_t T = panel.n_days();
    if (T < delta + 1)
        throw TooShort("compute_labels: " + std::to_string(T) + " days < delta+1");
    LabeledWindowSet out;
    out.delta = delta;
    if (T < delta + 2) return out;  // no anchor has a next day
    for (std::size_t t = delta; t + 1 < T; ++t) {
        for (std::size_t i = 0; i < panel.n_stocks(); ++i) {
            out.windows.push_back({i, t});
            const double diff = panel.close(i, t + 1) - panel.close(i, t);
            out.labels.push_back(diff > 0.0 ? 1 : 0);
        }
    }
    return out;
}

struct SplitCounts {
    std::size_t train, valid, test;
};

// Floor for train and valid, remainder to test. Every split must be
// non-empty.
inline SplitCounts split_counts(std::size_t effective_days, double train_frac, double valid_frac,
                                double test_frac) {
    if (train_frac <= 0.0 || valid_frac <= 0.0 || test_frac <= 0.0)
        throw BadFractions("split: fractions must be positive");
    if (std::abs(train_frac + valid_frac + test_frac - 1.0) > 1e-9)
        throw BadFractions("split: fractions must sum to 1");
    const auto train = static_cast<std::size_t>(static_cast<double>(effective_days) * train_frac);
    const auto valid = static_cast<std::size_t>(static_cast<double>(effective_days) * valid_frac);
    if (train + valid > effective_days)
        throw EmptySplit("split: fractions overflow the day count");
    const std::size_t test = effective_days - train - valid;
    if (train == 0 || valid == 0 || test == 0)
        throw EmptySplit("split: a split range is empty");
    return {train, valid, test};
}

// Contiguous chronological anchor-day ranges over the effective days
// [delta, T-2].
inline SplitRanges split_chronological(const StockPanel& panel, std::size_t delta,
                                       double train_frac, double valid_frac, double test_frac) {
    const std::size_t T = panel.n_days();
    if (T < delta + 2) throw TooShort("split: panel too short for any effective day");
    const std::size_t effective = T - 1 - delta;
    auto counts = split_counts(effective, train_frac, valid_frac, test_frac);
    SplitRanges r{};
    r.train_begin = delta;
    r.train_end = delta + counts.train;
    r.valid_begin = r.train_end;
    r.valid_end = r.valid_begin + counts.valid;
    r.test_begin = r.valid_end;
    r.test_end = r.test_begin + counts.test;
    return r;
}

// Anchors whose label day t+1 belongs to the next split are dropped to
// prevent leakage. `next_begin` of 0 means "no later split".
inline std::vector<std::size_t> split_anchor_days(std::size_t begin, std::size_t end,
                                                  std::size_t next_begin) {
    std::vector<std::size_t> days;
    for (std::size_t t = begin; t < end; ++t) {
        if (next_begin != 0 && t + 1 >= next_begin) continue;
        days.push_back(t);
    }
    return days;
}

// Relation triples: csv header ticker_a,ticker_b,relation.
inline RelationTensor load_relations(const std::filesystem::path& file, const StockPanel& panel) {
    std::ifstream in(file);
    if (!in) throw MalformedRow("cannot open " + file.string());

    std::map<std::string, std::size_t> ticker_index;
    for (std::size_t i = 0; i < panel.tickers.size(); ++i) ticker_index[panel.tickers[i]] = i;

    std::string line;
    if (!std::getline(in, line)) throw MalformedRow(file.string() + ": empty file");
    if (detail::split_csv_line(line) != std::vector<std::string>{"ticker_a", "ticker_b", "relation"})
        throw MalformedRow(file.string() + ": bad header");

    struct Triple {
        std::size_t a, b;
        std::string relation;
    };
    std::vector<Triple> triples;
    std::set<std::string> names;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        const std::string ctx = file.string() + ":" + std::to_string(lineno);
        if (fields.size() != 3) throw MalformedRow(ctx + ": expected 3 fields");
        auto ia = ticker_index.find(fields[0]);
        auto ib = ticker_index.find(fields[1]);
        if (ia == ticker_index.end()) throw UnknownTicker(ctx + ": " + fields[0]);
        if (ib == ticker_index.end()) throw UnknownTicker(ctx + ": " + fields[1]);
        if (ia->second == ib->second) throw SelfRelation(ctx + ": " + fields[0]);
        triples.push_back({ia->second, ib->second, fields[2]});
        names.insert(fields[2]);
    }

    std::vector<std::string> sorted_names(names.begin(), names.end());
    std::map<std::string, std::size_t> name_index;
    for (std::size_t r = 0; r < sorted_names.size(); ++r) name_index[sorted_names[r]] = r;

    RelationTensor tensor(panel.n_stocks(), sorted_names);
    for (const auto& t : triples) tensor.add(t.a, t.b, name_index[t.relation]);
    return tensor;
}

}  // namespace dgrcl
