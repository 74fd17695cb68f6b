#pragma once

// Reports computed from trajectory dumps alone: strict keyphrase usage per
// iteration, user-pattern counts, the log10-w histogram with regime
// boundaries, and accuracy per weight regime.

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlr/io.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/optimizer.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/svg.hpp"

namespace ctrlr::analysis {

inline constexpr double kLowBoundaryLog10 = -6.0;
inline constexpr double kHighBoundaryLog10 = -1.0;

struct Pattern {
  std::string name;
  TokenSeq tokens;
};

inline bool uses_constraint(const GuidedTrajectory& t, const KeyphraseConstraint& c) {
  for (const auto& p : c.phrases)
    if (contains_phrase(t.tokens, p)) return true;
  return false;
}

struct UsageRow {
  std::size_t iteration = 0;
  std::size_t trajectories = 0;
  std::vector<std::size_t> hits;  // per constraint or pattern
};

// Fraction of trajectories per iteration containing a phrase of each constraint.
inline std::vector<UsageRow> keyphrase_usage(const std::vector<GuidedTrajectory>& ts,
                                             const std::vector<KeyphraseConstraint>& cs) {
  std::map<std::size_t, UsageRow> rows;
  for (const auto& t : ts) {
    auto& r = rows[t.iteration];
    r.iteration = t.iteration;
    r.hits.resize(cs.size(), 0);
    ++r.trajectories;
    for (std::size_t i = 0; i < cs.size(); ++i) r.hits[i] += uses_constraint(t, cs[i]) ? 1 : 0;
  }
  std::vector<UsageRow> out;
  for (auto& [k, r] : rows) out.push_back(std::move(r));
  return out;
}

// Contiguous occurrences of each pattern, counted per iteration.
inline std::vector<UsageRow> pattern_counts(const std::vector<GuidedTrajectory>& ts,
                                            const std::vector<Pattern>& patterns) {
  std::map<std::size_t, UsageRow> rows;
  for (const auto& t : ts) {
    auto& r = rows[t.iteration];
    r.iteration = t.iteration;
    r.hits.resize(patterns.size(), 0);
    ++r.trajectories;
    for (std::size_t i = 0; i < patterns.size(); ++i) {
      const auto& p = patterns[i].tokens;
      for (std::size_t k = 0; !p.empty() && k + p.size() <= t.tokens.size(); ++k)
        if (std::equal(p.begin(), p.end(), t.tokens.begin() + static_cast<std::ptrdiff_t>(k))) ++r.hits[i];
    }
  }
  std::vector<UsageRow> out;
  for (auto& [k, r] : rows) out.push_back(std::move(r));
  return out;
}

struct HistogramBin {
  int decade = 0;  // covers log10 w in [decade, decade + 1)
  std::size_t count = 0;
  std::size_t correct = 0;
  double mean_accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : NAN; }
};

inline WeightRegime bin_regime(int decade) {
  if (decade + 1 <= kLowBoundaryLog10) return WeightRegime::Low;
  if (decade + 1 <= kHighBoundaryLog10) return WeightRegime::Mid;
  return WeightRegime::High;
}

inline std::string to_string(WeightRegime r) {
  switch (r) {
    case WeightRegime::Low: return "low";
    case WeightRegime::Mid: return "mid";
    case WeightRegime::High: return "high";
  }
  return "?";
}

// One bin per decade of w, from the smallest to the largest observed.
inline std::vector<HistogramBin> weight_histogram(const std::vector<GuidedTrajectory>& ts) {
  std::map<int, HistogramBin> bins;
  for (const auto& t : ts) {
    const int d = static_cast<int>(std::floor(t.log_weight / std::log(10.0)));
    auto& b = bins[d];
    b.decade = d;
    ++b.count;
    b.correct += t.correct ? 1 : 0;
  }
  std::vector<HistogramBin> out;
  if (bins.empty()) return out;
  for (int d = bins.begin()->first; d <= bins.rbegin()->first; ++d) {
    auto it = bins.find(d);
    out.push_back(it == bins.end() ? HistogramBin{d, 0, 0} : it->second);
  }
  return out;
}

struct RegimeRow {
  WeightRegime regime = WeightRegime::High;
  std::size_t count = 0;
  std::size_t correct = 0;
  double reward_sum = 0.0;
  double mean_accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : NAN; }
  double mean_reward() const { return count ? reward_sum / static_cast<double>(count) : NAN; }
};

// Low: w < 1e-6, Mid: 1e-6 <= w <= 1e-1, High: w > 1e-1.
inline std::vector<RegimeRow> accuracy_by_regime(const std::vector<GuidedTrajectory>& ts) {
  std::vector<RegimeRow> rows{{WeightRegime::Low}, {WeightRegime::Mid}, {WeightRegime::High}};
  for (const auto& t : ts) {
    auto& r = rows[static_cast<std::size_t>(classify_weight(t.log_weight))];
    ++r.count;
    r.correct += t.correct ? 1 : 0;
    r.reward_sum += t.reward;
  }
  return rows;
}

inline std::string rate(std::size_t hits, std::size_t n) {
  return n ? io::format_double(static_cast<double>(hits) / static_cast<double>(n)) : "nan";
}

struct Report {
  std::vector<std::pair<std::string, std::string>> files;  // name, content
};

inline Report build_report(const std::vector<GuidedTrajectory>& ts, const std::vector<KeyphraseConstraint>& cs,
                           const std::vector<Pattern>& patterns) {
  Report rep;
  {
    const auto rows = keyphrase_usage(ts, cs);
    std::ostringstream csv;
    csv << "# ctrlr-keyphrase-usage v1\niteration,trajectories";
    for (const auto& c : cs) csv << ",usage[" << c.id << "]";
    csv << '\n';
    std::vector<svg::Series> series(cs.size());
    for (std::size_t i = 0; i < cs.size(); ++i) series[i].name = cs[i].id;
    for (const auto& r : rows) {
      csv << r.iteration << ',' << r.trajectories;
      for (std::size_t i = 0; i < cs.size(); ++i) {
        csv << ',' << rate(r.hits[i], r.trajectories);
        series[i].x.push_back(static_cast<double>(r.iteration));
        series[i].y.push_back(static_cast<double>(r.hits[i]) / static_cast<double>(r.trajectories));
      }
      csv << '\n';
    }
    rep.files.emplace_back("keyphrase_usage.csv", csv.str());
    rep.files.emplace_back("keyphrase_usage.svg",
                           svg::line_chart("Strict keyphrase usage", "iteration", "fraction of trajectories", series));
  }
  if (!patterns.empty()) {
    const auto rows = pattern_counts(ts, patterns);
    std::ostringstream csv;
    csv << "# ctrlr-pattern-usage v1\niteration,trajectories";
    for (const auto& p : patterns) csv << ",count[" << p.name << "],per_trajectory[" << p.name << "]";
    csv << '\n';
    std::vector<svg::Series> series(patterns.size());
    double top = 1.0;
    for (std::size_t i = 0; i < patterns.size(); ++i) series[i].name = patterns[i].name;
    for (const auto& r : rows) {
      csv << r.iteration << ',' << r.trajectories;
      for (std::size_t i = 0; i < patterns.size(); ++i) {
        const double per = static_cast<double>(r.hits[i]) / static_cast<double>(r.trajectories);
        csv << ',' << r.hits[i] << ',' << io::format_double(per);
        series[i].x.push_back(static_cast<double>(r.iteration));
        series[i].y.push_back(per);
        top = std::max(top, per);
      }
      csv << '\n';
    }
    rep.files.emplace_back("pattern_usage.csv", csv.str());
    rep.files.emplace_back("pattern_usage.svg",
                           svg::line_chart("Pattern occurrences", "iteration", "per trajectory", series, 0.0, top));
  }
  {
    const auto bins = weight_histogram(ts);
    std::ostringstream csv;
    csv << "# ctrlr-weight-histogram v1\nlog10_w_lo,log10_w_hi,regime,count,mean_accuracy\n";
    std::vector<double> edges, heights;
    for (const auto& b : bins) {
      csv << b.decade << ',' << b.decade + 1 << ',' << to_string(bin_regime(b.decade)) << ',' << b.count << ','
          << io::format_double(b.mean_accuracy()) << '\n';
      edges.push_back(b.decade);
      heights.push_back(static_cast<double>(b.count));
    }
    if (!bins.empty()) edges.push_back(bins.back().decade + 1);
    rep.files.emplace_back("weight_histogram.csv", csv.str());
    if (edges.size() >= 2)
      rep.files.emplace_back(
          "weight_histogram.svg",
          svg::histogram("Trajectory counts by weight", "log10 w", "trajectories", edges, heights,
                         {{kLowBoundaryLog10, "1e-6"}, {kHighBoundaryLog10, "1e-1"}}));
  }
  {
    const auto rows = accuracy_by_regime(ts);
    std::ostringstream csv;
    csv << "# ctrlr-accuracy-vs-weight v1\nregime,w_range,count,mean_accuracy,mean_reward\n";
    const char* ranges[] = {"w<1e-6", "1e-6<=w<=1e-1", "w>1e-1"};
    std::vector<svg::Bar> bars;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      csv << to_string(rows[i].regime) << ',' << ranges[i] << ',' << rows[i].count << ','
          << io::format_double(rows[i].mean_accuracy()) << ',' << io::format_double(rows[i].mean_reward()) << '\n';
      bars.push_back({std::string(ranges[i]) + " (n=" + std::to_string(rows[i].count) + ")", rows[i].mean_accuracy()});
    }
    rep.files.emplace_back("accuracy_vs_weight.csv", csv.str());
    rep.files.emplace_back("accuracy_vs_weight.svg", svg::bar_chart("Mean accuracy by weight regime", "accuracy", bars));
  }
  return rep;
}

inline void write_report(const Report& rep, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : rep.files) io::write_file((std::filesystem::path(dir) / name).string(), content);
}

}  // namespace ctrlr::analysis
