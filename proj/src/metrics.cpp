#include "thermo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include "text_util.hpp"
#include "thermo/error.hpp"

namespace thermo::metrics {

namespace {

using Filter = std::function<bool(const PredictionRecord&)>;

std::vector<PredictionRecord> select(std::span<const PredictionRecord> records, const Filter& keep) {
  std::vector<PredictionRecord> out;
  for (const auto& r : records) {
    if (keep(r)) out.push_back(r);
  }
  return out;
}

Cell make_cell(std::span<const PredictionRecord> records) {
  Cell c;
  c.frames = records.size();
  if (!records.empty()) {
    c.mae = mae(records);
    c.rmse = rmse(records);
  }
  return c;
}

// Per-subject groups, keyed and ordered by subject_id.
std::map<std::string, std::vector<PredictionRecord>> by_subject(std::span<const PredictionRecord> records) {
  std::map<std::string, std::vector<PredictionRecord>> groups;
  for (const auto& r : records) groups[r.subject_id].push_back(r);
  return groups;
}

SubjectSpread spread(const std::vector<double>& values) {
  SubjectSpread s;
  s.subjects = values.size();
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(values.size()));
  return s;
}

std::string fmt(double v) { return detail::format_double(v); }
std::string fmt(const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string(); }

// Fixed-point text for SVG coordinates.
std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  return out;
}

constexpr double kChartW = 800.0, kChartH = 400.0, kMargin = 50.0;

std::string svg_open(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"400\" viewBox=\"0 0 800 400\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"400\" fill=\"white\"/>\n"
     << "<text x=\"400\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">"
     << title << "</text>\n"
     << "<line x1=\"50\" y1=\"350\" x2=\"750\" y2=\"350\" stroke=\"black\"/>\n"
     << "<line x1=\"50\" y1=\"50\" x2=\"50\" y2=\"350\" stroke=\"black\"/>\n";
  return os.str();
}

// Maps a value in [0, y_max] to the plot's vertical pixel coordinate.
double y_pixel(double value, double y_max) {
  const double clamped = std::clamp(value, 0.0, y_max);
  return kChartH - kMargin - clamped / y_max * (kChartH - 2 * kMargin);
}

std::string polyline(const std::vector<std::pair<double, double>>& pts, const char* color) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) os << (i ? " " : "") << coord(pts[i].first) << ',' << coord(pts[i].second);
  os << "\"/>\n";
  return os.str();
}

void write_series_svg(const DecaySeries& s, const std::filesystem::path& path) {
  const std::size_t n = s.points.size();
  auto x_pixel = [n](std::size_t i) {
    return kMargin + (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0) * (kChartW - 2 * kMargin);
  };
  std::vector<std::pair<double, double>> label_pts, pred_pts;
  for (std::size_t i = 0; i < n; ++i) {
    label_pts.emplace_back(x_pixel(i), y_pixel(s.points[i].label, 100.0));
    pred_pts.emplace_back(x_pixel(i), y_pixel(s.points[i].prediction, 100.0));
  }
  auto out = open_out(path);
  out << svg_open("Fatigue decay: " + s.subject_id) << polyline(label_pts, "black")
      << polyline(pred_pts, "red") << "</svg>\n";
}

void write_sorted_errors_svg(const SortedUserErrors& errors, const std::filesystem::path& path) {
  double y_max = 1.0;
  for (const auto& row : errors.rows) {
    y_max = std::max({y_max, row.resting_mae.value_or(0.0), row.fatigue_mae.value_or(0.0)});
  }
  const std::size_t n = errors.rows.size();
  auto out = open_out(path);
  out << svg_open("Per-subject MAE sorted by resting error");
  for (std::size_t i = 0; i < n; ++i) {
    const double x = kMargin + (static_cast<double>(i) + 0.5) / static_cast<double>(n) * (kChartW - 2 * kMargin);
    out << "<line x1=\"" << coord(x) << "\" y1=\"50\" x2=\"" << coord(x)
        << "\" y2=\"350\" stroke=\"#dddddd\"/>\n";
    if (errors.rows[i].fatigue_mae) {
      out << "<circle cx=\"" << coord(x) << "\" cy=\"" << coord(y_pixel(*errors.rows[i].fatigue_mae, y_max))
          << "\" r=\"4\" fill=\"red\"/>\n";
    }
    if (errors.rows[i].resting_mae) {
      out << "<circle cx=\"" << coord(x) << "\" cy=\"" << coord(y_pixel(*errors.rows[i].resting_mae, y_max))
          << "\" r=\"4\" fill=\"blue\"/>\n";
    }
  }
  out << "</svg>\n";
}

}  // namespace

double mae(std::span<const PredictionRecord> records) {
  require(!records.empty(), "mae of an empty record set");
  double total = 0.0;
  for (const auto& r : records) total += std::abs(r.error());
  return total / static_cast<double>(records.size());
}

double rmse(std::span<const PredictionRecord> records) {
  require(!records.empty(), "rmse of an empty record set");
  double total = 0.0;
  for (const auto& r : records) total += r.error() * r.error();
  return std::sqrt(total / static_cast<double>(records.size()));
}

SubjectSpread per_subject_stats(std::span<const PredictionRecord> records) {
  require(!records.empty(), "per-subject statistics of an empty record set");
  std::vector<double> values;
  for (const auto& [id, group] : by_subject(records)) values.push_back(mae(group));
  return spread(values);
}

SubjectSpread per_subject_rmse_stats(std::span<const PredictionRecord> records) {
  require(!records.empty(), "per-subject statistics of an empty record set");
  std::vector<double> values;
  for (const auto& [id, group] : by_subject(records)) values.push_back(rmse(group));
  return spread(values);
}

std::vector<StratifiedRow> stratified_report(std::span<const PredictionRecord> records,
                                             std::span<const dataset::SubjectRecord> subjects) {
  std::map<std::string, const dataset::SubjectRecord*> meta;
  for (const auto& s : subjects) meta[s.subject_id] = &s;
  for (const auto& r : records) {
    require(meta.count(r.subject_id) == 1, "no gender/glasses metadata for subject " + r.subject_id);
  }
  struct Group {
    const char* name;
    std::optional<dataset::Gender> gender;
    std::optional<bool> glasses;
  };
  const Group groups[] = {
      {"Men + Women", {}, {}},
      {"Men", dataset::Gender::Male, {}},
      {"Women", dataset::Gender::Female, {}},
      {"Men + Women no glasses", {}, false},
      {"Men no glasses", dataset::Gender::Male, false},
      {"Women no glasses", dataset::Gender::Female, false},
      {"Men + Women with glasses", {}, true},
      {"Men with glasses", dataset::Gender::Male, true},
      {"Women with glasses", dataset::Gender::Female, true},
  };
  std::vector<StratifiedRow> rows;
  for (const Group& g : groups) {
    auto in_group = [&](const PredictionRecord& r) {
      const auto* s = meta.at(r.subject_id);
      return (!g.gender || s->gender == *g.gender) && (!g.glasses || s->glasses == *g.glasses);
    };
    const auto all = select(records, in_group);
    if (all.empty()) continue;
    StratifiedRow row;
    row.group = g.name;
    row.combined = make_cell(all);
    row.fatigue = make_cell(select(all, [](const auto& r) { return r.condition == Condition::Fatigued; }));
    row.resting = make_cell(select(all, [](const auto& r) { return r.condition == Condition::Resting; }));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

DecaySeries decay_series(std::span<const PredictionRecord> records, const std::string& subject_id) {
  DecaySeries s;
  s.subject_id = subject_id;
  for (const auto& r : records) {
    if (r.subject_id == subject_id && r.condition == Condition::Fatigued) {
      s.points.push_back({r.frame_index, r.label, r.prediction});
    }
  }
  require(!s.points.empty(), "subject " + subject_id + " has no fatigued session");
  std::sort(s.points.begin(), s.points.end(),
            [](const SeriesPoint& a, const SeriesPoint& b) { return a.frame_index < b.frame_index; });
  std::vector<double> idx, labels, preds;
  for (const auto& p : s.points) {
    idx.push_back(static_cast<double>(p.frame_index));
    labels.push_back(p.label);
    preds.push_back(p.prediction);
  }
  const double n = static_cast<double>(idx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    mx += idx[i];
    my += preds[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    sxx += (idx[i] - mx) * (idx[i] - mx);
    sxy += (idx[i] - mx) * (preds[i] - my);
  }
  s.slope = sxx > 0.0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
  const auto r = pearson(preds, labels);
  s.correlation_defined = r.has_value();
  s.correlation = r.value_or(std::numeric_limits<double>::quiet_NaN());
  return s;
}

SortedUserErrors sorted_user_errors(std::span<const PredictionRecord> records) {
  SortedUserErrors out;
  for (const auto& [id, group] : by_subject(records)) {
    UserError row{id, {}, {}};
    const auto rest = select(group, [](const auto& r) { return r.condition == Condition::Resting; });
    const auto fat = select(group, [](const auto& r) { return r.condition == Condition::Fatigued; });
    if (!rest.empty()) row.resting_mae = mae(rest);
    if (!fat.empty()) row.fatigue_mae = mae(fat);
    out.rows.push_back(std::move(row));
  }
  // by_subject yields id order, so a stable sort on resting MAE breaks ties by id;
  // subjects without a resting session go last
  std::stable_sort(out.rows.begin(), out.rows.end(), [](const UserError& a, const UserError& b) {
    if (a.resting_mae.has_value() != b.resting_mae.has_value()) return a.resting_mae.has_value();
    return a.resting_mae.has_value() && *a.resting_mae < *b.resting_mae;
  });
  std::vector<double> rest, fat;
  for (const auto& row : out.rows) {
    if (row.resting_mae && row.fatigue_mae) {
      rest.push_back(*row.resting_mae);
      fat.push_back(*row.fatigue_mae);
    }
  }
  const auto r = pearson(rest, fat);
  out.correlation_defined = r.has_value();
  out.correlation = r.value_or(std::numeric_limits<double>::quiet_NaN());
  return out;
}

EvalReport build_report(std::span<const PredictionRecord> records,
                        std::span<const dataset::SubjectRecord> subjects) {
  require(!records.empty(), "cannot build a report from zero predictions");
  EvalReport report;
  report.frames = records.size();
  report.pooled_mae = mae(records);
  report.pooled_rmse = rmse(records);
  report.subject_mae = per_subject_stats(records);
  report.subject_rmse = per_subject_rmse_stats(records);
  report.table = stratified_report(records, subjects);
  report.user_errors = sorted_user_errors(records);
  for (const auto& [id, group] : by_subject(records)) {
    const bool has_fatigued = std::any_of(group.begin(), group.end(),
                                          [](const auto& r) { return r.condition == Condition::Fatigued; });
    if (has_fatigued) report.series.push_back(decay_series(group, id));
  }
  std::map<std::string, dataset::SubjectRecord> seen;
  for (const auto& s : subjects) seen.emplace(s.subject_id, s);
  for (const auto& [id, group] : by_subject(records)) report.subjects.push_back(seen.at(id));
  return report;
}

void export_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "series", ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + (dir / "series").string() + ": " + ec.message());

  {
    auto out = open_out(dir / "report.csv");
    out << kReportHeader << '\n';
    for (const auto& row : report.table) {
      out << row.group;
      for (const Cell* c : {&row.combined, &row.fatigue, &row.resting}) {
        out << ',' << fmt(c->mae) << ',' << fmt(c->rmse) << ',' << c->frames;
      }
      out << '\n';
    }
  }
  {
    auto out = open_out(dir / "summary.csv");
    out << "metric,value\n"
        << "frames," << report.frames << '\n'
        << "pooled_mae," << fmt(report.pooled_mae) << '\n'
        << "pooled_rmse," << fmt(report.pooled_rmse) << '\n'
        << "subject_mae_mean," << fmt(report.subject_mae.mean) << '\n'
        << "subject_mae_std," << fmt(report.subject_mae.std) << '\n'
        << "subject_rmse_mean," << fmt(report.subject_rmse.mean) << '\n'
        << "subject_rmse_std," << fmt(report.subject_rmse.std) << '\n'
        << "resting_fatigue_error_correlation,"
        << (report.user_errors.correlation_defined ? fmt(report.user_errors.correlation) : std::string("nan"))
        << '\n';
  }
  {
    std::map<std::string, const dataset::SubjectRecord*> meta;
    for (const auto& s : report.subjects) meta[s.subject_id] = &s;
    auto out = open_out(dir / "per_subject.csv");
    out << "rank,subject_id,gender,glasses,resting_mae,fatigue_mae\n";
    for (std::size_t i = 0; i < report.user_errors.rows.size(); ++i) {
      const auto& row = report.user_errors.rows[i];
      const auto* s = meta.at(row.subject_id);
      out << i << ',' << row.subject_id << ',' << dataset::to_string(s->gender) << ','
          << (s->glasses ? "true" : "false") << ',' << fmt(row.resting_mae) << ',' << fmt(row.fatigue_mae) << '\n';
    }
  }
  for (const auto& s : report.series) {
    auto out = open_out(dir / "series" / (s.subject_id + ".csv"));
    out << "frame_index,label,prediction\n";
    for (const auto& p : s.points) out << p.frame_index << ',' << fmt(p.label) << ',' << fmt(p.prediction) << '\n';
    out.close();
    write_series_svg(s, dir / "series" / (s.subject_id + ".svg"));
  }
  {
    auto out = open_out(dir / "series_summary.csv");
    out << "subject_id,frames,slope,correlation\n";
    for (const auto& s : report.series) {
      out << s.subject_id << ',' << s.points.size() << ',' << fmt(s.slope) << ','
          << (s.correlation_defined ? fmt(s.correlation) : std::string("nan")) << '\n';
    }
  }
  write_sorted_errors_svg(report.user_errors, dir / "sorted_errors.svg");
}

void write_predictions(std::span<const PredictionRecord> records,
                       std::span<const dataset::SubjectRecord> subjects,
                       const std::filesystem::path& path) {
  std::map<std::string, const dataset::SubjectRecord*> meta;
  for (const auto& s : subjects) meta[s.subject_id] = &s;
  auto out = open_out(path);
  out << kPredictionsHeader << '\n';
  for (const auto& r : records) {
    auto it = meta.find(r.subject_id);
    require(it != meta.end(), "no metadata for subject " + r.subject_id);
    out << r.subject_id << ',' << dataset::to_string(it->second->gender) << ','
        << (it->second->glasses ? "true" : "false") << ',' << labeling::to_string(r.condition) << ','
        << r.frame_index << ',' << fmt(r.label) << ',' << fmt(r.prediction) << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

PredictionSet read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::string raw;
  std::size_t line_no = 1;
  if (!std::getline(in, raw) || detail::trim_cr(raw) != kPredictionsHeader) {
    fail(ErrorCode::Format, path.string() + ":1: unexpected header");
  }
  PredictionSet set;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = detail::trim_cr(raw);
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    auto bad = [&](const std::string& what) {
      fail(ErrorCode::Format, path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    if (f.size() != 7) bad("expected 7 fields");
    dataset::SubjectRecord s;
    s.subject_id = f[0];
    try {
      s.gender = dataset::parse_gender(f[1]);
    } catch (const Error& e) {
      bad(e.what());
    }
    if (f[2] != "true" && f[2] != "false") bad("glasses must be true or false");
    s.glasses = f[2] == "true";
    PredictionRecord r;
    r.subject_id = f[0];
    try {
      r.condition = labeling::parse_condition(f[3]);
    } catch (const Error& e) {
      bad(e.what());
    }
    if (!detail::parse_int(f[4], r.frame_index)) bad("bad frame_index");
    if (!detail::parse_double(f[5], r.label) || r.label < 0.0 || r.label > 100.0) bad("label outside [0,100]");
    if (!detail::parse_double(f[6], r.prediction) || !std::isfinite(r.prediction)) bad("prediction not finite");
    auto it = seen.find(s.subject_id);
    if (it == seen.end()) {
      seen[s.subject_id] = set.subjects.size();
      set.subjects.push_back(s);
    } else if (!(set.subjects[it->second] == s)) {
      bad("conflicting attributes for subject " + s.subject_id);
    }
    set.records.push_back(std::move(r));
  }
  return set;
}

PredictionSet read_prediction_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) fail(ErrorCode::Io, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "predictions.csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(ErrorCode::InvalidInput, "no predictions.csv found under " + dir.string());
  PredictionSet all;
  for (const auto& f : files) {
    PredictionSet part = read_predictions(f);
    all.records.insert(all.records.end(), part.records.begin(), part.records.end());
    for (const auto& s : part.subjects) {
      auto it = std::find_if(all.subjects.begin(), all.subjects.end(),
                             [&](const auto& x) { return x.subject_id == s.subject_id; });
      if (it == all.subjects.end()) all.subjects.push_back(s);
      else require(*it == s, "conflicting attributes for subject " + s.subject_id + " across prediction files");
    }
  }
  return all;
}

}  // namespace thermo::metrics
