#pragma once

// Plain-text formats: MI trace and trajectory CSVs, dataset exports, and
// named-tensor checkpoints. Doubles are written in shortest round-trip form
// unless noted, so parse(serialize(x)) reproduces x bitwise.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mimax/encoder.hpp"
#include "mimax/errors.hpp"
#include "mimax/metrics.hpp"
#include "mimax/synth_data.hpp"
#include "mimax/tensor.hpp"

namespace mimax {

inline constexpr std::string_view kTraceHeader =
    "epoch,mi_cos_dv,mi_infonce,mi_jsd,mean_pairwise_cos,nn_gap_mean,"
    "nn_gap_min,nn_gap_max,nn_gap_sd";
inline constexpr std::string_view kTrajectoryHeader = "epoch,cluster,z0,z1,z2";
inline constexpr std::string_view kDatasetHeader = "x0,x1,label";
inline constexpr std::string_view kViewsHeader = "x1a,x1b,x2a,x2b,label";
inline constexpr std::string_view kCheckpointMagic = "mimax-checkpoint 1";

// ---------------------------------------------------------------------------
// Numbers and lines

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// Fixed 17 significant digits (dataset exports).
inline std::string format_double17(double v) {
  char buf[64];
  const auto r =
      std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s, std::size_t line,
                           std::string_view field) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
    throw ParseError("field '" + std::string(field) + "': expected a number, got '" +
                         std::string(s) + "'",
                     line);
  }
  return v;
}

inline long long parse_int(std::string_view s, std::size_t line,
                           std::string_view field) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
    throw ParseError("field '" + std::string(field) +
                         "': expected an integer, got '" + std::string(s) + "'",
                     line);
  }
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Lines without terminators; a trailing '\r' is dropped and a final empty
/// line (from the closing newline) is not reported.
inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (auto& l : lines)
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
  return lines;
}

namespace detail {

inline std::vector<std::string_view> csv_fields(std::string_view line,
                                                std::size_t expected,
                                                std::size_t line_no) {
  auto f = split(line, ',');
  if (f.size() != expected) {
    throw ParseError("expected " + std::to_string(expected) + " fields, got " +
                         std::to_string(f.size()),
                     line_no);
  }
  return f;
}

inline void require_header(const std::vector<std::string_view>& lines,
                           std::string_view header) {
  if (lines.empty()) throw ParseError("empty input, missing header", 1);
  if (lines[0] != header) {
    throw ParseError("unexpected header '" + std::string(lines[0]) +
                         "', expected '" + std::string(header) + "'",
                     1);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MI trace

inline std::string trace_csv(const std::vector<MITraceRow>& rows) {
  std::string out(kTraceHeader);
  out += '\n';
  auto opt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  for (const MITraceRow& r : rows) {
    out += std::to_string(r.epoch) + ',' + opt(r.mi_cos_dv) + ',' +
           opt(r.mi_infonce) + ',' + opt(r.mi_jsd) + ',' +
           format_double(r.mean_pairwise_cos) + ',' +
           format_double(r.nn_gap.mean) + ',' + format_double(r.nn_gap.min) +
           ',' + format_double(r.nn_gap.max) + ',' + format_double(r.nn_gap.sd) +
           '\n';
  }
  return out;
}

inline std::vector<MITraceRow> parse_trace_csv(std::string_view text) {
  const auto lines = split_lines(text);
  detail::require_header(lines, kTraceHeader);
  static constexpr std::string_view names[] = {
      "epoch",       "mi_cos_dv",  "mi_infonce", "mi_jsd",   "mean_pairwise_cos",
      "nn_gap_mean", "nn_gap_min", "nn_gap_max", "nn_gap_sd"};
  std::vector<MITraceRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t ln = i + 1;
    const auto f = detail::csv_fields(lines[i], 9, ln);
    MITraceRow r;
    const long long epoch = parse_int(f[0], ln, names[0]);
    if (epoch < 0) throw ParseError("epoch must be >= 0", ln);
    r.epoch = static_cast<std::size_t>(epoch);
    if (!rows.empty() && r.epoch <= rows.back().epoch) {
      throw ParseError("epochs must be strictly increasing", ln);
    }
    auto opt = [&](std::size_t k) -> std::optional<double> {
      if (f[k].empty()) return std::nullopt;
      return parse_double(f[k], ln, names[k]);
    };
    r.mi_cos_dv = opt(1);
    r.mi_infonce = opt(2);
    r.mi_jsd = opt(3);
    r.mean_pairwise_cos = parse_double(f[4], ln, names[4]);
    double* gaps[] = {&r.nn_gap.mean, &r.nn_gap.min, &r.nn_gap.max, &r.nn_gap.sd};
    for (std::size_t k = 0; k < 4; ++k) {
      *gaps[k] = parse_double(f[5 + k], ln, names[5 + k]);
      if (!(*gaps[k] >= 0.0 && *gaps[k] <= 180.0)) {
        throw ParseError(std::string(names[5 + k]) + " outside [0, 180]", ln);
      }
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Center trajectories (row `e` of `centers` is epoch e)

inline std::string trajectory_csv(const std::vector<Tensor>& centers) {
  std::string out(kTrajectoryHeader);
  out += '\n';
  for (std::size_t e = 0; e < centers.size(); ++e) {
    const Tensor& c = centers[e];
    for (std::size_t k = 0; k < c.rows(); ++k) {
      out += std::to_string(e) + ',' + std::to_string(k);
      for (std::size_t j = 0; j < c.cols(); ++j) out += ',' + format_double(c.at(k, j));
      out += '\n';
    }
  }
  return out;
}

inline std::vector<Tensor> parse_trajectory_csv(std::string_view text) {
  const auto lines = split_lines(text);
  detail::require_header(lines, kTrajectoryHeader);
  std::vector<std::vector<double>> per_epoch;
  std::vector<std::size_t> rows_per_epoch;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t ln = i + 1;
    const auto f = detail::csv_fields(lines[i], 5, ln);
    const auto epoch = static_cast<std::size_t>(parse_int(f[0], ln, "epoch"));
    const auto cluster = static_cast<std::size_t>(parse_int(f[1], ln, "cluster"));
    if (epoch == per_epoch.size()) {
      per_epoch.emplace_back();
      rows_per_epoch.push_back(0);
    }
    if (epoch + 1 != per_epoch.size() || cluster != rows_per_epoch.back()) {
      throw ParseError("rows must be ordered by epoch then cluster", ln);
    }
    double ss = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double v = parse_double(f[2 + j], ln, "z");
      ss += v * v;
      per_epoch.back().push_back(v);
    }
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
      throw ParseError("center embedding is not unit length", ln);
    }
    ++rows_per_epoch.back();
  }
  std::vector<Tensor> out;
  for (std::size_t e = 0; e < per_epoch.size(); ++e) {
    out.emplace_back(Shape{rows_per_epoch[e], 3}, std::move(per_epoch[e]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

inline std::string dataset_csv(const Dataset& d) {
  std::string out(kDatasetHeader);
  out += '\n';
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    out += format_double17(d.x.at(i, 0)) + ',' + format_double17(d.x.at(i, 1)) +
           ',' + std::to_string(d.labels[i]) + '\n';
  }
  return out;
}

inline Dataset parse_dataset_csv(std::string_view text) {
  const auto lines = split_lines(text);
  detail::require_header(lines, kDatasetHeader);
  Dataset d;
  std::vector<double> x;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t ln = i + 1;
    const auto f = detail::csv_fields(lines[i], 3, ln);
    x.push_back(parse_double(f[0], ln, "x0"));
    x.push_back(parse_double(f[1], ln, "x1"));
    d.labels.push_back(static_cast<int>(parse_int(f[2], ln, "label")));
  }
  d.x = Tensor({d.labels.size(), 2}, std::move(x));
  return d;
}

inline std::string views_csv(const PairedBatch& b) {
  std::string out(kViewsHeader);
  out += '\n';
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    out += format_double17(b.x1.at(i, 0)) + ',' + format_double17(b.x1.at(i, 1)) +
           ',' + format_double17(b.x2.at(i, 0)) + ',' +
           format_double17(b.x2.at(i, 1)) + ',' + std::to_string(b.labels[i]) +
           '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   mimax-checkpoint 1
//   kind encoder|predictor
//   scalar <name> <value>          (encoder: BN momentum and eps)
//   tensor <name> <rank> <dims...>
//   <values, space separated, row-major>
//   end
//
// Tensors appear in named_parameters order, then named_buffers order.

namespace detail {

inline void write_tensor(std::string& out, const std::string& name,
                         const Tensor& t) {
  out += "tensor " + name + ' ' + std::to_string(t.rank());
  for (std::size_t d : t.shape()) out += ' ' + std::to_string(d);
  out += '\n';
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) out += ' ';
    out += format_double(t[i]);
  }
  out += '\n';
}

class CheckpointReader {
 public:
  explicit CheckpointReader(std::string_view text) : lines_(split_lines(text)) {
    if (lines_.empty() || lines_[0] != kCheckpointMagic) {
      throw ParseError("not a checkpoint (bad magic line)", 1);
    }
    pos_ = 1;
  }

  std::string kind() {
    const auto f = words("kind");
    if (f.size() != 2) throw ParseError("malformed kind line", pos_);
    return std::string(f[1]);
  }

  double scalar(std::string_view name) {
    const auto f = words("scalar");
    if (f.size() != 3 || f[1] != name) {
      throw ParseError("expected scalar '" + std::string(name) + "'", pos_);
    }
    return parse_double(f[2], pos_, name);
  }

  Tensor tensor(std::string_view name) {
    const auto f = words("tensor");
    if (f.size() < 3 || f[1] != name) {
      throw ParseError("expected tensor '" + std::string(name) + "'", pos_);
    }
    const auto rank = static_cast<std::size_t>(parse_int(f[2], pos_, "rank"));
    if (f.size() != 3 + rank) throw ParseError("shape does not match rank", pos_);
    Shape shape;
    for (std::size_t k = 0; k < rank; ++k)
      shape.push_back(static_cast<std::size_t>(parse_int(f[3 + k], pos_, "dim")));
    const std::string_view body = next_line();
    std::vector<double> v;
    if (!body.empty())
      for (std::string_view tok : split(body, ' ')) v.push_back(parse_double(tok, pos_, name));
    if (v.size() != shape_size(shape)) {
      throw ParseError("tensor '" + std::string(name) + "' has " +
                           std::to_string(v.size()) + " values for shape " +
                           shape_string(shape),
                       pos_);
    }
    return Tensor(std::move(shape), std::move(v));
  }

  void finish() {
    if (next_line() != "end") throw ParseError("expected 'end'", pos_);
  }

 private:
  std::string_view next_line() {
    if (pos_ >= lines_.size()) throw ParseError("unexpected end of checkpoint", pos_ + 1);
    return lines_[pos_++];
  }

  std::vector<std::string_view> words(std::string_view keyword) {
    auto f = split(next_line(), ' ');
    if (f.empty() || f[0] != keyword) {
      throw ParseError("expected '" + std::string(keyword) + "' line", pos_);
    }
    return f;
  }

  std::vector<std::string_view> lines_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encoder_checkpoint(const EncoderParams& p) {
  std::string out(kCheckpointMagic);
  out += "\nkind encoder\n";
  for (const auto* bn : {&p.bn1, &p.bn2}) {
    const std::string prefix = bn == &p.bn1 ? "bn1" : "bn2";
    out += "scalar " + prefix + ".momentum " + format_double(bn->momentum) + '\n';
    out += "scalar " + prefix + ".eps " + format_double(bn->eps) + '\n';
  }
  for (const auto& [name, t] : named_parameters(p)) detail::write_tensor(out, name, *t);
  for (const auto& [name, t] : named_buffers(p)) detail::write_tensor(out, name, *t);
  out += "end\n";
  return out;
}

inline EncoderParams parse_encoder_checkpoint(std::string_view text) {
  detail::CheckpointReader r(text);
  if (r.kind() != "encoder") throw ParseError("checkpoint is not an encoder", 2);
  EncoderParams p;
  for (auto* bn : {&p.bn1, &p.bn2}) {
    const std::string prefix = bn == &p.bn1 ? "bn1" : "bn2";
    bn->momentum = r.scalar(prefix + ".momentum");
    bn->eps = r.scalar(prefix + ".eps");
  }
  for (auto& [name, t] : named_parameters(p)) *t = r.tensor(name);
  for (auto& [name, t] : named_buffers(p)) *t = r.tensor(name);
  r.finish();
  return p;
}

inline std::string predictor_checkpoint(const PredictorParams& p) {
  std::string out(kCheckpointMagic);
  out += "\nkind predictor\n";
  for (const auto& [name, t] : named_parameters(p)) detail::write_tensor(out, name, *t);
  out += "end\n";
  return out;
}

inline PredictorParams parse_predictor_checkpoint(std::string_view text) {
  detail::CheckpointReader r(text);
  if (r.kind() != "predictor") throw ParseError("checkpoint is not a predictor", 2);
  PredictorParams p;
  for (auto& [name, t] : named_parameters(p)) *t = r.tensor(name);
  r.finish();
  return p;
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

}  // namespace mimax
