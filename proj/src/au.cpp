#include "facetutor/au.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace facetutor::au {

namespace {

constexpr std::array<std::string_view, kAuCount> kAuNames = {"AU1", "AU2",  "AU4",  "AU5",
                                                              "AU9", "AU12", "AU15", "AU17"};

// Intensities above this are outside the DISFA 0-5 scale and produce a warning.
constexpr double kScaleMax = 5.0;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<double> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

void check_intensity(double v, AuId id, std::size_t position, AuTrace& trace) {
  if (!std::isfinite(v)) {
    throw TraceFormatError("non-finite intensity for " + std::string(to_string(id)), position);
  }
  if (v < 0.0) {
    throw TraceFormatError("negative intensity for " + std::string(to_string(id)), position);
  }
  if (v > kScaleMax) {
    std::ostringstream msg;
    msg << "record " << position << ": " << to_string(id) << " intensity " << v << " exceeds the 0-5 scale";
    trace.warnings.push_back(msg.str());
  }
}

void check_index_order(const AuTrace& trace, std::uint64_t index, std::size_t position) {
  if (!trace.frames.empty() && index <= trace.frames.back().index) {
    throw TraceFormatError("frame_index not strictly increasing", position);
  }
}

AuTrace parse_csv(std::string_view content) {
  AuTrace trace;
  std::size_t line_no = 0;
  std::optional<std::vector<std::string_view>> header;
  std::size_t frame_col = 0;
  std::array<std::size_t, kAuCount> au_cols{};

  std::size_t start = 0;
  while (start <= content.size()) {
    auto end = content.find('\n', start);
    std::string_view line = content.substr(start, end == std::string_view::npos ? end : end - start);
    start = end == std::string_view::npos ? content.size() + 1 : end + 1;
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '#') {
      if (header) continue;
      auto body = trim(line.substr(1));
      auto eq = body.find('=');
      if (eq == std::string_view::npos) continue;
      auto key = trim(body.substr(0, eq));
      auto value = trim(body.substr(eq + 1));
      if (key == "video_id") {
        trace.video_id = value;
      } else if (key == "participant_id") {
        trace.participant_id = value;
      } else if (key == "frame_rate_hz") {
        auto rate = parse_number(value);
        if (!rate || !(*rate > 0.0) || !std::isfinite(*rate)) {
          throw TraceFormatError("frame_rate_hz must be a positive number", line_no);
        }
        trace.frame_rate_hz = *rate;
      }
      continue;
    }

    auto fields = split(line, ',');
    if (!header) {
      header = fields;
      auto find_col = [&](std::string_view name) -> std::optional<std::size_t> {
        auto it = std::find(fields.begin(), fields.end(), name);
        if (it == fields.end()) return std::nullopt;
        return static_cast<std::size_t>(it - fields.begin());
      };
      auto fc = find_col("frame_index");
      if (!fc) throw TraceFormatError("missing frame_index column", line_no);
      frame_col = *fc;
      for (AuId id : kAllAus) {
        auto col = find_col(to_string(id));
        if (!col) throw TraceFormatError("missing AU column " + std::string(to_string(id)), line_no);
        au_cols[index_of(id)] = *col;
      }
      continue;
    }

    if (fields.size() != header->size()) {
      throw TraceFormatError("malformed record: expected " + std::to_string(header->size()) + " fields, got " +
                                 std::to_string(fields.size()),
                             line_no);
    }
    AuFrame frame;
    std::uint64_t idx = 0;
    auto fi = fields[frame_col];
    auto [ptr, ec] = std::from_chars(fi.data(), fi.data() + fi.size(), idx);
    if (fi.empty() || ec != std::errc{} || ptr != fi.data() + fi.size()) {
      throw TraceFormatError("malformed frame_index '" + std::string(fi) + "'", line_no);
    }
    check_index_order(trace, idx, line_no);
    frame.index = idx;
    for (AuId id : kAllAus) {
      auto raw = fields[au_cols[index_of(id)]];
      auto v = parse_number(raw);
      if (!v) throw TraceFormatError("malformed intensity '" + std::string(raw) + "'", line_no);
      check_intensity(*v, id, line_no, trace);
      frame.intensities[id] = *v;
    }
    trace.frames.push_back(frame);
  }
  if (!header) throw TraceFormatError("missing header row", 0);
  if (trace.frames.empty()) throw TraceFormatError("empty frame list", 0);
  return trace;
}

AuTrace parse_json(std::string_view content) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(content);
  } catch (const nlohmann::json::parse_error& e) {
    throw TraceFormatError(std::string("malformed JSON: ") + e.what(), 0);
  }
  if (!doc.is_object()) throw TraceFormatError("malformed file: top level must be an object", 0);

  AuTrace trace;
  trace.video_id = doc.value("video_id", "");
  trace.participant_id = doc.value("participant_id", "");
  if (doc.contains("frame_rate_hz")) {
    const auto& rate = doc["frame_rate_hz"];
    if (!rate.is_number() || !(rate.get<double>() > 0.0)) {
      throw TraceFormatError("frame_rate_hz must be a positive number", 0);
    }
    trace.frame_rate_hz = rate.get<double>();
  }
  if (!doc.contains("frames") || !doc["frames"].is_array()) {
    throw TraceFormatError("malformed file: missing frames array", 0);
  }
  std::size_t record = 0;
  for (const auto& f : doc["frames"]) {
    ++record;
    if (!f.is_object() || !f.contains("index") || !f["index"].is_number_unsigned()) {
      throw TraceFormatError("malformed frame record", record);
    }
    AuFrame frame;
    frame.index = f["index"].get<std::uint64_t>();
    check_index_order(trace, frame.index, record);
    if (!f.contains("intensities") || !f["intensities"].is_object()) {
      throw TraceFormatError("malformed frame record: missing intensities", record);
    }
    const auto& in = f["intensities"];
    for (AuId id : kAllAus) {
      auto name = std::string(to_string(id));
      if (!in.contains(name)) throw TraceFormatError("missing AU column " + name, record);
      const auto& v = in[name];
      double value = 0.0;
      if (v.is_number()) {
        value = v.get<double>();
      } else if (v.is_string()) {
        // JSON has no NaN/Infinity literals; accept their string spellings so
        // they are reported as non-finite rather than as a type error.
        auto parsed = parse_number(v.get<std::string>());
        if (!parsed) throw TraceFormatError("malformed intensity for " + name, record);
        value = *parsed;
      } else {
        throw TraceFormatError("malformed intensity for " + name, record);
      }
      check_intensity(value, id, record, trace);
      frame.intensities[id] = value;
    }
    trace.frames.push_back(frame);
  }
  if (trace.frames.empty()) throw TraceFormatError("empty frame list", 0);
  return trace;
}

}  // namespace

std::string_view to_string(AuId id) { return kAuNames[index_of(id)]; }

std::optional<AuId> parse_au_id(std::string_view label) {
  for (AuId id : kAllAus) {
    if (kAuNames[index_of(id)] == label) return id;
  }
  return std::nullopt;
}

double AuVector::sum() const {
  double total = 0.0;
  for (double v : values_) total += v;
  return total;
}

TraceFormatError::TraceFormatError(const std::string& what, std::size_t position)
    : std::runtime_error(position == 0 ? what : what + " (at record " + std::to_string(position) + ")"),
      position_(position) {}

AuTrace parse_au_trace(std::string_view content) {
  auto first = content.find_first_not_of(" \t\r\n");
  if (first != std::string_view::npos && content[first] == '{') return parse_json(content);
  return parse_csv(content);
}

AuTrace load_au_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open AU trace file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_au_trace(buf.str());
}

PooledAus max_pool(const AuTrace& trace) {
  PooledAus pooled;
  if (trace.frames.empty()) return pooled;
  pooled = trace.frames.front().intensities;
  for (const auto& frame : trace.frames) {
    for (AuId id : kAllAus) pooled[id] = std::max(pooled[id], frame.intensities[id]);
  }
  return pooled;
}

std::string_view to_string(IntensityWord word) {
  switch (word) {
    case IntensityWord::Slightly: return "slightly";
    case IntensityWord::Moderately: return "moderately";
    case IntensityWord::Strongly: return "strongly";
  }
  return "";
}

const ThresholdTable& default_threshold_table() {
  static const ThresholdTable table{{
      {{AuId::AU1, AuId::AU2}, "raises eyebrows", {1.5, 2.0, 2.8}},
      {{AuId::AU4}, "knits eyebrows", {1.0, 1.6, 2.8}},
      {{AuId::AU5}, "widens eyes", {0.8, 1.5, 2.2}},
      {{AuId::AU9}, "wrinkles the nose", {1.0, 1.6, 2.8}},
      {{AuId::AU12}, "smiles", {1.0, 1.6, 2.8}},
      {{AuId::AU15}, "downturns the mouth", {1.0, 1.6, 2.8}},
      {{AuId::AU17}, "dimples the chin", {1.0, 1.6, 2.8}},
  }};
  return table;
}

std::string ExpressionPhrase::text() const {
  std::string out(to_string(word));
  out += ' ';
  out += base_description;
  return out;
}

std::optional<IntensityWord> classify(const ThresholdRow& row, double value) {
  const auto& lb = row.lower_bounds;
  if (value >= lb[2]) return IntensityWord::Strongly;
  if (value >= lb[1]) return IntensityWord::Moderately;
  if (value >= lb[0]) return IntensityWord::Slightly;
  return std::nullopt;
}

std::optional<std::string> describe_slot(const ThresholdRow& row, double value) {
  auto word = classify(row, value);
  if (!word) return std::nullopt;
  return ExpressionPhrase{0, *word, row.base_description}.text();
}

double row_value(const ThresholdRow& row, const PooledAus& pooled) {
  double v = -std::numeric_limits<double>::infinity();
  for (AuId id : row.aus) v = std::max(v, pooled[id]);
  return v;
}

ExpressionDescription describe_expression(const PooledAus& pooled, const ThresholdTable& table) {
  ExpressionDescription desc;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (auto word = classify(row, row_value(row, pooled))) {
      desc.phrases.push_back({r, *word, row.base_description});
    }
  }
  if (desc.phrases.empty()) {
    desc.text = kNeutralExpression;
    return desc;
  }
  for (std::size_t i = 0; i < desc.phrases.size(); ++i) {
    if (i > 0) desc.text += kPhraseConjunction;
    desc.text += desc.phrases[i].text();
  }
  return desc;
}

std::size_t peak_frame_position(const AuTrace& trace) {
  std::size_t best = 0;
  double best_sum = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < trace.frames.size(); ++i) {
    double s = trace.frames[i].intensities.sum();
    if (s > best_sum) {
      best_sum = s;
      best = i;
    }
  }
  return best;
}

std::uint64_t peak_frame(const AuTrace& trace) {
  if (trace.frames.empty()) throw std::invalid_argument("peak_frame: empty trace");
  return trace.frames[peak_frame_position(trace)].index;
}

AuId dominant_au(const PooledAus& pooled) {
  AuId best = kAllAus.front();
  for (AuId id : kAllAus) {
    if (pooled[id] > pooled[best]) best = id;
  }
  return best;
}

}  // namespace facetutor::au
