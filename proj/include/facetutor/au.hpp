#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace facetutor::au {

// The eight action units retained from the 12-AU estimator. Enumeration order
// is the canonical order used for tie-breaking and serialization.
enum class AuId : std::uint8_t { AU1, AU2, AU4, AU5, AU9, AU12, AU15, AU17 };

inline constexpr std::size_t kAuCount = 8;
inline constexpr std::array<AuId, kAuCount> kAllAus = {AuId::AU1, AuId::AU2,  AuId::AU4,  AuId::AU5,
                                                        AuId::AU9, AuId::AU12, AuId::AU15, AuId::AU17};

std::string_view to_string(AuId id);
std::optional<AuId> parse_au_id(std::string_view label);

constexpr std::size_t index_of(AuId id) { return static_cast<std::size_t>(id); }

// Intensity per AU, indexed by index_of(AuId). Always total over all 8 AUs.
class AuVector {
 public:
  AuVector() = default;
  explicit AuVector(const std::array<double, kAuCount>& values) : values_(values) {}

  double operator[](AuId id) const { return values_[index_of(id)]; }
  double& operator[](AuId id) { return values_[index_of(id)]; }
  const std::array<double, kAuCount>& values() const { return values_; }
  double sum() const;

  bool operator==(const AuVector&) const = default;

 private:
  std::array<double, kAuCount> values_{};
};

struct AuFrame {
  std::uint64_t index = 0;
  AuVector intensities;
};

struct AuTrace {
  std::string video_id;
  std::string participant_id;
  double frame_rate_hz = 30.0;
  std::vector<AuFrame> frames;
  // Non-fatal findings from parsing (e.g. intensities above the 0-5 scale).
  std::vector<std::string> warnings;
};

using PooledAus = AuVector;

// Raised by parse_au_trace. `position` is the 1-based line (CSV) or frame
// record (JSON) the problem was found at, 0 when it applies to the whole file.
class TraceFormatError : public std::runtime_error {
 public:
  TraceFormatError(const std::string& what, std::size_t position);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Accepts either comma-separated text with a header row
// (frame_index,AU1,AU2,AU4,AU5,AU9,AU12,AU15,AU17 in any column order; extra
// columns ignored) or a JSON object mirroring AuTrace. CSV files may start with
// "# key=value" lines for video_id, participant_id and frame_rate_hz.
AuTrace parse_au_trace(std::string_view content);
AuTrace load_au_trace(const std::string& path);

PooledAus max_pool(const AuTrace& trace);

enum class IntensityWord : std::uint8_t { Slightly, Moderately, Strongly };
std::string_view to_string(IntensityWord word);

// One vocabulary row. The row value is the max over `aus`; bins are
// [lower[i], lower[i+1]) with the last bin unbounded above.
struct ThresholdRow {
  std::vector<AuId> aus;
  std::string base_description;
  std::array<double, 3> lower_bounds{};
};

struct ThresholdTable {
  std::vector<ThresholdRow> rows;
};

const ThresholdTable& default_threshold_table();

struct ExpressionPhrase {
  std::size_t row = 0;
  IntensityWord word = IntensityWord::Slightly;
  std::string base_description;

  std::string text() const;
  bool operator==(const ExpressionPhrase&) const = default;
};

struct ExpressionDescription {
  std::string text;
  std::vector<ExpressionPhrase> phrases;
};

inline constexpr std::string_view kNeutralExpression = "neutral expression";
inline constexpr std::string_view kPhraseConjunction = " and ";

std::optional<IntensityWord> classify(const ThresholdRow& row, double value);
std::optional<std::string> describe_slot(const ThresholdRow& row, double value);
double row_value(const ThresholdRow& row, const PooledAus& pooled);
ExpressionDescription describe_expression(const PooledAus& pooled,
                                          const ThresholdTable& table = default_threshold_table());

// Frame (by its `index` field) with the largest unweighted AU sum; earliest wins ties.
std::uint64_t peak_frame(const AuTrace& trace);
// Position in trace.frames of the peak frame.
std::size_t peak_frame_position(const AuTrace& trace);

AuId dominant_au(const PooledAus& pooled);

}  // namespace facetutor::au
