#include "facetutor/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "facetutor/seed.hpp"

namespace facetutor::synthetic {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kFrameSide = 16;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(std::vector<unsigned char>& out, const char* type, const std::vector<unsigned char>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::vector<unsigned char> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_u32(out, static_cast<std::uint32_t>(crc32(0L, body.data(), static_cast<uInt>(body.size()))));
}

}  // namespace

au::AuTrace make_trace(std::string video_id, std::string participant_id, std::size_t frames, std::uint64_t seed) {
  if (frames == 0) throw std::invalid_argument("make_trace: frames must be positive");
  seed::SplitMix rng(seed);
  au::AuTrace trace;
  trace.video_id = std::move(video_id);
  trace.participant_id = std::move(participant_id);
  trace.frame_rate_hz = 30.0;

  // 1-3 active AUs per video (none for roughly one video in eight).
  std::array<double, au::kAuCount> peak{};
  if (rng.below(8) != 0) {
    const std::size_t active = 1 + rng.below(3);
    for (std::size_t i = 0; i < active; ++i) peak[rng.below(au::kAuCount)] = 0.6 + 3.4 * rng.unit();
  }
  const double apex = 0.3 + 0.4 * rng.unit();
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = frames == 1 ? apex : static_cast<double>(f) / static_cast<double>(frames - 1);
    const double envelope = std::exp(-std::pow((t - apex) / 0.22, 2.0));
    au::AuFrame frame;
    frame.index = f;
    for (std::size_t a = 0; a < au::kAuCount; ++a) {
      double v = peak[a] * envelope + 0.15 * rng.unit();
      frame.intensities[au::kAllAus[a]] = std::round(std::max(0.0, v) * 1000.0) / 1000.0;
    }
    trace.frames.push_back(frame);
  }
  return trace;
}

std::string trace_to_csv(const au::AuTrace& trace) {
  std::ostringstream out;
  out << "# video_id=" << trace.video_id << "\n";
  out << "# participant_id=" << trace.participant_id << "\n";
  out << "# frame_rate_hz=" << trace.frame_rate_hz << "\n";
  out << "frame_index";
  for (auto id : au::kAllAus) out << ',' << au::to_string(id);
  out << "\n";
  out << std::fixed << std::setprecision(3);
  for (const auto& f : trace.frames) {
    out << f.index;
    for (auto id : au::kAllAus) out << ',' << f.intensities[id];
    out << "\n";
  }
  return out.str();
}

std::vector<unsigned char> encode_png_gray(std::size_t width, std::size_t height,
                                           const std::vector<unsigned char>& pixels) {
  if (pixels.size() != width * height) throw std::invalid_argument("encode_png_gray: pixel count mismatch");
  std::vector<unsigned char> raw;
  raw.reserve((width + 1) * height);
  for (std::size_t y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * width),
               pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * width));
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> packed(packed_size);
  if (compress(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size())) != Z_OK) {
    throw std::runtime_error("zlib compression failed");
  }
  packed.resize(packed_size);

  std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<unsigned char> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // 8-bit grayscale, deflate, no interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", packed);
  put_chunk(png, "IEND", {});
  return png;
}

void write_png_gray(const fs::path& path, std::size_t width, std::size_t height,
                    const std::vector<unsigned char>& pixels) {
  auto bytes = encode_png_gray(width, height, pixels);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

fs::path write_corpus(const fs::path& dir, const CorpusSpec& spec) {
  fs::create_directories(dir / "traces");
  nlohmann::json manifest{{"partial", spec.partial}, {"participants", nlohmann::json::array()}};
  for (std::size_t p = 0; p < spec.participants; ++p) {
    std::ostringstream pid;
    pid << "p" << std::setw(3) << std::setfill('0') << (p + 1);
    nlohmann::json participant{{"participant_id", pid.str()}, {"expressions", nlohmann::json::array()}};
    for (std::size_t v = 0; v < spec.videos_per_participant; ++v) {
      std::ostringstream vid;
      vid << pid.str() << "_v" << std::setw(2) << std::setfill('0') << (v + 1);
      auto trace = make_trace(vid.str(), pid.str(), spec.frames_per_video, seed::mix(spec.seed, vid.str()));
      const auto trace_rel = "traces/" + vid.str() + ".csv";
      {
        std::ofstream out(dir / trace_rel, std::ios::binary | std::ios::trunc);
        out << trace_to_csv(trace);
      }
      nlohmann::json entry{{"video_id", vid.str()}, {"trace", trace_rel}};
      if (spec.write_images) {
        const auto frames_rel = "frames/" + vid.str();
        for (const auto& f : trace.frames) {
          const double level = std::min(1.0, f.intensities.sum() / 8.0);
          std::vector<unsigned char> px(kFrameSide * kFrameSide);
          for (std::size_t i = 0; i < px.size(); ++i) {
            px[i] = static_cast<unsigned char>(40 + 200 * level * ((i / kFrameSide + i % kFrameSide) % 2 ? 1.0 : 0.6));
          }
          write_png_gray(dir / frames_rel / (std::to_string(f.index) + ".png"), kFrameSide, kFrameSide, px);
        }
        entry["frames_dir"] = frames_rel;
      }
      participant["expressions"].push_back(entry);
    }
    manifest["participants"].push_back(participant);
  }
  auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << manifest.dump(2) << "\n";
  return path;
}

}  // namespace facetutor::synthetic
