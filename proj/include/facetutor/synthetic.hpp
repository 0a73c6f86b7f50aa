#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facetutor/au.hpp"

// Synthetic stand-in for a facial-expression video corpus: AU traces with a
// rise-and-fall activation profile plus tiny grayscale PNG frames.
namespace facetutor::synthetic {

struct CorpusSpec {
  std::size_t participants = 4;
  std::size_t videos_per_participant = 20;
  std::size_t frames_per_video = 24;
  std::uint64_t seed = 1;
  bool write_images = true;
  bool partial = false;  // written into the manifest
};

au::AuTrace make_trace(std::string video_id, std::string participant_id, std::size_t frames, std::uint64_t seed);

std::string trace_to_csv(const au::AuTrace& trace);

// Grayscale 8-bit PNG.
std::vector<unsigned char> encode_png_gray(std::size_t width, std::size_t height,
                                           const std::vector<unsigned char>& pixels);
void write_png_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                    const std::vector<unsigned char>& pixels);

// Writes traces/, frames/ and manifest.json under `dir`; returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir, const CorpusSpec& spec);

}  // namespace facetutor::synthetic
