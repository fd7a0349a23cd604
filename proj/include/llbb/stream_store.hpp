#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "llbb/binary_io.hpp"
#include "llbb/errors.hpp"
#include "llbb/rng.hpp"

namespace llbb {

inline constexpr int kDefaultContext = 10;
inline constexpr int kDefaultResolution = 32;

enum class DatasetVersion : std::uint8_t { O = 0, C = 1 };

inline const char* to_string(DatasetVersion v) { return v == DatasetVersion::O ? "O" : "C"; }

// 32-byte little-endian header shared by frame streams ("LLVS") and
// ground-truth sidecars ("BBGT").
struct StreamHeader {
  char magic[4] = {'L', 'L', 'V', 'S'};
  std::uint16_t format_version = 1;
  std::uint16_t width = kDefaultResolution;
  std::uint16_t height = kDefaultResolution;
  std::uint16_t channels = 3;
  std::uint16_t fps = 10;
  DatasetVersion dataset_version = DatasetVersion::O;
  std::uint8_t pad = 0;
  std::uint64_t frame_count = 0;
  std::uint64_t reserved = 0;

  static constexpr std::size_t kSize = 32;

  std::size_t frame_bytes() const {
    return static_cast<std::size_t>(width) * height * channels;
  }

  void write(std::ostream& os) const {
    io::put_bytes(os, magic, 4);
    io::put(os, format_version);
    io::put(os, width);
    io::put(os, height);
    io::put(os, channels);
    io::put(os, fps);
    io::put(os, static_cast<std::uint8_t>(dataset_version));
    io::put(os, pad);
    io::put(os, frame_count);
    io::put(os, reserved);
  }

  static StreamHeader parse(std::span<const std::uint8_t> bytes, const char (&expected_magic)[5]) {
    if (bytes.size() < kSize) {
      throw FormatError("header truncated: expected " + std::to_string(kSize) +
                        " bytes, found " + std::to_string(bytes.size()));
    }
    StreamHeader h;
    std::memcpy(h.magic, bytes.data(), 4);
    if (std::memcmp(h.magic, expected_magic, 4) != 0) {
      throw FormatError(std::string("magic: expected \"") + expected_magic + "\", found \"" +
                        std::string(h.magic, 4) + "\"");
    }
    auto rd = [&](std::size_t off, auto& field) { std::memcpy(&field, bytes.data() + off, sizeof(field)); };
    rd(4, h.format_version);
    rd(6, h.width);
    rd(8, h.height);
    rd(10, h.channels);
    rd(12, h.fps);
    std::uint8_t dv = 0;
    rd(14, dv);
    rd(15, h.pad);
    rd(16, h.frame_count);
    rd(24, h.reserved);
    if (h.format_version != 1) {
      throw FormatError("format_version: unsupported value " + std::to_string(h.format_version));
    }
    if (h.channels != 3) throw FormatError("channels: expected 3, found " + std::to_string(h.channels));
    if (h.width == 0 || h.height == 0) throw FormatError("width/height: must be positive");
    if (dv > 1) throw FormatError("dataset_version: expected 0 or 1, found " + std::to_string(dv));
    h.dataset_version = static_cast<DatasetVersion>(dv);
    return h;
  }
};

// K consecutive frames; raw bytes are kept and normalized to [-1, 1] on access.
struct Window {
  std::uint64_t start_index = 0;
  int K = kDefaultContext;
  int height = kDefaultResolution;
  int width = kDefaultResolution;
  std::vector<std::uint8_t> raw;  // K * height * width * 3, frame-major HWC

  static float normalize(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

  std::size_t frame_bytes() const { return static_cast<std::size_t>(height) * width * 3; }

  std::span<const std::uint8_t> frame(int k) const {
    return {raw.data() + static_cast<std::size_t>(k) * frame_bytes(), frame_bytes()};
  }

  // Normalized value of frame k, row y, column x, channel c.
  float at(int k, int y, int x, int c) const {
    return normalize(raw[static_cast<std::size_t>(k) * frame_bytes() +
                         (static_cast<std::size_t>(y) * width + x) * 3 + c]);
  }

  std::vector<float> frames() const {
    std::vector<float> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = normalize(raw[i]);
    return out;
  }

  bool operator==(const Window&) const = default;
};

inline void validate_context(int K) {
  if (K <= 0 || K % 2 != 0) throw ConfigError("context K must be a positive even integer, got " + std::to_string(K));
}

// Read-only view of a stream file. The payload is memory-mapped; Direct mode
// reads through pread instead, which is useful when mapping is undesirable.
class VideoStream {
 public:
  enum class Access { Mapped, Direct };

  static VideoStream open(const std::filesystem::path& path, Access access = Access::Mapped) {
    return VideoStream(path, access, "LLVS");
  }

  VideoStream(const VideoStream&) = delete;
  VideoStream& operator=(const VideoStream&) = delete;
  VideoStream(VideoStream&& other) noexcept { *this = std::move(other); }
  VideoStream& operator=(VideoStream&& other) noexcept {
    if (this != &other) {
      release();
      path_ = std::move(other.path_);
      header_ = other.header_;
      access_ = other.access_;
      fd_ = std::exchange(other.fd_, -1);
      map_ = std::exchange(other.map_, nullptr);
      map_size_ = std::exchange(other.map_size_, 0);
    }
    return *this;
  }
  ~VideoStream() { release(); }

  const StreamHeader& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }
  std::uint64_t frame_count() const { return header_.frame_count; }
  int width() const { return header_.width; }
  int height() const { return header_.height; }
  DatasetVersion dataset_version() const { return header_.dataset_version; }
  std::size_t frame_bytes() const { return header_.frame_bytes(); }

  void read_frame(std::uint64_t index, std::span<std::uint8_t> out) const {
    if (index >= frame_count()) {
      throw BoundsError("frame index " + std::to_string(index) + " out of range [0, " +
                        std::to_string(frame_count()) + ")");
    }
    if (out.size() != frame_bytes()) throw ContractError("read_frame: output buffer has wrong size");
    const std::size_t offset = StreamHeader::kSize + index * frame_bytes();
    if (map_ != nullptr) {
      std::memcpy(out.data(), static_cast<const std::uint8_t*>(map_) + offset, out.size());
      return;
    }
    std::size_t done = 0;
    while (done < out.size()) {
      ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n <= 0) throw IoError(path_.string() + ": read failed at frame " + std::to_string(index));
      done += static_cast<std::size_t>(n);
    }
  }

  std::vector<std::uint8_t> read_frame(std::uint64_t index) const {
    std::vector<std::uint8_t> out(frame_bytes());
    read_frame(index, out);
    return out;
  }

 private:
  VideoStream(const std::filesystem::path& path, Access access, const char (&magic)[5])
      : path_(path), access_(access) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw IoError(path.string() + ": cannot open (" + std::strerror(errno) + ")");
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      release();
      throw IoError(path.string() + ": cannot stat");
    }
    const auto file_size = static_cast<std::uint64_t>(st.st_size);
    std::uint8_t head[StreamHeader::kSize] = {};
    const ssize_t got = ::pread(fd_, head, sizeof head, 0);
    try {
      header_ = StreamHeader::parse({head, static_cast<std::size_t>(std::max<ssize_t>(got, 0))}, magic);
    } catch (const FormatError& e) {
      release();
      throw FormatError(path.string() + ": " + e.what());
    }
    const std::uint64_t per_frame = header_.frame_bytes();
    const std::uint64_t expected = StreamHeader::kSize + header_.frame_count * per_frame;
    if (file_size != expected) {
      release();
      throw FormatError(path.string() + ": size mismatch: header promises " +
                        std::to_string(header_.frame_count) + " frames (" + std::to_string(expected) +
                        " bytes) but file has " + std::to_string(file_size) + " bytes");
    }
    if (access_ == Access::Mapped && file_size > 0) {
      void* m = ::mmap(nullptr, file_size, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (m == MAP_FAILED) {
        release();
        throw IoError(path.string() + ": mmap failed");
      }
      map_ = m;
      map_size_ = file_size;
    }
  }

  void release() {
    if (map_ != nullptr) ::munmap(map_, map_size_);
    if (fd_ >= 0) ::close(fd_);
    map_ = nullptr;
    map_size_ = 0;
    fd_ = -1;
  }

  std::filesystem::path path_;
  StreamHeader header_;
  Access access_ = Access::Mapped;
  int fd_ = -1;
  void* map_ = nullptr;
  std::size_t map_size_ = 0;
};

// Sequential writer; the frame count is fixed up front so the header is final.
class StreamWriter {
 public:
  StreamWriter(const std::filesystem::path& path, StreamHeader header)
      : path_(path), header_(header), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError(path.string() + ": cannot open for writing");
    header_.write(out_);
  }

  void write_frame(std::span<const std::uint8_t> frame) {
    if (frame.size() != header_.frame_bytes()) throw ContractError("write_frame: wrong frame size");
    if (written_ >= header_.frame_count) throw ContractError("write_frame: more frames than declared");
    io::put_bytes(out_, frame.data(), frame.size());
    ++written_;
  }

  void finish() {
    if (written_ != header_.frame_count) {
      throw ContractError(path_.string() + ": wrote " + std::to_string(written_) + " of " +
                          std::to_string(header_.frame_count) + " declared frames");
    }
    out_.flush();
    if (!out_) throw IoError(path_.string() + ": write failed");
    out_.close();
  }

 private:
  std::filesystem::path path_;
  StreamHeader header_;
  std::ofstream out_;
  std::uint64_t written_ = 0;
};

inline Window read_window(const VideoStream& stream, std::uint64_t i, int K = kDefaultContext) {
  validate_context(K);
  if (stream.frame_count() < static_cast<std::uint64_t>(K) || i > stream.frame_count() - K) {
    throw BoundsError("window start " + std::to_string(i) + " out of range [0, " +
                      std::to_string(stream.frame_count() >= static_cast<std::uint64_t>(K)
                                         ? stream.frame_count() - K
                                         : 0) +
                      "] for K=" + std::to_string(K));
  }
  Window w;
  w.start_index = i;
  w.K = K;
  w.height = stream.height();
  w.width = stream.width();
  w.raw.resize(static_cast<std::size_t>(K) * stream.frame_bytes());
  for (int k = 0; k < K; ++k) {
    stream.read_frame(i + k, {w.raw.data() + static_cast<std::size_t>(k) * stream.frame_bytes(), stream.frame_bytes()});
  }
  return w;
}

// Offline (i.i.d.) sampling: start index uniform over every valid window.
inline std::uint64_t sample_offline_index(const VideoStream& stream, Rng& rng, int K = kDefaultContext) {
  if (stream.frame_count() < static_cast<std::uint64_t>(K)) throw BoundsError("stream shorter than K");
  return rng.uniform_int(0, stream.frame_count() - K);
}

inline Window sample_offline_window(const VideoStream& stream, Rng& rng, int K = kDefaultContext) {
  return read_window(stream, sample_offline_index(stream, rng, K), K);
}

// Lifelong sampling: step t sees exactly frames [t, t+K).
inline Window lifelong_window(const VideoStream& stream, std::uint64_t t, int K = kDefaultContext) {
  return read_window(stream, t, K);
}

inline std::uint64_t lifelong_step_count(std::uint64_t frame_count, int K = kDefaultContext) {
  return frame_count >= static_cast<std::uint64_t>(K) ? frame_count - K + 1 : 0;
}

}  // namespace llbb
