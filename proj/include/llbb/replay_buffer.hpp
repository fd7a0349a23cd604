#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "llbb/binary_io.hpp"
#include "llbb/errors.hpp"
#include "llbb/rng.hpp"
#include "llbb/stream_store.hpp"

namespace llbb {

// Fixed-capacity reservoir (Vitter's Algorithm R) of past K-frame windows.
// Capacity is expressed in windows, derived from a fraction of stream frames.
class ReplayBuffer {
 public:
  ReplayBuffer(double fraction, std::uint64_t frame_count, int K, std::uint64_t seed) : K_(K), rng_(seed) {
    validate_context(K);
    if (!(fraction > 0.0 && fraction <= 1.0)) {
      throw ConfigError("buffer fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
    capacity_ = static_cast<std::uint64_t>(std::floor(fraction * static_cast<double>(frame_count) / K));
    if (capacity_ == 0) {
      throw ConfigError("replay buffer capacity is 0 windows (fraction " + std::to_string(fraction) + " of " +
                        std::to_string(frame_count) + " frames with K=" + std::to_string(K) + ")");
    }
  }

  std::uint64_t capacity() const { return capacity_; }
  std::uint64_t offers_seen() const { return offers_seen_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  int context() const { return K_; }
  const std::vector<Window>& slots() const { return slots_; }
  const Rng& rng() const { return rng_; }

  void offer(const Window& window) {
    if (window.K != K_) {
      throw ContractError("offer: window has K=" + std::to_string(window.K) + ", buffer expects K=" +
                          std::to_string(K_));
    }
    ++offers_seen_;
    if (slots_.size() < capacity_) {
      slots_.push_back(window);
      return;
    }
    // Keep with probability capacity/offers_seen, replacing a uniform slot.
    const std::uint64_t j = rng_.uniform_int(0, offers_seen_ - 1);
    if (j < capacity_) slots_[j] = window;
  }

  // n draws with replacement, uniform over resident slots.
  std::vector<Window> sample(std::size_t n, Rng& rng) const {
    if (n == 0) return {};
    if (slots_.empty()) throw EmptyBufferError("sample: replay buffer is empty");
    std::vector<Window> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(slots_[rng.uniform_int(0, slots_.size() - 1)]);
    return out;
  }

  void serialize(std::ostream& os) const {
    io::put_magic(os, "LLRB");
    io::put<std::uint64_t>(os, capacity_);
    io::put<std::uint64_t>(os, offers_seen_);
    io::put_string(os, rng_.to_string());
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(K_));
    io::put<std::uint64_t>(os, slots_.size());
    for (const auto& w : slots_) {
      io::put<std::uint64_t>(os, w.start_index);
      io::put<std::uint32_t>(os, static_cast<std::uint32_t>(w.height));
      io::put<std::uint32_t>(os, static_cast<std::uint32_t>(w.width));
      io::put_bytes(os, w.raw.data(), w.raw.size());
    }
  }

  static ReplayBuffer deserialize(std::istream& is) {
    io::expect_magic(is, "LLRB");
    ReplayBuffer b;
    b.capacity_ = io::get<std::uint64_t>(is, "buffer capacity");
    b.offers_seen_ = io::get<std::uint64_t>(is, "buffer offers_seen");
    b.rng_ = Rng::from_string(io::get_string(is, "buffer rng state"));
    b.K_ = static_cast<int>(io::get<std::uint32_t>(is, "buffer K"));
    const auto n = io::get<std::uint64_t>(is, "buffer slot count");
    if (n > b.capacity_ || b.capacity_ == 0) throw FormatError("replay buffer: slot count exceeds capacity");
    b.slots_.resize(n);
    for (auto& w : b.slots_) {
      w.K = b.K_;
      w.start_index = io::get<std::uint64_t>(is, "window start");
      w.height = static_cast<int>(io::get<std::uint32_t>(is, "window height"));
      w.width = static_cast<int>(io::get<std::uint32_t>(is, "window width"));
      if (w.height <= 0 || w.width <= 0 || w.height > 4096 || w.width > 4096) {
        throw FormatError("replay buffer: implausible window size");
      }
      w.raw.resize(static_cast<std::size_t>(w.K) * w.frame_bytes());
      io::get_bytes(is, w.raw.data(), w.raw.size(), "window frames");
    }
    return b;
  }

  bool operator==(const ReplayBuffer& o) const {
    return K_ == o.K_ && capacity_ == o.capacity_ && offers_seen_ == o.offers_seen_ && rng_ == o.rng_ &&
           slots_ == o.slots_;
  }

 private:
  ReplayBuffer() = default;

  int K_ = kDefaultContext;
  std::uint64_t capacity_ = 0;
  std::uint64_t offers_seen_ = 0;
  Rng rng_;
  std::vector<Window> slots_;
};

}  // namespace llbb
