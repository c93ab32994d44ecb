#pragma once

#include <concepts>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace bil {

std::uint64_t splitmix64(std::uint64_t x);

/// 64-bit FNV-1a, used to turn string labels into path components.
std::uint64_t label_hash(std::string_view label);

/// A named, reproducible source of randomness.
///
/// A stream is a value: (root_seed, path). Each path component is mixed into
/// the root seed, so substreams can be derived in any order and handed to
/// independent workers without sharing engine state.
class RngStream {
 public:
  using Engine = std::mt19937_64;

  explicit RngStream(std::uint64_t root_seed = 0) : root_seed_(root_seed) {}
  RngStream(std::uint64_t root_seed, std::vector<std::uint64_t> path)
      : root_seed_(root_seed), path_(std::move(path)) {}

  [[nodiscard]] RngStream child(std::uint64_t label) const;
  [[nodiscard]] RngStream child(std::string_view label) const { return child(label_hash(label)); }
  [[nodiscard]] RngStream child(const char* label) const { return child(std::string_view(label)); }
  template <std::integral I>
  [[nodiscard]] RngStream child(I label) const {
    return child(static_cast<std::uint64_t>(label));
  }

  /// Seed obtained by mixing the root seed with every path label.
  [[nodiscard]] std::uint64_t seed() const;
  [[nodiscard]] Engine engine() const { return Engine(seed()); }

  [[nodiscard]] std::uint64_t root_seed() const { return root_seed_; }
  [[nodiscard]] const std::vector<std::uint64_t>& path() const { return path_; }

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t root_seed_;
  std::vector<std::uint64_t> path_;
};

}  // namespace bil
