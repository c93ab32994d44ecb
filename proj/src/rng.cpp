#include "bil/rng.hpp"

namespace bil {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t label_hash(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RngStream RngStream::child(std::uint64_t label) const {
  auto path = path_;
  path.push_back(label);
  return RngStream(root_seed_, std::move(path));
}

std::uint64_t RngStream::seed() const {
  std::uint64_t h = splitmix64(root_seed_);
  for (std::uint64_t label : path_) {
    // Mixing the label separately keeps (a, b) and (b, a) apart.
    h = splitmix64(h ^ splitmix64(label + 0x632be59bd9b4e019ULL));
  }
  return h;
}

}  // namespace bil
