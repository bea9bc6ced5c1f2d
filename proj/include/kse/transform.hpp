#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "kse/binary_io.hpp"
#include "kse/error.hpp"
#include "kse/image.hpp"
#include "kse/rng.hpp"

namespace kse {

/// Secret block-wise pixel-shuffling key.
///
/// A block is M x M pixels x C channels, flattened row-major inside the block
/// with the channel index fastest: entry (dy, dx, c) has index (dy * M + dx) * C + c.
/// The same permutation is applied to every block of every image.
/// Encryption gathers: cipher_block[i] = plain_block[perm[i]].
class ShuffleKey {
 public:
  ShuffleKey(std::string key_id, std::uint64_t seed, std::size_t block_size, std::size_t channels,
             std::vector<std::size_t> perm)
      : key_id_(std::move(key_id)), seed_(seed), block_size_(block_size), channels_(channels),
        perm_(std::move(perm)) {
    if (block_size_ == 0 || channels_ == 0) throw Error(Errc::invalid_dimensions, "block size and channels must be >= 1");
    const std::size_t n = block_size_ * block_size_ * channels_;
    if (perm_.size() != n) throw Error(Errc::invalid_dimensions, "permutation length must be M*M*C");
    inv_perm_.assign(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      if (perm_[i] >= n || inv_perm_[perm_[i]] != n) throw Error(Errc::invalid_argument, "not a permutation");
      inv_perm_[perm_[i]] = i;
    }
  }

  const std::string& key_id() const noexcept { return key_id_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t block_entries() const noexcept { return perm_.size(); }
  const std::vector<std::size_t>& perm() const noexcept { return perm_; }
  const std::vector<std::size_t>& inv_perm() const noexcept { return inv_perm_; }

  bool is_identity() const noexcept {
    for (std::size_t i = 0; i < perm_.size(); ++i)
      if (perm_[i] != i) return false;
    return true;
  }

  friend bool operator==(const ShuffleKey&, const ShuffleKey&) = default;

 private:
  std::string key_id_;
  std::uint64_t seed_;
  std::size_t block_size_;
  std::size_t channels_;
  std::vector<std::size_t> perm_;
  std::vector<std::size_t> inv_perm_;
};

inline std::string default_key_id(std::uint64_t seed, std::size_t block_size, std::size_t channels) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ks-%016llx-m%zu-c%zu", static_cast<unsigned long long>(seed), block_size,
                channels);
  return buf;
}

/// Fisher-Yates over {0..M*M*C-1} driven by SplitMix64 seeded with `seed`.
inline ShuffleKey gen_key(std::uint64_t seed, std::size_t block_size, std::size_t channels) {
  if (block_size == 0 || channels == 0) throw Error(Errc::invalid_dimensions, "block size and channels must be >= 1");
  const std::size_t n = block_size * block_size * channels;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  RngStream rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_below(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return ShuffleKey(default_key_id(seed, block_size, channels), seed, block_size, channels, std::move(perm));
}

/// Key for the undefended pipeline: no shuffling at all.
inline ShuffleKey identity_key(std::size_t block_size, std::size_t channels) {
  std::vector<std::size_t> perm(block_size * block_size * channels);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  return ShuffleKey("identity", 0, block_size, channels, std::move(perm));
}

namespace detail {

inline void check_encryptable(const Image& x, const ShuffleKey& k) {
  const std::size_t m = k.block_size();
  if (x.channels != k.channels()) throw Error(Errc::shape_mismatch, "image channels differ from key channels");
  if (x.height % m != 0 || x.width % m != 0)
    throw Error(Errc::shape_mismatch, "image height and width must be multiples of the block size");
}

// out_block[i] = in_block[table[i]] for every block.
inline Image permute_blocks(const Image& in, const ShuffleKey& k, const std::vector<std::size_t>& table) {
  check_encryptable(in, k);
  const std::size_t m = k.block_size();
  const std::size_t c = k.channels();
  std::vector<std::size_t> local(table.size());
  for (std::size_t dy = 0; dy < m; ++dy)
    for (std::size_t dx = 0; dx < m; ++dx)
      for (std::size_t ch = 0; ch < c; ++ch) local[(dy * m + dx) * c + ch] = (dy * in.width + dx) * c + ch;

  Image out(in.height, in.width, in.channels);
  for (std::size_t by = 0; by < in.height; by += m) {
    for (std::size_t bx = 0; bx < in.width; bx += m) {
      const std::size_t base = (by * in.width + bx) * c;
      for (std::size_t i = 0; i < table.size(); ++i) out.values[base + local[i]] = in.values[base + local[table[i]]];
    }
  }
  return out;
}

}  // namespace detail

inline Image encrypt(const Image& x, const ShuffleKey& k) { return detail::permute_blocks(x, k, k.perm()); }

inline Image decrypt(const Image& y, const ShuffleKey& k) { return detail::permute_blocks(y, k, k.inv_perm()); }

/// Pulls dL/d(encrypt(x)) back to dL/dx. Encryption is a fixed permutation,
/// so its transpose is the inverse permutation.
inline Image backprop_through_encrypt(const Image& grad, const ShuffleKey& k) { return decrypt(grad, k); }

/// An encrypted image tagged with the id of the key that produced it.
struct Ciphertext {
  Image image;
  std::string key_id;
};

inline Ciphertext seal(const Image& x, const ShuffleKey& k) { return {encrypt(x, k), k.key_id()}; }

// Key file: "KSKY" | version u16 | seed u64 | M u16 | C u16, little-endian.
// The permutation is regenerated from the seed on load.
inline constexpr std::uint16_t key_file_version = 1;

inline std::vector<char> serialize_key(const ShuffleKey& k) {
  if (k.block_size() > 0xffff || k.channels() > 0xffff) throw Error(Errc::invalid_dimensions, "M or C exceeds u16");
  io::ByteWriter w;
  w.put_bytes("KSKY");
  w.put_u16(key_file_version);
  w.put_u64(k.seed());
  w.put_u16(static_cast<std::uint16_t>(k.block_size()));
  w.put_u16(static_cast<std::uint16_t>(k.channels()));
  return w.bytes();
}

inline ShuffleKey deserialize_key(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.take_bytes(4) != "KSKY") throw Error(Errc::bad_magic, "not a key file");
  const auto version = r.get_u16();
  if (version != key_file_version) throw Error(Errc::version_mismatch, "unsupported key file version");
  const auto seed = r.get_u64();
  const auto m = r.get_u16();
  const auto c = r.get_u16();
  return gen_key(seed, m, c);
}

inline void save_key(const ShuffleKey& k, const std::filesystem::path& path) {
  io::write_file(path, serialize_key(k));
}

inline ShuffleKey load_key(const std::filesystem::path& path) { return deserialize_key(io::read_file(path)); }

}  // namespace kse
