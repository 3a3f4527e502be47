#pragma once

// Binary checkpoint files.
//
//   "NEONCKPT"            8 bytes magic
//   version               1 byte (currently 1)
//   meta_len              4 bytes little-endian
//   metadata              meta_len bytes of UTF-8 "key=value\n" lines
//   count                 8 bytes little-endian
//   values                count little-endian IEEE-754 doubles
//
// The Checkpoint header fields (kind, seed, budget_images, lr) travel in the
// metadata block under reserved keys; lr is written as the hex bit pattern so the
// round trip is exact.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "neon/checkpoint.hpp"
#include "neon/csv.hpp"

namespace neon {

inline constexpr std::array<char, 8> kCheckpointMagic{'N', 'E', 'O', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline std::string hex_u64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline const char* const kReservedKeys[] = {"kind", "seed", "budget_images", "lr_bits", "lr"};

inline bool is_reserved(const std::string& k) {
  for (const char* r : kReservedKeys)
    if (k == r) return true;
  return false;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string meta;
  auto line = [&](const std::string& k, const std::string& v) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint metadata key/value contains '=' or newline: " + k);
    }
    meta += k + "=" + v + "\n";
  };
  line("kind", to_string(ck.kind));
  line("seed", std::to_string(ck.seed));
  line("budget_images", std::to_string(ck.budget_images));
  line("lr", format_double(ck.lr));
  line("lr_bits", detail::hex_u64(std::bit_cast<std::uint64_t>(ck.lr)));
  for (const auto& [k, v] : ck.meta) {
    if (detail::is_reserved(k)) throw std::invalid_argument("checkpoint metadata key '" + k + "' is reserved");
    line(k, v);
  }

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_le<std::uint64_t>(out, ck.params.dim());
  for (double v : ck.params.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) { return IoError("checkpoint " + origin + ": " + why); };
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw fail(std::string("truncated while reading ") + what);
  };

  need(kCheckpointMagic.size(), "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw fail("bad magic, expected \"NEONCKPT\"");
  }
  pos += kCheckpointMagic.size();
  need(1, "version");
  const std::uint8_t version = p[pos++];
  if (version != kCheckpointVersion) {
    throw fail("unsupported version " + std::to_string(version) + " (this build reads version " +
               std::to_string(kCheckpointVersion) + ")");
  }
  need(4, "metadata length");
  const auto meta_len = detail::get_le<std::uint32_t>(p + pos);
  pos += 4;
  need(meta_len, "metadata");
  const std::string meta(bytes.substr(pos, meta_len));
  pos += meta_len;
  need(8, "value count");
  const auto count = detail::get_le<std::uint64_t>(p + pos);
  pos += 8;
  if (count > (bytes.size() - pos) / 8) throw fail("truncated while reading values");
  std::vector<double> values(count);
  for (std::uint64_t i = 0; i < count; ++i, pos += 8) values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + pos));
  if (pos != bytes.size()) throw fail("trailing bytes after values");

  Checkpoint ck;
  bool have_kind = false, have_lr_bits = false;
  std::istringstream in(meta);
  std::string l;
  while (std::getline(in, l)) {
    const auto eq = l.find('=');
    if (eq == std::string::npos || eq == 0) throw fail("malformed metadata line '" + l + "'");
    const std::string k = l.substr(0, eq), v = l.substr(eq + 1);
    try {
      if (k == "kind") {
        ck.kind = model_kind_from_string(v);
        have_kind = true;
      } else if (k == "seed") {
        ck.seed = std::stoull(v);
      } else if (k == "budget_images") {
        ck.budget_images = std::stoull(v);
      } else if (k == "lr_bits") {
        ck.lr = std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(v, nullptr, 16)));
        have_lr_bits = true;
      } else if (k == "lr") {
        if (!have_lr_bits) ck.lr = std::stod(v);
      } else {
        ck.meta[k] = v;
      }
    } catch (const std::logic_error&) {
      throw fail("bad value for metadata key '" + k + "'");
    }
  }
  if (!have_kind) throw fail("metadata lacks 'kind'");
  try {
    ck.params = ParamVector(std::move(values));
  } catch (const NumericDivergence& e) {
    throw fail(e.what());
  }
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  // Write-then-rename so an interrupted run never leaves a half-written file behind.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

}  // namespace neon
