#include "flowdistill/hash.hpp"

#include <openssl/evp.h>

#include <array>
#include <memory>

#include "flowdistill/binary_io.hpp"

namespace fd {

namespace {

std::string digest(const void* data, std::size_t n) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 || EVP_DigestUpdate(ctx.get(), data, n) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
    throw Error("sha1: digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

}  // namespace

std::string sha1_hex(std::span<const std::uint8_t> bytes) { return digest(bytes.data(), bytes.size()); }
std::string sha1_hex(std::string_view text) { return digest(text.data(), text.size()); }
std::string sha1_file(const std::filesystem::path& path) { return sha1_hex(read_file_bytes(path)); }

}  // namespace fd
