#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "flowdistill/error.hpp"

namespace fd {

// Little-endian byte sink, independent of host order.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v);
  void bytes(std::string_view s);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32();
  std::string bytes(std::size_t n);

  void expect_magic(std::string_view magic);
  std::size_t remaining() const { return data_.size() - pos_; }
  // Throws unless the whole buffer has been consumed.
  void expect_end() const;
  const std::string& what() const { return what_; }

 private:
  void need(std::size_t n) const;

  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace fd
