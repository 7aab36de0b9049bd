#pragma once

// Binary frame files ("WSPC" format), streamed with a bounded working set.
//
// Layout, all integers little-endian (see docs/frame_format.md):
//
//   header, 80 bytes
//     0  char[4] magic "WSPC"
//     4  u16     version (1)
//     6  u16     rows (32)
//     8  u16     cols (64)
//    10  u8      counters (1..3)
//    11  u8      reserved, 0
//    12  u32     integration_time_ns
//    16  u64     frame_count (0xFFFFFFFFFFFFFFFF while a writer is open)
//    24  3 x {u32 start_ns, u32 duration_ns}  first gate window per counter
//    48  u32     gate_period_ns (window repeat period, 0 = single window)
//    52  u32     shots_per_frame
//    56  u64     master_seed
//    64  u64     provenance hash
//    72  u8[8]   reserved, 0
//
//   frame record, repeated frame_count times
//     0  u64     frame_index
//     8  u32     sweep_index (0xFFFFFFFF marks reference frames)
//    12  u32     reserved, 0
//    16  u16[counters][rows][cols]  counts
//     .  u8[ceil(rows*cols/8)]      saturation bitmap, bit (i % 8) of byte i/8

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nvcam/detector.hpp"

namespace nvcam {

inline constexpr std::array<char, 4> kFrameMagic{'W', 'S', 'P', 'C'};
inline constexpr std::uint16_t kFrameFormatVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 80;
inline constexpr std::size_t kFramePrefixSize = 16;
inline constexpr std::uint64_t kUnfinalizedCount = std::numeric_limits<std::uint64_t>::max();

class FrameFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TruncatedFileError : public FrameFormatError {
 public:
  TruncatedFileError(const std::string& what, std::int64_t last_complete)
      : FrameFormatError(what), last_complete_index_(last_complete) {}
  /// Index of the last complete frame, -1 if none.
  [[nodiscard]] std::int64_t last_complete_index() const { return last_complete_index_; }

 private:
  std::int64_t last_complete_index_;
};

struct GateEntry {
  std::uint32_t start_ns = 0;
  std::uint32_t duration_ns = 0;
  bool operator==(const GateEntry&) const = default;
};

struct FrameFileHeader {
  std::uint16_t version = kFrameFormatVersion;
  std::uint16_t rows = 32;
  std::uint16_t cols = 64;
  std::uint8_t counters = 1;
  std::uint32_t integration_time_ns = 10'000;
  std::uint64_t frame_count = 0;
  std::array<GateEntry, 3> gates{};
  std::uint32_t gate_period_ns = 0;
  std::uint32_t shots_per_frame = 1;
  std::uint64_t master_seed = 0;
  std::uint64_t provenance_hash = 0;

  bool operator==(const FrameFileHeader&) const = default;

  void validate() const {
    if (version != kFrameFormatVersion) throw FrameFormatError("unsupported frame format version " + std::to_string(version));
    if (static_cast<std::uint32_t>(rows) * cols != 2048) throw FrameFormatError("frame geometry must be 2048 pixels");
    if (counters < 1 || counters > 3) throw FrameFormatError("counters must be 1..3");
  }

  [[nodiscard]] std::size_t pixels() const { return static_cast<std::size_t>(rows) * cols; }
  [[nodiscard]] std::size_t bitmap_bytes() const { return (pixels() + 7) / 8; }
  [[nodiscard]] std::size_t record_size() const {
    return kFramePrefixSize + 2 * counters * pixels() + bitmap_bytes();
  }

  /// Expands the gate table into the windows of one frame.
  [[nodiscard]] std::vector<GateWindow> frame_gates() const {
    std::vector<GateWindow> out;
    const std::uint32_t shots = gate_period_ns == 0 ? 1 : std::max<std::uint32_t>(1, shots_per_frame);
    for (int k = 0; k < counters; ++k) {
      const auto& g = gates[static_cast<std::size_t>(k)];
      if (g.duration_ns == 0) continue;
      for (std::uint32_t s = 0; s < shots; ++s)
        out.push_back({k, static_cast<std::int64_t>(g.start_ns) + static_cast<std::int64_t>(s) * gate_period_ns,
                       g.duration_ns});
    }
    return out;
  }
};

namespace detail {

inline void put_le(std::uint8_t* p, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::array<std::uint8_t, kFrameHeaderSize> encode_header(const FrameFileHeader& h) {
  std::array<std::uint8_t, kFrameHeaderSize> b{};
  std::memcpy(b.data(), kFrameMagic.data(), 4);
  put_le(b.data() + 4, h.version, 2);
  put_le(b.data() + 6, h.rows, 2);
  put_le(b.data() + 8, h.cols, 2);
  b[10] = h.counters;
  put_le(b.data() + 12, h.integration_time_ns, 4);
  put_le(b.data() + 16, h.frame_count, 8);
  for (std::size_t k = 0; k < 3; ++k) {
    put_le(b.data() + 24 + 8 * k, h.gates[k].start_ns, 4);
    put_le(b.data() + 28 + 8 * k, h.gates[k].duration_ns, 4);
  }
  put_le(b.data() + 48, h.gate_period_ns, 4);
  put_le(b.data() + 52, h.shots_per_frame, 4);
  put_le(b.data() + 56, h.master_seed, 8);
  put_le(b.data() + 64, h.provenance_hash, 8);
  return b;
}

inline FrameFileHeader decode_header(const std::uint8_t* b) {
  if (std::memcmp(b, kFrameMagic.data(), 4) != 0) throw FrameFormatError("bad magic: not a WSPC frame file");
  FrameFileHeader h;
  h.version = static_cast<std::uint16_t>(get_le(b + 4, 2));
  if (h.version != kFrameFormatVersion) throw FrameFormatError("unsupported frame format version " + std::to_string(h.version));
  h.rows = static_cast<std::uint16_t>(get_le(b + 6, 2));
  h.cols = static_cast<std::uint16_t>(get_le(b + 8, 2));
  h.counters = b[10];
  h.integration_time_ns = static_cast<std::uint32_t>(get_le(b + 12, 4));
  h.frame_count = get_le(b + 16, 8);
  for (std::size_t k = 0; k < 3; ++k) {
    h.gates[k].start_ns = static_cast<std::uint32_t>(get_le(b + 24 + 8 * k, 4));
    h.gates[k].duration_ns = static_cast<std::uint32_t>(get_le(b + 28 + 8 * k, 4));
  }
  h.gate_period_ns = static_cast<std::uint32_t>(get_le(b + 48, 4));
  h.shots_per_frame = static_cast<std::uint32_t>(get_le(b + 52, 4));
  h.master_seed = get_le(b + 56, 8);
  h.provenance_hash = get_le(b + 64, 8);
  h.validate();
  return h;
}

inline void encode_frame(const FrameFileHeader& h, const FrameRecord& f, std::uint8_t* out) {
  if (f.rows != h.rows || f.cols != h.cols || f.counters != h.counters)
    throw FrameFormatError("frame geometry does not match the file header");
  put_le(out, f.frame_index, 8);
  put_le(out + 8, f.sweep_index, 4);
  put_le(out + 12, 0, 4);
  std::uint8_t* c = out + kFramePrefixSize;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(c, f.counts.data(), 2 * f.counts.size());
  } else {
    for (std::size_t i = 0; i < f.counts.size(); ++i) put_le(c + 2 * i, f.counts[i], 2);
  }
  std::uint8_t* bm = c + 2 * f.counts.size();
  std::memset(bm, 0, h.bitmap_bytes());
  for (std::size_t i = 0; i < f.saturated.size(); ++i)
    if (f.saturated[i]) bm[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
}

inline void decode_frame(const FrameFileHeader& h, const std::uint8_t* in, FrameRecord& f) {
  if (f.rows != h.rows || f.cols != h.cols || f.counters != h.counters ||
      f.counts.size() != static_cast<std::size_t>(h.counters) * h.pixels())
    f = FrameRecord(h.rows, h.cols, h.counters);
  f.frame_index = get_le(in, 8);
  f.sweep_index = static_cast<std::uint32_t>(get_le(in + 8, 4));
  const std::uint8_t* c = in + kFramePrefixSize;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(f.counts.data(), c, 2 * f.counts.size());
  } else {
    for (std::size_t i = 0; i < f.counts.size(); ++i) f.counts[i] = static_cast<std::uint16_t>(get_le(c + 2 * i, 2));
  }
  const std::uint8_t* bm = c + 2 * f.counts.size();
  const std::size_t n = f.saturated.size();
  std::uint8_t* sat = f.saturated.data();
  for (std::size_t byte = 0; byte * 8 < n; ++byte) {
    const unsigned b = bm[byte];
    const std::size_t base = byte * 8;
    if (b == 0 && base + 8 <= n) {
      std::memset(sat + base, 0, 8);
      continue;
    }
    for (std::size_t bit = 0; bit < 8 && base + bit < n; ++bit) sat[base + bit] = (b >> bit) & 1u;
  }
}

}  // namespace detail

/// Single-writer frame file. The frame count is patched into the header
/// by close(); until then the file reads as unfinalized.
class FrameWriter {
 public:
  FrameWriter(const std::filesystem::path& path, FrameFileHeader header) : header_(header) {
    header_.validate();
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    auto h = header_;
    h.frame_count = kUnfinalizedCount;
    const auto bytes = detail::encode_header(h);
    out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    buffer_.resize(header_.record_size());
    bytes_ = kFrameHeaderSize;
  }
  FrameWriter(const FrameWriter&) = delete;
  FrameWriter& operator=(const FrameWriter&) = delete;
  ~FrameWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  void write(const FrameRecord& frame) {
    detail::encode_frame(header_, frame, buffer_.data());
    out_.write(reinterpret_cast<const char*>(buffer_.data()), static_cast<std::streamsize>(buffer_.size()));
    if (!out_) throw std::runtime_error("frame write failed");
    ++count_;
    bytes_ += buffer_.size();
  }

  /// Finalizes the header; returns total bytes in the file.
  std::uint64_t close() {
    if (!out_.is_open()) return bytes_;
    header_.frame_count = count_;
    const auto bytes = detail::encode_header(header_);
    out_.seekp(0);
    out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out_.close();
    return bytes_;
  }

  [[nodiscard]] std::uint64_t frames_written() const { return count_; }
  [[nodiscard]] const FrameFileHeader& header() const { return header_; }

 private:
  FrameFileHeader header_;
  std::ofstream out_;
  std::vector<std::uint8_t> buffer_;
  std::uint64_t count_ = 0;
  std::uint64_t bytes_ = 0;
};

template <class Range>
std::uint64_t write_frames(const FrameFileHeader& header, const Range& frames, const std::filesystem::path& path) {
  FrameWriter w(path, header);
  for (const auto& f : frames) w.write(f);
  return w.close();
}

/// Sequential and random-access reader. Only `chunk_frames` records are
/// resident at a time, whatever the file size.
class FrameReader {
 public:
  explicit FrameReader(const std::filesystem::path& path, std::size_t chunk_frames = 256)
      : path_(path), chunk_frames_(std::max<std::size_t>(1, chunk_frames)) {
    in_.open(path, std::ios::binary);
    if (!in_) throw std::runtime_error("cannot open " + path.string());
    std::array<std::uint8_t, kFrameHeaderSize> hb{};
    in_.read(reinterpret_cast<char*>(hb.data()), hb.size());
    if (in_.gcount() != static_cast<std::streamsize>(hb.size()))
      throw FrameFormatError(path.string() + ": file shorter than the header");
    header_ = detail::decode_header(hb.data());
    record_ = header_.record_size();
    const auto size = std::filesystem::file_size(path);
    const std::uint64_t payload = size - kFrameHeaderSize;
    available_ = payload / record_;
    const bool partial = payload % record_ != 0;
    if (header_.frame_count == kUnfinalizedCount) {
      expected_ = available_;
      truncated_ = partial;
    } else {
      expected_ = header_.frame_count;
      truncated_ = available_ < expected_;
      available_ = std::min(available_, expected_);
    }
    gates_ = header_.frame_gates();
    buffer_.resize(chunk_frames_ * record_);
  }

  [[nodiscard]] const FrameFileHeader& header() const { return header_; }
  /// Frames that can actually be read.
  [[nodiscard]] std::uint64_t frame_count() const { return available_; }
  [[nodiscard]] bool truncated() const { return truncated_; }
  [[nodiscard]] std::size_t record_size() const { return record_; }
  [[nodiscard]] std::size_t buffer_bytes() const { return buffer_.capacity(); }

  [[nodiscard]] FrameRecord read(std::uint64_t index) {
    if (index >= available_) {
      if (index < expected_ || truncated_) throw truncation_error();
      throw std::out_of_range("frame index " + std::to_string(index) + " beyond " + std::to_string(available_));
    }
    std::vector<std::uint8_t> rec(record_);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(kFrameHeaderSize + index * record_));
    in_.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(record_));
    if (in_.gcount() != static_cast<std::streamsize>(record_)) throw truncation_error();
    FrameRecord f(header_.rows, header_.cols, header_.counters);
    decode(rec.data(), f);
    cursor_ -= buffer_fill_ - buffer_pos_;
    buffer_pos_ = buffer_fill_ = 0;
    need_seek_ = true;
    return f;
  }

  /// Reads the next frame into `out` (reusing its storage). Returns false
  /// at the end of a complete file; throws TruncatedFileError after the
  /// last complete frame of a truncated one.
  bool next(FrameRecord& out) {
    if (buffer_pos_ == buffer_fill_) {
      if (cursor_ >= available_) {
        if (truncated_) throw truncation_error();
        return false;
      }
      fill();
    }
    decode(buffer_.data() + buffer_pos_ * record_, out);
    ++buffer_pos_;
    return true;
  }

  /// Raw access to the next block of encoded records (for decoders that
  /// avoid materializing FrameRecord). Empty span at end of data.
  std::span<const std::uint8_t> next_block() {
    if (buffer_pos_ == buffer_fill_) {
      if (cursor_ >= available_) {
        if (truncated_) throw truncation_error();
        return {};
      }
      fill();
    }
    std::span<const std::uint8_t> s(buffer_.data() + buffer_pos_ * record_, (buffer_fill_ - buffer_pos_) * record_);
    buffer_pos_ = buffer_fill_;
    return s;
  }

  void rewind() {
    cursor_ = 0;
    buffer_pos_ = buffer_fill_ = 0;
    need_seek_ = true;
  }

 private:
  void fill() {
    if (need_seek_) {
      in_.clear();
      in_.seekg(static_cast<std::streamoff>(kFrameHeaderSize + cursor_ * record_));
      need_seek_ = false;
    }
    const auto n = std::min<std::uint64_t>(chunk_frames_, available_ - cursor_);
    in_.read(reinterpret_cast<char*>(buffer_.data()), static_cast<std::streamsize>(n * record_));
    if (in_.gcount() != static_cast<std::streamsize>(n * record_)) throw truncation_error();
    cursor_ += n;
    buffer_fill_ = static_cast<std::size_t>(n);
    buffer_pos_ = 0;
  }

  void decode(const std::uint8_t* rec, FrameRecord& f) const {
    detail::decode_frame(header_, rec, f);
    f.integration_us = header_.integration_time_ns * 1e-3;
    f.gates = gates_;
  }

  [[nodiscard]] TruncatedFileError truncation_error() const {
    const auto last = static_cast<std::int64_t>(available_) - 1;
    return TruncatedFileError(path_.string() + ": truncated after frame " + std::to_string(last), last);
  }

  std::filesystem::path path_;
  std::ifstream in_;
  FrameFileHeader header_;
  std::size_t record_ = 0;
  std::size_t chunk_frames_;
  std::uint64_t available_ = 0;
  std::uint64_t expected_ = 0;
  bool truncated_ = false;
  std::vector<GateWindow> gates_;
  std::vector<std::uint8_t> buffer_;
  std::size_t buffer_pos_ = 0;
  std::size_t buffer_fill_ = 0;
  std::uint64_t cursor_ = 0;
  bool need_seek_ = false;
};

// ---------------------------------------------------------------------------
// Binning and reduction
// ---------------------------------------------------------------------------

/// Sums factor x factor pixel blocks; saturation flags are OR-combined.
inline void bin_pixels_into(const FrameRecord& in, int factor, FrameRecord& out) {
  if (factor != 1 && factor != 2 && factor != 4) throw std::invalid_argument("bin_pixels: factor must be 1, 2 or 4");
  if (in.rows % factor != 0 || in.cols % factor != 0)
    throw std::invalid_argument("bin_pixels: factor " + std::to_string(factor) + " does not divide the frame");
  const int rows = in.rows / factor;
  const int cols = in.cols / factor;
  if (out.rows != rows || out.cols != cols || out.counters != in.counters) out = FrameRecord(rows, cols, in.counters);
  out.frame_index = in.frame_index;
  out.sweep_index = in.sweep_index;
  out.integration_us = in.integration_us;
  out.gates = in.gates;
  std::fill(out.counts.begin(), out.counts.end(), std::uint16_t{0});
  std::fill(out.saturated.begin(), out.saturated.end(), std::uint8_t{0});
  const std::size_t in_px = in.pixels();
  const std::size_t out_px = out.pixels();
  for (int k = 0; k < in.counters; ++k) {
    const std::uint16_t* src = in.counts.data() + k * in_px;
    std::uint16_t* dst = out.counts.data() + k * out_px;
    for (int r = 0; r < in.rows; ++r) {
      std::uint16_t* drow = dst + static_cast<std::size_t>(r / factor) * cols;
      const std::uint16_t* srow = src + static_cast<std::size_t>(r) * in.cols;
      for (int oc = 0; oc < cols; ++oc) {
        unsigned sum = drow[oc];
        for (int j = 0; j < factor; ++j) sum += srow[oc * factor + j];
        drow[oc] = static_cast<std::uint16_t>(sum);
      }
    }
  }
  for (int r = 0; r < in.rows; ++r) {
    const std::uint8_t* srow = in.saturated.data() + static_cast<std::size_t>(r) * in.cols;
    std::uint8_t* drow = out.saturated.data() + static_cast<std::size_t>(r / factor) * cols;
    for (int oc = 0; oc < cols; ++oc) {
      std::uint8_t any = 0;
      for (int j = 0; j < factor; ++j) any |= srow[oc * factor + j];
      drow[oc] |= any;
    }
  }
}

[[nodiscard]] inline FrameRecord bin_pixels(const FrameRecord& in, int factor) {
  FrameRecord out;
  out.rows = -1;
  bin_pixels_into(in, factor, out);
  return out;
}

/// Folds every frame of `reader` through `transform` into `acc` with
/// `combine`. Frames are visited in file order; one frame buffer is reused.
template <class T, class Transform, class Combine>
T stream_reduce(FrameReader& reader, Transform&& transform, T acc, Combine&& combine) {
  reader.rewind();
  FrameRecord frame(reader.header().rows, reader.header().cols, reader.header().counters);
  while (reader.next(frame)) acc = combine(std::move(acc), transform(frame));
  return acc;
}

}  // namespace nvcam
