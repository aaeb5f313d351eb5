#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "headsplat/avatar.hpp"
#include "headsplat/harness.hpp"
#include "headsplat/rasterizer.hpp"
#include "headsplat/template.hpp"

namespace headsplat {

// A malformed client message. `seq` is set when the message got far enough
// to carry one.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(const std::string& msg, std::optional<std::int64_t> seq = std::nullopt)
      : std::runtime_error(msg), seq_(seq) {}
  std::optional<std::int64_t> seq() const { return seq_; }

 private:
  std::optional<std::int64_t> seq_;
};

enum class FrameFormat { png, rgba };

struct DriveMessage {
  enum class Kind { params, load, info };
  Kind kind = Kind::info;
  std::int64_t seq = 0;
  FlameParams params;  // kind == params
  int width = 504;
  int height = 504;
  FrameFormat format = FrameFormat::png;
  std::string avatar_path;  // kind == load
};

// Client text message, e.g.
//   {"kind":"params","seq":7,"psi":[...],"theta":[...],
//    "pose":[rx,ry,rz,tx,ty,tz],"w":504,"h":504,"format":"png"}
// psi has K_expr entries, theta 3 (B - 1) axis-angle components; missing
// arrays are zero. The pose translation is relative to the viewing position
// (0, 0, -kViewingDistance), so an all-zero message is the rest pose in view.
DriveMessage parse_drive_message(std::string_view text, const HeadTemplate& tmpl, int max_dim = 2048);

// Binary frame reply: "FRM1", big-endian u64 seq, PNG bytes. The raw variant
// is "RAW1", seq, big-endian u32 width and height, then RGBA8 rows.
std::vector<std::uint8_t> encode_frame_message(std::uint64_t seq, const RenderedFrame& frame, FrameFormat format);

struct DecodedFrameMessage {
  std::uint64_t seq = 0;
  FrameFormat format = FrameFormat::png;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgba;
};
DecodedFrameMessage decode_frame_message(std::span<const std::uint8_t> bytes);

struct ServeOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 8765;  // 0 picks a free port
  RasterConfig raster;
  int max_dim = 2048;
};

// Websocket render service. Each session has one render worker and a
// single pending-request slot; newer "params" overwrite older ones, frames
// for superseded requests are not sent, and at most one finished frame waits
// behind the socket write.
class Server {
 public:
  Server(CanonicalAvatar avatar, HeadTemplate tmpl, ServeOptions options = {});
  static Server from_files(const std::filesystem::path& avatar, const std::filesystem::path& tmpl,
                           ServeOptions options = {});
  Server(Server&&) noexcept;
  Server& operator=(Server&&) noexcept;
  ~Server();

  unsigned short port() const;

  void start();  // serves on a background thread
  void run();    // serves on the calling thread until stop()
  void stop();

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace headsplat
