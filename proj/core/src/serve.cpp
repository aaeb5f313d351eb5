#include "headsplat/serve.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "headsplat/animation.hpp"
#include "headsplat/errors.hpp"
#include "headsplat/image.hpp"

namespace headsplat {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using nlohmann::json;

namespace {

std::vector<double> number_array(const json& j, const char* key, std::size_t expected, std::int64_t seq) {
  if (!j.contains(key)) return std::vector<double>(expected, 0.0);
  const auto& a = j.at(key);
  if (!a.is_array()) throw ProtocolError(std::string("'") + key + "' must be an array", seq);
  if (a.size() != expected) {
    throw ProtocolError(std::string("'") + key + "' has " + std::to_string(a.size()) + " entries, expected " +
                            std::to_string(expected),
                        seq);
  }
  std::vector<double> out;
  out.reserve(expected);
  for (const auto& v : a) {
    if (!v.is_number()) throw ProtocolError(std::string("'") + key + "' must hold numbers", seq);
    out.push_back(v.get<double>());
  }
  return out;
}

int dimension(const json& j, const char* key, int max_dim, std::int64_t seq) {
  if (!j.contains(key)) return 504;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ProtocolError(std::string("'") + key + "' must be an integer", seq);
  const auto d = v.get<std::int64_t>();
  if (d < 1 || d > max_dim) {
    throw ProtocolError(std::string("'") + key + "' must be in [1, " + std::to_string(max_dim) + "]", seq);
  }
  return static_cast<int>(d);
}

void put_be(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = bytes - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_be(std::span<const std::uint8_t> in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v = (v << 8) | in[at + i];
  return v;
}

}  // namespace

DriveMessage parse_drive_message(std::string_view text, const HeadTemplate& tmpl, int max_dim) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("message must be a JSON object");

  std::optional<std::int64_t> seq;
  if (j.contains("seq")) {
    const auto& s = j.at("seq");
    if (!s.is_number_integer() || s.get<std::int64_t>() < 0) throw ProtocolError("'seq' must be a non-negative integer");
    seq = s.get<std::int64_t>();
  }
  if (!j.contains("kind") || !j.at("kind").is_string()) throw ProtocolError("missing 'kind'", seq);
  if (!seq) throw ProtocolError("missing 'seq'");

  DriveMessage m;
  m.seq = *seq;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "info") {
    m.kind = DriveMessage::Kind::info;
  } else if (kind == "load") {
    m.kind = DriveMessage::Kind::load;
    if (!j.contains("avatar") || !j.at("avatar").is_string()) throw ProtocolError("'load' needs an 'avatar' path", seq);
    m.avatar_path = j.at("avatar").get<std::string>();
  } else if (kind == "params") {
    m.kind = DriveMessage::Kind::params;
    const auto psi = number_array(j, "psi", static_cast<std::size_t>(tmpl.num_expression()), m.seq);
    const auto theta = number_array(j, "theta", 3 * static_cast<std::size_t>(std::max(0, tmpl.num_bones() - 1)), m.seq);
    const auto pose = number_array(j, "pose", 6, m.seq);
    m.params = viewing_params(tmpl, psi, theta, pose);
    m.width = dimension(j, "w", max_dim, m.seq);
    m.height = dimension(j, "h", max_dim, m.seq);
    if (j.contains("format")) {
      const auto& f = j.at("format");
      if (f == "png") {
        m.format = FrameFormat::png;
      } else if (f == "rgba") {
        m.format = FrameFormat::rgba;
      } else {
        throw ProtocolError("'format' must be \"png\" or \"rgba\"", seq);
      }
    }
  } else {
    throw ProtocolError("unknown kind '" + kind + "'", seq);
  }
  return m;
}

std::vector<std::uint8_t> encode_frame_message(std::uint64_t seq, const RenderedFrame& frame, FrameFormat format) {
  std::vector<std::uint8_t> out;
  if (format == FrameFormat::png) {
    const auto png = encode_png(frame.rgb, &frame.alpha);
    out.reserve(12 + png.size());
    out.insert(out.end(), {'F', 'R', 'M', '1'});
    put_be(out, seq, 8);
    out.insert(out.end(), png.begin(), png.end());
  } else {
    const auto rgba = to_rgba8(frame.rgb, &frame.alpha);
    out.reserve(20 + rgba.size());
    out.insert(out.end(), {'R', 'A', 'W', '1'});
    put_be(out, seq, 8);
    put_be(out, static_cast<std::uint64_t>(frame.rgb.width), 4);
    put_be(out, static_cast<std::uint64_t>(frame.rgb.height), 4);
    out.insert(out.end(), rgba.begin(), rgba.end());
  }
  return out;
}

DecodedFrameMessage decode_frame_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("frame message too short");
  const std::string magic(bytes.begin(), bytes.begin() + 4);
  DecodedFrameMessage d;
  d.seq = get_be(bytes, 4, 8);
  if (magic == "FRM1") {
    d.format = FrameFormat::png;
    const auto png = decode_png(bytes.subspan(12));
    d.width = png.rgb.width;
    d.height = png.rgb.height;
    d.rgba = to_rgba8(png.rgb, &png.alpha);
  } else if (magic == "RAW1") {
    if (bytes.size() < 20) throw FormatError("frame message too short");
    d.format = FrameFormat::rgba;
    d.width = static_cast<int>(get_be(bytes, 12, 4));
    d.height = static_cast<int>(get_be(bytes, 16, 4));
    if (bytes.size() != 20 + static_cast<std::size_t>(d.width) * d.height * 4) throw FormatError("raw frame size mismatch");
    d.rgba.assign(bytes.begin() + 20, bytes.end());
  } else {
    throw FormatError("unknown frame magic");
  }
  return d;
}

namespace {

struct Model {
  Model(std::shared_ptr<const HeadTemplate> t, CanonicalAvatar a) : tmpl(std::move(t)), avatar(std::move(a)), rig(*tmpl, avatar) {
    check_compatible(avatar, *tmpl);
  }
  std::shared_ptr<const HeadTemplate> tmpl;
  CanonicalAvatar avatar;
  Rig rig;
};

json info_json(const Model& m, std::int64_t seq) {
  return {{"kind", "info"},
          {"seq", seq},
          {"k_expr", m.tmpl->num_expression()},
          {"bones", m.tmpl->num_bones()},
          {"theta_size", 3 * std::max(0, m.tmpl->num_bones() - 1)},
          {"gaussians", m.avatar.size()},
          {"template_crc", m.tmpl->crc()}};
}

json error_json(std::optional<std::int64_t> seq, const std::string& msg) {
  json j{{"kind", "error"}, {"msg", msg}};
  j["seq"] = seq ? json(*seq) : json(nullptr);
  return j;
}

constexpr std::size_t kMaxQueuedText = 256;

class Session : public std::enable_shared_from_this<Session> {
 public:
  Session(tcp::socket socket, std::shared_ptr<const Model> model, const ServeOptions& options)
      : ws_(std::move(socket)), executor_(ws_.get_executor()), options_(options), model_(std::move(model)),
        worker_([this] { work(); }) {}

  ~Session() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  void start() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(beast::bind_front_handler(&Session::on_accept, shared_from_this()));
  }

  void close() {
    beast::error_code ec;
    beast::get_lowest_layer(ws_).socket().close(ec);
  }

 private:
  struct Outgoing {
    bool text = false;
    std::shared_ptr<const std::vector<std::uint8_t>> bytes;
  };

  void on_accept(beast::error_code ec) {
    if (ec) return;
    do_read();
  }

  void do_read() { ws_.async_read(buffer_, beast::bind_front_handler(&Session::on_read, shared_from_this())); }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return;
    if (ws_.got_text()) {
      handle(beast::buffers_to_string(buffer_.data()));
    } else {
      send_text(error_json(std::nullopt, "binary client messages are not supported"));
    }
    buffer_.consume(buffer_.size());
    do_read();
  }

  void handle(const std::string& text) {
    std::optional<std::int64_t> seq;
    try {
      const auto model = snapshot();
      const auto msg = parse_drive_message(text, *model->tmpl, options_.max_dim);
      seq = msg.seq;
      switch (msg.kind) {
        case DriveMessage::Kind::info:
          send_text(info_json(*model, msg.seq));
          break;
        case DriveMessage::Kind::load: {
          auto next = std::make_shared<const Model>(model->tmpl, load_avatar(msg.avatar_path));
          {
            std::lock_guard lock(mutex_);
            model_ = next;
          }
          send_text(info_json(*next, msg.seq));
          break;
        }
        case DriveMessage::Kind::params:
          // Anything not newer than the last accepted request is stale.
          if (last_seq_ && msg.seq <= *last_seq_) break;
          last_seq_ = msg.seq;
          {
            std::lock_guard lock(mutex_);
            pending_ = msg;
          }
          cv_.notify_one();
          break;
      }
    } catch (const ProtocolError& e) {
      send_text(error_json(e.seq(), e.what()));
    } catch (const std::exception& e) {
      send_text(error_json(seq, e.what()));
    }
  }

  std::shared_ptr<const Model> snapshot() {
    std::lock_guard lock(mutex_);
    return model_;
  }

  void work() {
    for (;;) {
      DriveMessage msg;
      std::shared_ptr<const Model> model;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return stopping_ || pending_.has_value(); });
        if (stopping_) return;
        msg = std::move(*pending_);
        pending_.reset();
        model = model_;
      }
      std::shared_ptr<const std::vector<std::uint8_t>> bytes;
      std::string error;
      try {
        const auto posed = model->rig.pose(model->avatar, msg.params);
        const auto frame = render(posed, Camera::normalized(msg.width, msg.height), options_.raster);
        bytes = std::make_shared<const std::vector<std::uint8_t>>(
            encode_frame_message(static_cast<std::uint64_t>(msg.seq), frame, msg.format));
      } catch (const std::exception& e) {
        error = e.what();
      }
      {
        std::lock_guard lock(mutex_);
        if (stopping_) return;
        if (pending_) continue;  // superseded while rendering
      }
      std::weak_ptr<Session> weak = weak_from_this();
      const auto seq = msg.seq;
      net::post(executor_, [weak, bytes, error, seq] {
        const auto self = weak.lock();
        if (!self) return;
        if (bytes) {
          self->frame_slot_ = Outgoing{false, bytes};
          self->kick();
        } else {
          self->send_text(error_json(seq, error));
        }
      });
    }
  }

  void send_text(const json& j) {
    if (text_queue_.size() >= kMaxQueuedText) return;
    const auto s = j.dump();
    text_queue_.push_back(Outgoing{true, std::make_shared<const std::vector<std::uint8_t>>(s.begin(), s.end())});
    kick();
  }

  void kick() {
    if (writing_) return;
    Outgoing next;
    if (!text_queue_.empty()) {
      next = std::move(text_queue_.front());
      text_queue_.pop_front();
    } else if (frame_slot_) {
      next = std::move(*frame_slot_);
      frame_slot_.reset();
    } else {
      return;
    }
    writing_ = true;
    ws_.text(next.text);
    ws_.async_write(net::buffer(*next.bytes),
                    [self = shared_from_this(), keep = next.bytes](beast::error_code ec, std::size_t) {
                      self->writing_ = false;
                      if (ec) return;
                      self->kick();
                    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  net::any_io_executor executor_;
  beast::flat_buffer buffer_;
  const ServeOptions& options_;

  // IO-thread state.
  std::optional<std::int64_t> last_seq_;
  std::deque<Outgoing> text_queue_;
  std::optional<Outgoing> frame_slot_;
  bool writing_ = false;

  // Shared with the worker.
  std::mutex mutex_;
  std::condition_variable cv_;
  bool stopping_ = false;
  std::optional<DriveMessage> pending_;
  std::shared_ptr<const Model> model_;

  std::thread worker_;
};

}  // namespace

struct Server::Impl {
  Impl(CanonicalAvatar avatar, HeadTemplate tmpl, ServeOptions opts)
      : options(std::move(opts)),
        model(std::make_shared<const Model>(std::make_shared<const HeadTemplate>(std::move(tmpl)), std::move(avatar))),
        acceptor(ioc) {
    const tcp::endpoint endpoint(net::ip::make_address(options.address), options.port);
    acceptor.open(endpoint.protocol());
    acceptor.set_option(net::socket_base::reuse_address(true));
    acceptor.bind(endpoint);
    acceptor.listen(net::socket_base::max_listen_connections);
    port = acceptor.local_endpoint().port();
    do_accept();
  }

  void do_accept() {
    acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      auto session = std::make_shared<Session>(std::move(socket), model, options);
      std::erase_if(sessions, [](const auto& w) { return w.expired(); });
      sessions.push_back(session);
      session->start();
      do_accept();
    });
  }

  void stop() {
    if (stopped.exchange(true)) return;
    net::post(ioc, [this] {
      beast::error_code ec;
      acceptor.close(ec);
      for (auto& w : sessions) {
        if (auto s = w.lock()) s->close();
      }
    });
  }

  ServeOptions options;
  std::shared_ptr<const Model> model;
  net::io_context ioc{1};
  tcp::acceptor acceptor;
  std::vector<std::weak_ptr<Session>> sessions;
  unsigned short port = 0;
  std::atomic<bool> stopped{false};
  std::thread thread;
};

Server::Server(CanonicalAvatar avatar, HeadTemplate tmpl, ServeOptions options)
    : impl_(std::make_unique<Impl>(std::move(avatar), std::move(tmpl), std::move(options))) {}

Server Server::from_files(const std::filesystem::path& avatar, const std::filesystem::path& tmpl,
                          ServeOptions options) {
  return Server(load_avatar(avatar), load_template(tmpl), std::move(options));
}

Server::Server(Server&&) noexcept = default;
Server& Server::operator=(Server&&) noexcept = default;

Server::~Server() {
  if (!impl_) return;
  impl_->stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

unsigned short Server::port() const { return impl_->port; }

void Server::start() {
  if (impl_->thread.joinable()) throw std::logic_error("server already started");
  impl_->thread = std::thread([impl = impl_.get()] { impl->ioc.run(); });
}

void Server::run() { impl_->ioc.run(); }

void Server::stop() { impl_->stop(); }

}  // namespace headsplat
