#pragma once

// Framed request/response protocol for external score providers.
//
// Every frame is a u32 little-endian payload length followed by the payload.
// The provider opens with {"proto":"lensforge-score","version":1}. A request is
// a JSON header {"op":"score","sigma":s,"shape":[h,w],"cond_channels":c} and a
// frame of float32 little-endian rasters (x_t, then c conditioning planes, all
// row-major). The reply is {"ok":true} plus one float32 raster frame, or
// {"ok":false,"error":"..."}.

#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lensforge/io.hpp"
#include "lensforge/sampler.hpp"

extern char **environ;

namespace lensforge::protocol {

inline constexpr const char *kProtoName = "lensforge-score";
inline constexpr int kProtoVersion = 1;
inline constexpr std::uint32_t kMaxFrame = 1u << 28;

inline nlohmann::json handshake() { return {{"proto", kProtoName}, {"version", kProtoVersion}}; }

inline io::Bytes frame(const void *payload, std::size_t n) {
  if (n > kMaxFrame) throw ProtocolError("frame exceeds the size limit");
  io::Bytes out;
  out.reserve(n + 4);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(n));
  const auto *p = static_cast<const std::uint8_t *>(payload);
  out.insert(out.end(), p, p + n);
  return out;
}
inline io::Bytes frame(const std::string &s) { return frame(s.data(), s.size()); }
inline io::Bytes frame(const nlohmann::json &j) { return frame(j.dump()); }

inline io::Bytes encode_f32(const std::vector<const std::vector<double> *> &planes) {
  io::Bytes out;
  for (const auto *p : planes)
    for (double v : *p) io::put_le<float>(out, static_cast<float>(v));
  return out;
}

inline std::vector<double> decode_f32(const io::Bytes &b, std::size_t offset, std::size_t count) {
  if (offset + 4 * count > b.size()) throw ProtocolError("raster frame is too short");
  io::Reader r(b.data() + offset, 4 * count);
  std::vector<double> v(count);
  for (auto &x : v) x = r.get<float>("float32");
  return v;
}

inline nlohmann::json parse_json(const io::Bytes &b, const char *what) {
  auto j = nlohmann::json::parse(b.begin(), b.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ProtocolError(std::string(what) + " is not a JSON object");
  return j;
}

/// Incremental frame splitter for a byte stream.
class FrameBuffer {
public:
  void feed(const std::uint8_t *p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }

  /// Next complete frame, if any; throws on an oversized length prefix.
  std::optional<io::Bytes> next() {
    if (buf_.size() < 4) return std::nullopt;
    io::Reader r(buf_.data(), 4);
    const auto len = r.get<std::uint32_t>("frame length");
    if (len > kMaxFrame) throw ProtocolError("frame length " + std::to_string(len) + " exceeds the limit");
    if (buf_.size() < 4 + static_cast<std::size_t>(len)) return std::nullopt;
    io::Bytes payload(buf_.begin() + 4, buf_.begin() + 4 + len);
    buf_.erase(buf_.begin(), buf_.begin() + 4 + len);
    return payload;
  }
  std::size_t pending() const noexcept { return buf_.size(); }

private:
  io::Bytes buf_;
};

// ---------------------------------------------------------------------------
// Provider side

/// Request fields validated against the raster frame that follows.
struct ScoreRequest {
  double sigma = 0.0;
  std::size_t rows = 0, cols = 0;
  std::size_t cond_channels = 0;
};

inline ScoreRequest parse_request(const io::Bytes &header) {
  const auto j = parse_json(header, "request header");
  ScoreRequest q;
  if (!j.contains("op") || !j["op"].is_string() || j["op"] != "score")
    throw ProtocolError("unsupported op");
  if (!j.contains("sigma") || !j["sigma"].is_number()) throw ProtocolError("missing sigma");
  q.sigma = j["sigma"].get<double>();
  if (!std::isfinite(q.sigma) || q.sigma < 0.0) throw ProtocolError("sigma must be finite and non-negative");
  if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 2 ||
      !j["shape"][0].is_number_unsigned() || !j["shape"][1].is_number_unsigned())
    throw ProtocolError("shape must be [h, w]");
  q.rows = j["shape"][0].get<std::size_t>();
  q.cols = j["shape"][1].get<std::size_t>();
  if (q.rows == 0 || q.cols == 0 || q.rows > 8192 || q.cols > 8192) throw ProtocolError("shape out of range");
  if (j.contains("cond_channels")) {
    if (!j["cond_channels"].is_number_unsigned()) throw ProtocolError("cond_channels must be a count");
    q.cond_channels = j["cond_channels"].get<std::size_t>();
    if (q.cond_channels > 16) throw ProtocolError("too many conditioning channels");
  }
  return q;
}

/// Computes a score for a decoded request; the conditioning planes follow x.
using ScoreFunction = std::function<std::vector<double>(const ScoreRequest &, const std::vector<double> &x,
                                                        const std::vector<double> &cond)>;

/// Reply frames for one request; malformed input yields an error reply.
inline io::Bytes handle_request(const io::Bytes &header, const io::Bytes &raster, const ScoreFunction &fn) {
  try {
    const auto q = parse_request(header);
    const std::size_t n = q.rows * q.cols;
    if (raster.size() != 4 * n * (1 + q.cond_channels))
      throw ProtocolError("raster frame holds " + std::to_string(raster.size()) + " bytes, expected " +
                          std::to_string(4 * n * (1 + q.cond_channels)));
    const auto x = decode_f32(raster, 0, n);
    const auto cond = decode_f32(raster, 4 * n, n * q.cond_channels);
    const auto s = fn(q, x, cond);
    if (s.size() != n) throw ProtocolError("score has the wrong size");
    auto out = frame(nlohmann::json{{"ok", true}});
    const auto body = encode_f32({&s});
    const auto f = frame(body.data(), body.size());
    out.insert(out.end(), f.begin(), f.end());
    return out;
  } catch (const std::exception &e) {
    return frame(nlohmann::json{{"ok", false}, {"error", e.what()}});
  }
}

/// Optional extension: an upper bound on the score's curvature at a noise
/// level and grid size, used by the sampler to cap its step. Sent like a score
/// request (header plus an empty raster frame), so a provider without the
/// extension answers with an ordinary error reply.
using CurvatureFunction = std::function<double(double sigma, std::size_t rows, std::size_t cols)>;

inline bool is_curvature_request(const io::Bytes &header) {
  const auto j = nlohmann::json::parse(header.begin(), header.end(), nullptr, false);
  return j.is_object() && j.contains("op") && j["op"] == "curvature";
}

inline io::Bytes handle_curvature(const io::Bytes &header, const io::Bytes &raster,
                                  const CurvatureFunction &fn) {
  try {
    if (!fn) throw ProtocolError("unsupported op");
    auto j = parse_json(header, "request header");
    j["op"] = "score";
    const auto text = j.dump();
    const auto q = parse_request(io::Bytes(text.begin(), text.end()));
    if (!raster.empty()) throw ProtocolError("curvature requests carry an empty raster frame");
    const double c = fn(q.sigma, q.rows, q.cols);
    if (!(c > 0.0) || !std::isfinite(c)) throw ProtocolError("curvature must be positive");
    return frame(nlohmann::json{{"ok", true}, {"curvature", c}});
  } catch (const std::exception &e) {
    return frame(nlohmann::json{{"ok", false}, {"error", e.what()}});
  }
}

namespace detail {

inline void write_all(int fd, const io::Bytes &b) {
  std::size_t off = 0;
  while (off < b.size()) {
    const ssize_t w = ::write(fd, b.data() + off, b.size() - off);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("write to score pipe failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(w);
  }
}

/// Blocks until a full frame arrives; nullopt on a clean end of stream.
inline std::optional<io::Bytes> read_frame(int fd, FrameBuffer &buf, int timeout_ms) {
  for (;;) {
    if (auto f = buf.next()) return f;
    if (timeout_ms >= 0) {
      pollfd p{fd, POLLIN, 0};
      const int r = ::poll(&p, 1, timeout_ms);
      if (r == 0) throw ProtocolError("timed out waiting for the score provider");
      if (r < 0 && errno != EINTR) throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
    }
    std::uint8_t chunk[65536];
    const ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("read from score pipe failed: ") + std::strerror(errno));
    }
    if (n == 0) {
      if (buf.pending() != 0) throw ProtocolError("stream ended inside a frame");
      return std::nullopt;
    }
    buf.feed(chunk, static_cast<std::size_t>(n));
  }
}

} // namespace detail

/// Provider main loop over file descriptors: sends the handshake, then answers
/// requests until end of input. Returns 0 on clean shutdown, 1 on a framing error.
inline int serve(int in_fd, int out_fd, const ScoreFunction &fn,
                 const CurvatureFunction &curvature = {}) {
  FrameBuffer buf;
  try {
    detail::write_all(out_fd, frame(handshake()));
    for (;;) {
      auto header = detail::read_frame(in_fd, buf, -1);
      if (!header) return 0;
      auto raster = detail::read_frame(in_fd, buf, -1);
      if (!raster) {
        detail::write_all(out_fd, frame(nlohmann::json{{"ok", false}, {"error", "missing raster frame"}}));
        return 1;
      }
      detail::write_all(out_fd, is_curvature_request(*header)
                                    ? handle_curvature(*header, *raster, curvature)
                                    : handle_request(*header, *raster, fn));
    }
  } catch (const std::exception &e) {
    try {
      detail::write_all(out_fd, frame(nlohmann::json{{"ok", false}, {"error", e.what()}}));
    } catch (...) {
    }
    return 1;
  }
}

// ---------------------------------------------------------------------------
// Client side

/// One provider subprocess driven through its stdin/stdout.
class Connection {
public:
  Connection(const std::string &command, int timeout_ms) : timeout_ms_(timeout_ms) {
    static const bool sigpipe_ignored = [] {
      ::signal(SIGPIPE, SIG_IGN);
      return true;
    }();
    (void)sigpipe_ignored;
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw ProtocolError("pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw ProtocolError("pipe failed");
    }
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&fa, from_child[1], STDOUT_FILENO);
    for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) posix_spawn_file_actions_addclose(&fa, fd);
    std::string sh = "/bin/sh", flag = "-c", cmd = command;
    char *argv[] = {sh.data(), flag.data(), cmd.data(), nullptr};
    const int rc = ::posix_spawn(&pid_, "/bin/sh", &fa, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&fa);
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_ = to_child[1];
    out_ = from_child[0];
    if (rc != 0) {
      pid_ = -1;
      close_fds();
      throw ProtocolError("cannot start score provider: " + std::string(std::strerror(rc)));
    }
    try {
      const auto hs = detail::read_frame(out_, buf_, timeout_ms_);
      if (!hs) throw ProtocolError("score provider exited before the handshake");
      const auto j = parse_json(*hs, "handshake");
      if (j.value("proto", "") != kProtoName) throw ProtocolError("handshake names an unknown protocol");
      if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != kProtoVersion)
        throw ProtocolError("unsupported protocol version");
    } catch (...) {
      shutdown();
      throw;
    }
  }
  Connection(const Connection &) = delete;
  Connection &operator=(const Connection &) = delete;
  ~Connection() { shutdown(); }

  bool usable() const noexcept { return !broken_; }

  std::vector<double> request(const ScoreRequest &q, const std::vector<const std::vector<double> *> &planes) {
    if (broken_) throw ProtocolError("score provider connection is unusable after an earlier failure");
    try {
      const nlohmann::json header{{"op", "score"},
                                  {"sigma", q.sigma},
                                  {"shape", {q.rows, q.cols}},
                                  {"cond_channels", q.cond_channels}};
      auto out = frame(header);
      const auto body = encode_f32(planes);
      const auto f = frame(body.data(), body.size());
      out.insert(out.end(), f.begin(), f.end());
      detail::write_all(in_, out);
      const auto reply = detail::read_frame(out_, buf_, timeout_ms_);
      if (!reply) throw ProtocolError("score provider closed the stream");
      const auto j = parse_json(*reply, "reply");
      if (!j.contains("ok") || !j["ok"].is_boolean()) throw ProtocolError("reply lacks an ok flag");
      if (!j["ok"].get<bool>()) {
        // Error replies leave the stream aligned; the connection stays usable.
        throw ProtocolError("score provider error: " + j.value("error", std::string("unspecified")));
      }
      const auto raster = detail::read_frame(out_, buf_, timeout_ms_);
      if (!raster) throw ProtocolError("score provider closed the stream before the raster");
      const std::size_t n = q.rows * q.cols;
      if (raster->size() != 4 * n) throw ProtocolError("score raster has the wrong size");
      return decode_f32(*raster, 0, n);
    } catch (const ProtocolError &e) {
      if (std::string(e.what()).rfind("score provider error:", 0) != 0) broken_ = true;
      throw;
    }
  }

  /// Curvature bound from the provider, or nullopt if it lacks the extension.
  std::optional<double> curvature(double sigma, std::size_t rows, std::size_t cols) {
    if (broken_) throw ProtocolError("score provider connection is unusable after an earlier failure");
    try {
      auto out = frame(nlohmann::json{{"op", "curvature"}, {"sigma", sigma}, {"shape", {rows, cols}}});
      io::put_le<std::uint32_t>(out, 0); // empty raster frame
      detail::write_all(in_, out);
      const auto reply = detail::read_frame(out_, buf_, timeout_ms_);
      if (!reply) throw ProtocolError("score provider closed the stream");
      const auto j = parse_json(*reply, "reply");
      if (!j.contains("ok") || !j["ok"].is_boolean()) throw ProtocolError("reply lacks an ok flag");
      if (!j["ok"].get<bool>()) return std::nullopt;
      if (!j.contains("curvature") || !j["curvature"].is_number())
        throw ProtocolError("curvature reply lacks a value");
      const double c = j["curvature"].get<double>();
      if (!(c > 0.0) || !std::isfinite(c)) throw ProtocolError("curvature must be positive");
      return c;
    } catch (const ProtocolError &) {
      broken_ = true;
      throw;
    }
  }

private:
  void close_fds() {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0) ::close(out_);
    in_ = out_ = -1;
  }
  void shutdown() {
    close_fds();
    if (pid_ > 0) {
      int status = 0;
      // Give the provider a moment to exit on end of input before killing it.
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) {
          pid_ = -1;
          return;
        }
        ::usleep(10000);
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  pid_t pid_ = -1;
  int in_ = -1, out_ = -1;
  int timeout_ms_;
  bool broken_ = false;
  FrameBuffer buf_;
};

/// ScorePrior backed by external provider processes; one connection per
/// concurrent caller, so each chain has its own request in flight.
class ExternalScorePrior final : public ScorePrior {
public:
  explicit ExternalScorePrior(std::string command, int timeout_ms = 300000)
      : command_(std::move(command)), timeout_ms_(timeout_ms) {
    if (command_.empty()) throw InvalidArgument("external prior needs a provider command");
    release(std::make_unique<Connection>(command_, timeout_ms_)); // fail fast on a bad command
  }

  ScalarField score(const ScalarField &x, double sigma, const PhotometryStack *cond) const override {
    ScoreRequest q{sigma, x.n_pix(), x.n_pix(), 0};
    std::vector<const std::vector<double> *> planes{&x.data()};
    if (cond && !cond->empty()) {
      if (!(cond->grid() == x.grid())) throw InvalidArgument("conditioning grid mismatch");
      q.cond_channels = kBands.size();
      for (Band b : kBands) planes.push_back(&cond->band(b).data());
    }
    auto conn = acquire();
    std::vector<double> s;
    try {
      s = conn->request(q, planes);
    } catch (...) {
      if (conn->usable()) release(std::move(conn));
      throw;
    }
    release(std::move(conn));
    return ScalarField(x.grid(), Quantity::generic, std::move(s));
  }

  nlohmann::json describe() const override { return {{"kind", "external"}, {"command", command_}}; }

  double curvature_bound(double sigma, const AngularGrid &g) const override {
    const auto key = std::make_pair(sigma, g.n_pix());
    {
      std::lock_guard lock(mu_);
      if (auto it = curvature_.find(key); it != curvature_.end()) return it->second;
    }
    auto conn = acquire();
    std::optional<double> c;
    try {
      c = conn->curvature(sigma, g.n_pix(), g.n_pix());
    } catch (...) {
      if (conn->usable()) release(std::move(conn));
      throw;
    }
    release(std::move(conn));
    const double v = c.value_or(ScorePrior::curvature_bound(sigma, g));
    std::lock_guard lock(mu_);
    curvature_[key] = v;
    return v;
  }

private:
  std::unique_ptr<Connection> acquire() const {
    {
      std::lock_guard lock(mu_);
      if (!idle_.empty()) {
        auto c = std::move(idle_.back());
        idle_.pop_back();
        return c;
      }
    }
    return std::make_unique<Connection>(command_, timeout_ms_);
  }
  void release(std::unique_ptr<Connection> c) const {
    std::lock_guard lock(mu_);
    idle_.push_back(std::move(c));
  }

  std::string command_;
  int timeout_ms_;
  mutable std::mutex mu_;
  mutable std::vector<std::unique_ptr<Connection>> idle_;
  mutable std::map<std::pair<double, std::size_t>, double> curvature_;
};

} // namespace lensforge::protocol
