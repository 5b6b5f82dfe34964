#pragma once

// Scorer gateway: newline-delimited JSON requests/responses, correlated by id,
// over a child process's standard streams or a TCP connection, plus
// deterministic in-process scorers for tests.
//
//   request:  {"id": "...", "caption": "..."}
//   response: {"id": "...", "score": 0.97}  or  {"id": "...", "error": "..."}

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstring>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "icc/corpus.hpp"
#include "icc/error.hpp"
#include "icc/hash.hpp"

extern char** environ;

namespace icc {

class GatewayError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public GatewayError {
public:
    using GatewayError::GatewayError;
};

struct ScoreRequest {
    std::string id;
    std::string caption;
};

struct ScoreResponse {
    std::string id;
    std::optional<double> score;
    std::optional<std::string> error;

    bool ok() const noexcept { return score.has_value(); }
    bool operator==(const ScoreResponse&) const = default;
};

inline ScoreResponse score_ok(std::string id, double score) { return {std::move(id), score, std::nullopt}; }
inline ScoreResponse score_error(std::string id, std::string error) { return {std::move(id), std::nullopt, std::move(error)}; }

// ---------------------------------------------------------------------------
// Wire format

inline std::string encode_request(const ScoreRequest& r) {
    ordered_json j;
    j["id"] = r.id;
    j["caption"] = r.caption;
    return j.dump() + '\n';
}

inline std::string encode_response(const ScoreResponse& r) {
    ordered_json j;
    j["id"] = r.id;
    if (r.score) j["score"] = *r.score;
    else j["error"] = r.error.value_or("unspecified error");
    return j.dump() + '\n';
}

inline ScoreRequest parse_request(std::string_view line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error&) {
        throw ProtocolError("unparseable request line");
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("caption") ||
        !j["caption"].is_string())
        throw ProtocolError("request must carry string 'id' and 'caption'");
    ScoreRequest r{j["id"].get<std::string>(), j["caption"].get<std::string>()};
    if (r.id.empty()) throw ProtocolError("request id is empty");
    return r;
}

/// Throws ProtocolError unless the line is a valid response object.
inline ScoreResponse parse_response(std::string_view line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error&) {
        throw ProtocolError("unparseable response line: " + std::string(line.substr(0, 200)));
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
        throw ProtocolError("response lacks a string 'id'");
    const bool has_score = j.contains("score");
    const bool has_error = j.contains("error");
    if (has_score == has_error) throw ProtocolError("response must carry exactly one of 'score' or 'error'");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() != "id" && it.key() != "score" && it.key() != "error")
            throw ProtocolError("response has unknown field '" + it.key() + "'");
    }
    ScoreResponse r;
    r.id = j["id"].get<std::string>();
    if (has_score) {
        if (!j["score"].is_number()) throw ProtocolError("response score is not a number");
        const double s = j["score"].get<double>();
        if (!is_unit_interval(s)) throw ProtocolError("response score outside [0,1]");
        r.score = s;
    } else {
        if (!j["error"].is_string()) throw ProtocolError("response error is not a string");
        r.error = j["error"].get<std::string>();
    }
    return r;
}

// ---------------------------------------------------------------------------
// In-process scorers

/// Deterministic test score: FNV-1a 64 over (salt, 0x1F, caption bytes), passed
/// through the SplitMix64 finalizer; the top 53 bits divided by 2^53.
inline double stub_score(std::string_view caption, std::string_view salt = {}) {
    std::uint64_t h = hash::fnv1a64(salt);
    h = hash::fnv1a64(std::string_view("\x1f", 1), h);
    h = hash::fnv1a64(caption, h);
    return hash::unit_double(hash::mix64(h));
}

using ScoreFunction = std::function<ScoreResponse(const ScoreRequest&)>;

inline ScoreFunction stub_scorer(std::string salt = {}) {
    return [salt = std::move(salt)](const ScoreRequest& r) { return score_ok(r.id, stub_score(r.caption, salt)); };
}

inline ScoreFunction table_scorer(std::map<std::string, double> table) {
    return [table = std::move(table)](const ScoreRequest& r) {
        auto it = table.find(r.id);
        if (it == table.end()) return score_error(r.id, "unknown id");
        return score_ok(r.id, it->second);
    };
}

/// Table file: one JSON object mapping id to score.
inline std::map<std::string, double> load_score_table(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open score table " + path.string());
    std::map<std::string, double> table;
    try {
        const json j = json::parse(in);
        if (!j.is_object()) throw FormatError("score table must be an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            const double v = it.value().get<double>();
            if (!is_unit_interval(v)) throw FormatError("score table value outside [0,1] for '" + it.key() + "'");
            table.emplace(it.key(), v);
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return table;
}

// ---------------------------------------------------------------------------
// Transports

namespace detail {

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }

    int get() const noexcept { return fd_; }
    explicit operator bool() const noexcept { return fd_ >= 0; }
    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline void set_nonblocking(int fd) {
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

inline std::string errno_text() { return std::strerror(errno); }

/// Splits a command line on whitespace; single and double quotes group words.
inline std::vector<std::string> split_command(std::string_view cmd) {
    std::vector<std::string> out;
    std::string cur;
    bool in_word = false;
    char quote = 0;
    for (char c : cmd) {
        if (quote) {
            if (c == quote) quote = 0;
            else cur.push_back(c);
        } else if (c == '\'' || c == '"') {
            quote = c;
            in_word = true;
        } else if (text::is_space(c)) {
            if (in_word) out.push_back(std::move(cur));
            cur.clear();
            in_word = false;
        } else {
            cur.push_back(c);
            in_word = true;
        }
    }
    if (quote) throw GatewayError("unterminated quote in command");
    if (in_word) out.push_back(std::move(cur));
    return out;
}

} // namespace detail

/// A connected byte stream to a scorer: one socket whose peer is either a
/// spawned child (on its stdin/stdout) or a TCP server.
class ScorerConnection {
public:
    static ScorerConnection spawn(const std::vector<std::string>& argv) {
        if (argv.empty()) throw GatewayError("empty scorer command");
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
            throw GatewayError("socketpair failed: " + detail::errno_text());
        detail::Fd parent(sv[0]);
        detail::Fd child(sv[1]);

        posix_spawn_file_actions_t actions;
        posix_spawn_file_actions_init(&actions);
        posix_spawn_file_actions_adddup2(&actions, child.get(), STDIN_FILENO);
        posix_spawn_file_actions_adddup2(&actions, child.get(), STDOUT_FILENO);

        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        pid_t pid = -1;
        const int rc = ::posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
        posix_spawn_file_actions_destroy(&actions);
        if (rc != 0) throw GatewayError("cannot start scorer '" + argv[0] + "': " + std::strerror(rc));

        ScorerConnection c;
        c.fd_ = std::move(parent);
        c.pid_ = pid;
        detail::set_nonblocking(c.fd_.get());
        return c;
    }

    static ScorerConnection connect_tcp(const std::string& host, const std::string& port) {
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res);
        if (rc != 0) throw GatewayError("cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
        std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
        for (addrinfo* ai = res; ai; ai = ai->ai_next) {
            detail::Fd fd(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
            if (!fd) continue;
            if (::connect(fd.get(), ai->ai_addr, ai->ai_addrlen) == 0) {
                ScorerConnection c;
                c.fd_ = std::move(fd);
                detail::set_nonblocking(c.fd_.get());
                return c;
            }
        }
        throw GatewayError("scorer unreachable at " + host + ":" + port);
    }

    /// Wraps an already-connected socket (used by tests).
    static ScorerConnection adopt(int fd) {
        ScorerConnection c;
        c.fd_ = detail::Fd(fd);
        detail::set_nonblocking(fd);
        return c;
    }

    ScorerConnection() = default;
    ScorerConnection(ScorerConnection&& o) noexcept : fd_(std::move(o.fd_)), pid_(std::exchange(o.pid_, -1)) {}
    ScorerConnection& operator=(ScorerConnection&& o) noexcept {
        if (this != &o) {
            shutdown();
            fd_ = std::move(o.fd_);
            pid_ = std::exchange(o.pid_, -1);
        }
        return *this;
    }
    ~ScorerConnection() { shutdown(); }

    int fd() const noexcept { return fd_.get(); }

    /// Closes the stream and reaps the child (killing it if it lingers).
    void shutdown() {
        if (fd_) {
            ::shutdown(fd_.get(), SHUT_RDWR);
            fd_.reset();
        }
        if (pid_ > 0) {
            int status = 0;
            for (int i = 0; i < 200; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) != 0) {
                    pid_ = -1;
                    return;
                }
                std::this_thread::sleep_for(std::chrono::milliseconds(10));
            }
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
            pid_ = -1;
        }
    }

private:
    detail::Fd fd_;
    pid_t pid_ = -1;
};

struct BatchOptions {
    std::chrono::milliseconds timeout{30000};
    std::size_t max_in_flight = 64;
};

/// Responses in request order; absent entries were never answered.
struct BatchOutcome {
    std::vector<std::optional<ScoreResponse>> responses;
    /// Set when the endpoint failed (closed, protocol violation, I/O error).
    std::optional<std::string> failure;
};

class ScorerClient {
public:
    virtual ~ScorerClient() = default;
    virtual BatchOutcome score(std::span<const ScoreRequest> requests, const BatchOptions& options) = 0;
};

class InProcessClient final : public ScorerClient {
public:
    explicit InProcessClient(ScoreFunction fn) : fn_(std::move(fn)) {}

    BatchOutcome score(std::span<const ScoreRequest> requests, const BatchOptions&) override {
        BatchOutcome out;
        out.responses.reserve(requests.size());
        for (const auto& r : requests) {
            ScoreResponse resp = fn_(r);
            resp.id = r.id;
            out.responses.emplace_back(std::move(resp));
        }
        return out;
    }

private:
    ScoreFunction fn_;
};

/// Pipelines up to max_in_flight requests over one connection and matches
/// responses back by id, so the scorer may answer in any order.
class StreamClient final : public ScorerClient {
public:
    explicit StreamClient(ScorerConnection conn) : conn_(std::move(conn)) {}

    BatchOutcome score(std::span<const ScoreRequest> requests, const BatchOptions& options) override {
        using clock = std::chrono::steady_clock;
        BatchOutcome out;
        out.responses.resize(requests.size());
        if (broken_) {
            out.failure = "connection unusable after earlier failure: " + *broken_;
            return out;
        }
        if (options.max_in_flight < 1) throw GatewayError("max_in_flight must be at least 1");

        std::unordered_map<std::string, std::deque<std::size_t>> waiting;
        std::deque<std::pair<std::size_t, clock::time_point>> sent;  // send order
        std::string outbuf;
        std::size_t next = 0, in_flight = 0, done = 0;

        const auto fail = [&](std::string why) {
            broken_ = why;
            out.failure = std::move(why);
            return out;
        };

        while (done < requests.size()) {
            while (in_flight < options.max_in_flight && next < requests.size()) {
                outbuf += encode_request(requests[next]);
                waiting[requests[next].id].push_back(next);
                sent.emplace_back(next, clock::now());
                ++next;
                ++in_flight;
            }
            while (!sent.empty() && out.responses[sent.front().first]) sent.pop_front();

            const auto now = clock::now();
            const auto deadline = sent.front().second + options.timeout;
            if (now >= deadline) {
                for (std::size_t i = 0; i < requests.size(); ++i)
                    if (!out.responses[i]) out.responses[i] = score_error(requests[i].id, "timeout");
                broken_ = "timeout";
                return out;
            }

            pollfd p{conn_.fd(), static_cast<short>(POLLIN | (outbuf.empty() ? 0 : POLLOUT)), 0};
            const auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1;
            const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(wait_ms, 1 << 30)));
            if (rc < 0) {
                if (errno == EINTR) continue;
                return fail("poll failed: " + detail::errno_text());
            }
            if (rc == 0) continue;

            if ((p.revents & POLLOUT) && !outbuf.empty()) {
                const ssize_t n = ::send(conn_.fd(), outbuf.data(), outbuf.size(), MSG_NOSIGNAL);
                if (n > 0) outbuf.erase(0, static_cast<std::size_t>(n));
                else if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR)
                    return fail("write to scorer failed: " + detail::errno_text());
            }
            if (p.revents & (POLLIN | POLLHUP | POLLERR)) {
                char buf[65536];
                const ssize_t n = ::recv(conn_.fd(), buf, sizeof buf, 0);
                if (n == 0) return fail("scorer closed the connection");
                if (n < 0) {
                    if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
                    return fail("read from scorer failed: " + detail::errno_text());
                }
                inbuf_.append(buf, static_cast<std::size_t>(n));
                std::size_t start = 0;
                for (std::size_t nl; (nl = inbuf_.find('\n', start)) != std::string::npos; start = nl + 1) {
                    std::string_view line(inbuf_.data() + start, nl - start);
                    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
                    if (text::trim(line).empty()) continue;
                    ScoreResponse resp;
                    try {
                        resp = parse_response(line);
                    } catch (const ProtocolError& e) {
                        return fail(std::string("protocol violation: ") + e.what());
                    }
                    auto it = waiting.find(resp.id);
                    if (it == waiting.end() || it->second.empty())
                        return fail("protocol violation: response for unexpected id '" + resp.id + "'");
                    const std::size_t idx = it->second.front();
                    it->second.pop_front();
                    out.responses[idx] = std::move(resp);
                    --in_flight;
                    ++done;
                }
                inbuf_.erase(0, start);
            }
        }
        return out;
    }

private:
    ScorerConnection conn_;
    std::string inbuf_;
    std::optional<std::string> broken_;
};

/// Endpoint designators: `cmd:<argv>`, `tcp:<host>:<port>`, and the in-process
/// test scorers `stub`, `stub:<salt>`, `table:<path>`.
inline std::unique_ptr<ScorerClient> open_endpoint(const std::string& designator) {
    const auto colon = designator.find(':');
    const std::string kind = designator.substr(0, colon);
    const std::string rest = colon == std::string::npos ? std::string() : designator.substr(colon + 1);
    if (kind == "cmd") return std::make_unique<StreamClient>(ScorerConnection::spawn(detail::split_command(rest)));
    if (kind == "tcp") {
        const auto sep = rest.rfind(':');
        if (sep == std::string::npos || sep == 0 || sep + 1 == rest.size())
            throw GatewayError("tcp endpoint must be tcp:<host>:<port>");
        return std::make_unique<StreamClient>(ScorerConnection::connect_tcp(rest.substr(0, sep), rest.substr(sep + 1)));
    }
    if (kind == "stub") return std::make_unique<InProcessClient>(stub_scorer(rest));
    if (kind == "table") return std::make_unique<InProcessClient>(table_scorer(load_score_table(rest)));
    throw GatewayError("unknown endpoint '" + designator + "' (expected cmd:, tcp:, stub or table:)");
}

/// One response per request, in request order. Per-request errors (including
/// timeouts) are returned as error responses; endpoint failures throw.
inline std::vector<ScoreResponse> score_batch(ScorerClient& client, std::span<const ScoreRequest> requests,
                                              const BatchOptions& options = {}) {
    auto outcome = client.score(requests, options);
    if (outcome.failure) throw GatewayError(*outcome.failure);
    std::vector<ScoreResponse> out;
    out.reserve(requests.size());
    for (auto& r : outcome.responses) out.push_back(std::move(*r));
    return out;
}

struct AttachStats {
    std::size_t scored = 0;
    std::size_t failed = 0;
};

struct ScoreFailure {
    std::string id;
    std::string error;
};

inline std::string encode_failure(const ScoreFailure& f) {
    ordered_json j;
    j["id"] = f.id;
    j["error"] = f.error;
    return j.dump() + '\n';
}

/// Streams records through the scorer in batches of batch_size. Scored records
/// go to sink in input order; per-record errors go to on_failure. An endpoint
/// failure throws after every completed record of the batch has been emitted.
template <RecordSource S, class Sink, class FailureSink>
AttachStats attach_scores(S& source, ScorerClient& client, const std::string& score_name, std::size_t batch_size,
                          const BatchOptions& options, Sink&& sink, FailureSink&& on_failure) {
    if (batch_size < 1) throw Error("batch_size must be at least 1");
    AttachStats st;
    std::vector<CaptionRecord> batch;
    std::vector<ScoreRequest> requests;
    bool more = true;
    while (more) {
        batch.clear();
        requests.clear();
        while (batch.size() < batch_size) {
            auto r = source.next();
            if (!r) {
                more = false;
                break;
            }
            requests.push_back({r->id, r->caption});
            batch.push_back(std::move(*r));
        }
        if (batch.empty()) break;

        auto outcome = client.score(requests, options);
        bool timed_out = false;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            auto& resp = outcome.responses[i];
            if (!resp) continue;
            if (resp->score) {
                batch[i].scores[score_name] = *resp->score;
                sink(std::move(batch[i]));
                ++st.scored;
            } else {
                timed_out = timed_out || resp->error == "timeout";
                on_failure(ScoreFailure{batch[i].id, resp->error.value_or("")});
                ++st.failed;
            }
        }
        if (outcome.failure) throw GatewayError("scorer endpoint failed: " + *outcome.failure);
        if (timed_out) throw GatewayError("scorer endpoint timed out");
    }
    return st;
}

// ---------------------------------------------------------------------------
// Server side (used by the stub scorer executable and protocol tests)

struct ServeOptions {
    /// Buffer this many requests and answer them in reverse order (1 = in order).
    std::size_t reverse_window = 1;
    std::chrono::milliseconds delay{0};
    /// Requests with these ids are never answered.
    std::unordered_set<std::string> drop_ids;
};

/// Answers newline-delimited requests read from in_fd on out_fd until EOF.
/// Malformed lines get an error response with an empty id. Returns the number
/// of requests read.
inline std::size_t serve_scorer_stream(int in_fd, int out_fd, const ScoreFunction& fn,
                                       const ServeOptions& options = {}) {
    const auto write_all = [&](const std::string& s) {
        std::size_t off = 0;
        while (off < s.size()) {
            const ssize_t n = ::send(out_fd, s.data() + off, s.size() - off, MSG_NOSIGNAL);
            if (n < 0 && errno == ENOTSOCK) {
                const ssize_t m = ::write(out_fd, s.data() + off, s.size() - off);
                if (m <= 0) return false;
                off += static_cast<std::size_t>(m);
                continue;
            }
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) return false;
            off += static_cast<std::size_t>(n);
        }
        return true;
    };

    std::vector<std::string> pending;
    const auto flush = [&]() {
        bool ok = true;
        for (auto it = pending.rbegin(); it != pending.rend(); ++it) ok = ok && write_all(*it);
        pending.clear();
        return ok;
    };

    std::string buf;
    std::size_t count = 0;
    char chunk[65536];
    while (true) {
        // A partial window is answered once the client stops sending.
        if (!pending.empty()) {
            pollfd p{in_fd, POLLIN, 0};
            if (::poll(&p, 1, 20) == 0 && !flush()) return count;
        }
        const ssize_t n = ::read(in_fd, chunk, sizeof chunk);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        buf.append(chunk, static_cast<std::size_t>(n));
        std::size_t start = 0;
        for (std::size_t nl; (nl = buf.find('\n', start)) != std::string::npos; start = nl + 1) {
            std::string_view line(buf.data() + start, nl - start);
            if (text::trim(line).empty()) continue;
            ++count;
            ScoreResponse resp;
            try {
                const ScoreRequest req = parse_request(line);
                if (options.drop_ids.count(req.id)) continue;
                resp = fn(req);
                resp.id = req.id;
            } catch (const ProtocolError& e) {
                resp = score_error("", e.what());
            }
            if (options.delay.count() > 0) std::this_thread::sleep_for(options.delay);
            pending.push_back(encode_response(resp));
            if (pending.size() >= std::max<std::size_t>(1, options.reverse_window) && !flush()) return count;
        }
        buf.erase(0, start);
    }
    flush();
    return count;
}

} // namespace icc
