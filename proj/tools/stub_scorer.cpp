// Deterministic scorer process speaking the gateway protocol on stdin/stdout,
// or on TCP connections with --listen.

#include <iostream>
#include <string>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <CLI11.hpp>

#include "icc/gateway.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Stub scorer for the icc gateway protocol", "icc-stub-scorer"};
    app.option_defaults()->always_capture_default();

    std::string table_path, salt, listen;
    std::size_t reverse_window = 1;
    long delay_ms = 0;
    std::vector<std::string> drop;
    app.add_option("--table", table_path, "Answer from a JSON {id: score} table instead of the hash");
    app.add_option("--salt", salt, "Salt mixed into the hash score");
    app.add_option("--reverse-window", reverse_window, "Answer every N requests in reverse order");
    app.add_option("--delay-ms", delay_ms, "Sleep before each response");
    app.add_option("--drop", drop, "Never answer these ids");
    app.add_option("--listen", listen, "Serve TCP on HOST:PORT instead of stdio (one connection at a time)");
    CLI11_PARSE(app, argc, argv);

    try {
        const icc::ScoreFunction fn =
            table_path.empty() ? icc::stub_scorer(salt) : icc::table_scorer(icc::load_score_table(table_path));
        icc::ServeOptions opts;
        opts.reverse_window = reverse_window;
        opts.delay = std::chrono::milliseconds(delay_ms);
        opts.drop_ids.insert(drop.begin(), drop.end());

        if (listen.empty()) {
            icc::serve_scorer_stream(STDIN_FILENO, STDOUT_FILENO, fn, opts);
            return 0;
        }

        const auto sep = listen.rfind(':');
        if (sep == std::string::npos) throw icc::Error("--listen expects HOST:PORT");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(static_cast<uint16_t>(std::stoi(listen.substr(sep + 1))));
        if (::inet_pton(AF_INET, listen.substr(0, sep).c_str(), &addr.sin_addr) != 1)
            throw icc::Error("--listen host must be an IPv4 address");
        const int server = ::socket(AF_INET, SOCK_STREAM, 0);
        const int one = 1;
        ::setsockopt(server, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(server, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(server, 4) != 0)
            throw icc::Error("cannot listen on " + listen);
        socklen_t len = sizeof addr;
        ::getsockname(server, reinterpret_cast<sockaddr*>(&addr), &len);
        std::cout << "port=" << ntohs(addr.sin_port) << std::endl;
        while (true) {
            const int conn = ::accept(server, nullptr, nullptr);
            if (conn < 0) continue;
            icc::serve_scorer_stream(conn, conn, fn, opts);
            ::close(conn);
        }
    } catch (const std::exception& e) {
        std::cerr << "error=" << e.what() << '\n';
        return 1;
    }
}
