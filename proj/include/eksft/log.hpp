#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace eksft::log {

using Sink = std::function<void(const std::string&)>;

namespace detail {

struct State {
    std::mutex mutex;
    Sink sink;
};

inline State& state() {
    static State s;
    return s;
}

}  // namespace detail

// Replaces the warning sink and returns the previous one. An empty sink
// writes to stderr.
inline Sink set_sink(Sink sink) {
    auto& s = detail::state();
    std::lock_guard lock(s.mutex);
    return std::exchange(s.sink, std::move(sink));
}

inline void warn(const std::string& message) {
    auto& s = detail::state();
    std::lock_guard lock(s.mutex);
    if (s.sink) {
        s.sink(message);
    } else {
        std::cerr << "warning: " << message << '\n';
    }
}

// Collects warnings for the lifetime of the object. Used by tests and by the
// trainers to count degenerate batches.
class ScopedCapture {
public:
    ScopedCapture()
        : previous_(set_sink([this](const std::string& m) { messages_.push_back(m); })) {}
    ~ScopedCapture() { set_sink(std::move(previous_)); }
    ScopedCapture(const ScopedCapture&) = delete;
    ScopedCapture& operator=(const ScopedCapture&) = delete;

    const std::vector<std::string>& messages() const { return messages_; }

private:
    std::vector<std::string> messages_;
    Sink previous_;
};

}  // namespace eksft::log
