#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace relectra::log {

enum class Level { error = 0, info = 1, debug = 2 };

inline Level threshold() {
    static Level lvl = [] {
        const char* env = std::getenv("RELECTRA_LOG");
        if (!env) return Level::info;
        std::string s = env;
        if (s == "error") return Level::error;
        if (s == "debug") return Level::debug;
        return Level::info;
    }();
    return lvl;
}

inline void write(Level lvl, const std::string& msg) {
    if (lvl > threshold()) return;
    const char* tag = lvl == Level::error ? "error" : (lvl == Level::info ? "info" : "debug");
    std::fprintf(stderr, "[relectra:%s] %s\n", tag, msg.c_str());
}

inline void error(const std::string& msg) { write(Level::error, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void debug(const std::string& msg) { write(Level::debug, msg); }

}  // namespace relectra::log
