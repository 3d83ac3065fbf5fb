#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace humdex::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

// Level comes from the HUMDEX_LOG environment variable (debug|info|warn|error|off),
// default warn. Read once.
inline Level level() {
    static Level lvl = [] {
        const char* env = std::getenv("HUMDEX_LOG");
        if (env == nullptr) return Level::Warn;
        if (std::strcmp(env, "debug") == 0) return Level::Debug;
        if (std::strcmp(env, "info") == 0) return Level::Info;
        if (std::strcmp(env, "warn") == 0) return Level::Warn;
        if (std::strcmp(env, "error") == 0) return Level::Error;
        if (std::strcmp(env, "off") == 0) return Level::Off;
        return Level::Warn;
    }();
    return lvl;
}

inline void write(Level lvl, const char* tag, const std::string& msg) {
    if (lvl < level()) return;
    std::fprintf(stderr, "[humdex %s] %s\n", tag, msg.c_str());
}

inline void debug(const std::string& msg) { write(Level::Debug, "debug", msg); }
inline void info(const std::string& msg) { write(Level::Info, "info", msg); }
inline void warn(const std::string& msg) { write(Level::Warn, "warn", msg); }
inline void error(const std::string& msg) { write(Level::Error, "error", msg); }

}  // namespace humdex::log
