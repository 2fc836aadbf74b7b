#pragma once

#include <stdexcept>
#include <string>

namespace hmseg {

// Error classes surfaced by the CLI as "error: <class>: <message>".
enum class ErrClass {
    usage,         // bad command line
    config,        // invalid or unknown config key/value
    precondition,  // API called with arguments violating its contract
    io,            // filesystem failure
    format,        // malformed on-disk artifact (volume, checkpoint, manifest)
    numeric,       // non-finite values where finite ones are required
};

inline const char* err_class_name(ErrClass c) {
    switch (c) {
        case ErrClass::usage: return "usage";
        case ErrClass::config: return "config-invalid";
        case ErrClass::precondition: return "precondition";
        case ErrClass::io: return "io-error";
        case ErrClass::format: return "format-error";
        case ErrClass::numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrClass c, const std::string& msg) : std::runtime_error(msg), cls_(c) {}
    ErrClass cls() const { return cls_; }
    std::string cli_line() const {
        return std::string("error: ") + err_class_name(cls_) + ": " + what();
    }

private:
    ErrClass cls_;
};

[[noreturn]] inline void fail(ErrClass c, const std::string& msg) { throw Error(c, msg); }

inline void require(bool cond, ErrClass c, const std::string& msg) {
    if (!cond) fail(c, msg);
}

}  // namespace hmseg
