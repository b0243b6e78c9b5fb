#pragma once

#include <stdexcept>
#include <string>

namespace kags {

// Base for everything this library throws on purpose.
class KagsError : public std::runtime_error {
public:
    explicit KagsError(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not fit the operation (rank, extent, or width mismatch).
class ShapeError : public KagsError {
public:
    explicit ShapeError(const std::string& msg) : KagsError(msg) {}
};

// NaN/Inf escaped a numeric kernel; message names the offending op.
class NumericError : public KagsError {
public:
    explicit NumericError(const std::string& msg) : KagsError(msg) {}
};

// An API was used against its documented protocol (double backward, bad ids, ...).
class ContractError : public KagsError {
public:
    explicit ContractError(const std::string& msg) : KagsError(msg) {}
};

// Bad user-facing input: CLI values, precondition violations on public entry points.
class ValidationError : public KagsError {
public:
    explicit ValidationError(const std::string& msg) : KagsError(msg) {}
};

// Malformed text input (manifest JSONL, knowledge TSV, config JSON).
class ParseError : public KagsError {
public:
    explicit ParseError(const std::string& msg) : KagsError(msg) {}
};

// Malformed binary artifact (feature files, checkpoints).
class FormatError : public KagsError {
public:
    explicit FormatError(const std::string& msg) : KagsError(msg) {}
};

// RunConfig value that cannot be realized (h does not divide d, ...).
class ConfigError : public KagsError {
public:
    explicit ConfigError(const std::string& msg) : KagsError(msg) {}
};

// A reference computation inside a test harness disagreed with itself.
class OracleError : public KagsError {
public:
    explicit OracleError(const std::string& msg) : KagsError(msg) {}
};

} // namespace kags
