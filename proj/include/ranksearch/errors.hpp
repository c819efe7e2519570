#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ranksearch {

// Common base so callers can catch everything from this library at once.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// lowrank
class InvalidMatrix : public Error {
public:
    using Error::Error;
};
class DegenerateSpectrum : public Error {
public:
    using Error::Error;
};
class InvalidEnergy : public Error {
public:
    using Error::Error;
};
class InvalidRank : public Error {
public:
    using Error::Error;
};

// netmodel
class InvalidScheme : public Error {
public:
    using Error::Error;
};
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t byte_offset)
        : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          byte_offset_(byte_offset) {}
    std::size_t byte_offset() const { return byte_offset_; }

private:
    std::size_t byte_offset_;
};

// space
class SpaceShapeError : public Error {
public:
    using Error::Error;
};
class UnknownLayer : public Error {
public:
    using Error::Error;
};

// controller
class NumericalError : public Error {
public:
    using Error::Error;
};
class StaleCache : public Error {
public:
    using Error::Error;
};

// reward
class InvalidBaseline : public Error {
public:
    using Error::Error;
};
class ContractViolation : public Error {
public:
    using Error::Error;
};

// search
class NoFeasiblePoint : public Error {
public:
    using Error::Error;
};

// condense
class DegenerateFullset : public Error {
public:
    using Error::Error;
};
class EmptyCondensedSet : public Error {
public:
    using Error::Error;
};
class InvalidSize : public Error {
public:
    using Error::Error;
};

// evaluator
class ModelShapeError : public Error {
public:
    using Error::Error;
};
class ProfileBuildError : public Error {
public:
    using Error::Error;
};
class DivergenceError : public Error {
public:
    using Error::Error;
};
class EvalTimeout : public Error {
public:
    using Error::Error;
};
class ProtocolError : public Error {
public:
    using Error::Error;
};
class EvaluatorError : public Error {
public:
    using Error::Error;
};

// cli / config
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace ranksearch
