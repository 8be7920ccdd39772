#pragma once

#include <stdexcept>
#include <string>

namespace avcap {

// Error taxonomy shared across the library. The CLI maps kinds to exit
// codes: config -> 2, data -> 3, invariant -> 4, everything else -> 1.
enum class ErrorKind {
    shape,      // dimension mismatch between operands
    domain,     // argument outside its valid range
    capacity,   // fixed resource exceeded (context window, position table)
    state,      // operation illegal in the current object state
    contract,   // caller broke a documented precondition
    numeric,    // NaN/Inf produced by an operation
    config,     // malformed or inconsistent run configuration
    data,       // unreadable/invalid corpus, checkpoint or dataset file
    invariant,  // a training-time invariant was violated
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};
struct DomainError : Error {
    explicit DomainError(const std::string& m) : Error(ErrorKind::domain, m) {}
};
struct CapacityError : Error {
    explicit CapacityError(const std::string& m) : Error(ErrorKind::capacity, m) {}
};
struct StateError : Error {
    explicit StateError(const std::string& m) : Error(ErrorKind::state, m) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error(ErrorKind::contract, m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct DataError : Error {
    explicit DataError(const std::string& m) : Error(ErrorKind::data, m) {}
};
struct InvariantError : Error {
    explicit InvariantError(const std::string& m) : Error(ErrorKind::invariant, m) {}
};

}  // namespace avcap
