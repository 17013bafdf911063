#pragma once

#include <stdexcept>
#include <string>

namespace lilora {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 1, IntegrityError -> 3, everything else -> 2.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct BoundsError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct DataError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

struct SimilarityUndefinedError : std::domain_error {
  using std::domain_error::domain_error;
};

// Malformed or corrupt on-disk data.
struct IntegrityError : std::runtime_error {
  IntegrityError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace lilora
