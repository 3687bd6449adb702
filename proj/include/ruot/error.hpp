#pragma once

#include <stdexcept>
#include <string>

namespace ruot {

// Caller broke an API precondition (wrong dimension, bad flag, reused tape).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input file; carries the offending line when known.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, int line = 0)
        : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
          line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

// Input parsed but violates a semantic invariant (non-monotone times, ...).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A field produced a non-finite value during particle integration.
class SimulationError : public std::runtime_error {
public:
    SimulationError(const std::string& what, long particle, double t)
        : std::runtime_error(what + " at particle " + std::to_string(particle) +
                             ", t=" + std::to_string(t)),
          particle_(particle),
          time_(t) {}
    long particle() const noexcept { return particle_; }
    double time() const noexcept { return time_; }

private:
    long particle_;
    double time_;
};

// Training stopped because a loss component or gradient went non-finite.
class TrainingAbort : public std::runtime_error {
public:
    TrainingAbort(const std::string& what, int epoch, std::string component)
        : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ", " + component + ")"),
          epoch_(epoch),
          component_(std::move(component)) {}
    int epoch() const noexcept { return epoch_; }
    const std::string& component() const noexcept { return component_; }

private:
    int epoch_;
    std::string component_;
};

}  // namespace ruot
