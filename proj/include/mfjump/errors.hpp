#pragma once

#include <stdexcept>
#include <string>

namespace mfjump {

struct CallbackFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Forward state escaped the configured cap; carries where it happened.
struct BlowUp : std::runtime_error {
    int step = -1;
    int particle = -1;
    BlowUp(const std::string& what, int step_, int particle_)
        : std::runtime_error(what), step(step_), particle(particle_) {}
};

struct SingularRegression : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoConvergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SizeLimit : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingDerivatives : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OperationUnsupported : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonAdmissible : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RiccatiBlowUp : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mfjump
