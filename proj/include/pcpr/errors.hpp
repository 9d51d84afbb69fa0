#pragma once

#include <stdexcept>
#include <string>

namespace pcpr {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// data
struct DegenerateCloud : Error { using Error::Error; };
struct InvalidSpec : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct MissingIndexEntry : Error { using Error::Error; };

// encoder
struct NonFiniteActivation : Error { using Error::Error; };
struct StaleCache : Error { using Error::Error; };
struct ConfigMismatch : Error { using Error::Error; };

// losses
struct DegenerateAngle : Error { using Error::Error; };
struct EmptyTupleSet : Error { using Error::Error; };

// memory
struct NoPositivePairs : Error { using Error::Error; };
struct InsufficientEntries : Error { using Error::Error; };

// trainer
struct NoUsableAnchors : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct InsufficientDomains : Error { using Error::Error; };

// eval
struct EmptyDatabase : Error { using Error::Error; };
struct UndefinedForSingleStep : Error { using Error::Error; };

}  // namespace pcpr
