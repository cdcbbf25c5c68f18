#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bagel {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input bundle. Carries the offending file and a
/// location inside it (byte offset for binary files, line number for CSV/JSON).
class BundleError : public Error {
 public:
  BundleError(std::string file, std::string location, const std::string& what)
      : Error(file + (location.empty() ? "" : " @ " + location) + ": " + what),
        file_(std::move(file)),
        location_(std::move(location)) {}

  const std::string& file() const noexcept { return file_; }
  const std::string& location() const noexcept { return location_; }

 private:
  std::string file_;
  std::string location_;
};

/// A binary target that only contains one label value.
class DegenerateLabels : public Error {
 public:
  using Error::Error;
};

/// Shape or argument contract violated by a caller.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A serialized artifact does not follow its documented schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was run before the artifacts it consumes exist.
class MissingArtifact : public Error {
 public:
  MissingArtifact(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace bagel
