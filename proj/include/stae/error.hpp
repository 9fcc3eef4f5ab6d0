#pragma once

#include <stdexcept>
#include <string>

namespace stae {

enum class ErrorKind {
  Shape,
  Config,
  Index,
  Contract,
  Magic,
  Truncated,
  Manifest,
  Io,
  Numeric,
  EmptyReport,
  MissingTable,
};

const char* to_string(ErrorKind kind);

// Process exit code used by the CLI for each error family:
// 2 usage/config/missing file, 3 data/format, 4 numeric.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define STAE_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& message) : Error(Kind, message) {} \
  };

STAE_DEFINE_ERROR(ShapeError, ErrorKind::Shape)
STAE_DEFINE_ERROR(ConfigError, ErrorKind::Config)
STAE_DEFINE_ERROR(IndexError, ErrorKind::Index)
STAE_DEFINE_ERROR(ContractError, ErrorKind::Contract)
STAE_DEFINE_ERROR(MagicError, ErrorKind::Magic)
STAE_DEFINE_ERROR(TruncationError, ErrorKind::Truncated)
STAE_DEFINE_ERROR(ManifestError, ErrorKind::Manifest)
STAE_DEFINE_ERROR(IoError, ErrorKind::Io)
STAE_DEFINE_ERROR(NumericError, ErrorKind::Numeric)
STAE_DEFINE_ERROR(EmptyReportError, ErrorKind::EmptyReport)
STAE_DEFINE_ERROR(MissingTableError, ErrorKind::MissingTable)

#undef STAE_DEFINE_ERROR

}  // namespace stae
