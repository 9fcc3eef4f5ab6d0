#include "stae/error.hpp"

namespace stae {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "ShapeError";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::Index: return "IndexError";
    case ErrorKind::Contract: return "ContractError";
    case ErrorKind::Magic: return "MagicError";
    case ErrorKind::Truncated: return "TruncationError";
    case ErrorKind::Manifest: return "ManifestError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Numeric: return "NumericError";
    case ErrorKind::EmptyReport: return "EmptyReportError";
    case ErrorKind::MissingTable: return "MissingTableError";
  }
  return "Error";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Io:
    case ErrorKind::MissingTable:
      return 2;
    case ErrorKind::Numeric:
      return 4;
    default:
      return 3;
  }
}

}  // namespace stae
