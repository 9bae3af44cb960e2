#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace netgpt {

enum class ErrorCode {
  kParse,
  kFormat,
  kUnsupportedProtocol,
  kTruncatedRecord,
  kEncoding,
  kUnknownToken,
  kBudget,
  kConfig,
  kData,
  kInsufficientItems,
  kAllMasked,
  kDivergence,
  kVocabMismatch,
  kIo,
};

inline constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParse: return "PARSE";
    case ErrorCode::kFormat: return "FORMAT";
    case ErrorCode::kUnsupportedProtocol: return "UNSUPPORTED_PROTOCOL";
    case ErrorCode::kTruncatedRecord: return "TRUNCATED_RECORD";
    case ErrorCode::kEncoding: return "ENCODING";
    case ErrorCode::kUnknownToken: return "UNKNOWN_TOKEN";
    case ErrorCode::kBudget: return "BUDGET";
    case ErrorCode::kConfig: return "CONFIG";
    case ErrorCode::kData: return "DATA";
    case ErrorCode::kInsufficientItems: return "INSUFFICIENT_ITEMS";
    case ErrorCode::kAllMasked: return "ALL_MASKED";
    case ErrorCode::kDivergence: return "DIVERGENCE";
    case ErrorCode::kVocabMismatch: return "VOCAB_MISMATCH";
    case ErrorCode::kIo: return "IO";
  }
  return "UNKNOWN";
}

// Process exit status used by the command-line tool for each error class.
inline constexpr int exit_status(ErrorCode code) {
  return 10 + static_cast<int>(code);
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Which layer a packet parse failed at.
enum class Layer { kCapture, kLink, kNetwork, kTransport };

inline constexpr std::string_view to_string(Layer layer) {
  switch (layer) {
    case Layer::kCapture: return "capture";
    case Layer::kLink: return "link";
    case Layer::kNetwork: return "network";
    case Layer::kTransport: return "transport";
  }
  return "?";
}

class ParseError : public Error {
 public:
  ParseError(Layer layer, const std::string& message)
      : Error(ErrorCode::kParse,
              std::string(to_string(layer)) + " layer: " + message),
        layer_(layer) {}

  Layer layer() const noexcept { return layer_; }

 private:
  Layer layer_;
};

class TruncatedRecordError : public Error {
 public:
  TruncatedRecordError(std::size_t index, const std::string& message)
      : Error(ErrorCode::kTruncatedRecord,
              "record " + std::to_string(index) + ": " + message),
        index_(index) {}

  std::size_t record_index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class EncodingError : public Error {
 public:
  EncodingError(std::size_t offset, const std::string& message)
      : Error(ErrorCode::kEncoding,
              message + " at offset " + std::to_string(offset)),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::size_t step)
      : Error(ErrorCode::kDivergence,
              "non-finite loss at step " + std::to_string(step)),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace netgpt
