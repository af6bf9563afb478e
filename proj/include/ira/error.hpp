// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ira {

enum class ErrorCode {
    MissingFile,
    MalformedRecord,
    AnnotationMismatch,
    WrongAnnotationCount,
    PreconditionViolation,
    Timeout,
    ServiceError,
    RetriesExhausted,
    UnreadableImage,
    DimensionMismatch,
    MissingCaption,
    NoQuestionsFound,
    NonFiniteLoss,
    PoolTooSmall,
    MissingField,
    EmptyCompletion,
    MissingArtifact,
    ConfigInvalid,
    Io,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::MalformedRecord: return "MalformedRecord";
        case ErrorCode::AnnotationMismatch: return "AnnotationMismatch";
        case ErrorCode::WrongAnnotationCount: return "WrongAnnotationCount";
        case ErrorCode::PreconditionViolation: return "PreconditionViolation";
        case ErrorCode::Timeout: return "Timeout";
        case ErrorCode::ServiceError: return "ServiceError";
        case ErrorCode::RetriesExhausted: return "RetriesExhausted";
        case ErrorCode::UnreadableImage: return "UnreadableImage";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::MissingCaption: return "MissingCaption";
        case ErrorCode::NoQuestionsFound: return "NoQuestionsFound";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::PoolTooSmall: return "PoolTooSmall";
        case ErrorCode::MissingField: return "MissingField";
        case ErrorCode::EmptyCompletion: return "EmptyCompletion";
        case ErrorCode::MissingArtifact: return "MissingArtifact";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// Base exception for every failure raised by the library.
///
/// `detail()` carries the structured payload named by the error kind:
/// the question_id for MalformedRecord, the stage for MissingArtifact,
/// the field for ConfigInvalid and MissingField.
class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& message, std::string detail = {})
        : std::runtime_error(std::string(to_string(code)) + ": " + message),
          code_(code),
          detail_(std::move(detail)) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }
    [[nodiscard]] const std::string& detail() const noexcept { return detail_; }

  private:
    ErrorCode code_;
    std::string detail_;
};

/// Non-2xx reply from a model service.
class ServiceError : public Error {
  public:
    ServiceError(int status, std::string body)
        : Error(ErrorCode::ServiceError, "HTTP " + std::to_string(status) + ": " + body),
          status_(status),
          body_(std::move(body)) {}

    [[nodiscard]] int status() const noexcept { return status_; }
    [[nodiscard]] const std::string& body() const noexcept { return body_; }

    /// 408, 429, 5xx and transport failures (status 0) are worth retrying.
    [[nodiscard]] bool transient() const noexcept {
        return status_ == 0 || status_ == 408 || status_ == 429 || status_ >= 500;
    }

  private:
    int status_;
    std::string body_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message, std::string detail = {}) {
    throw Error(code, message, std::move(detail));
}

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        fail(ErrorCode::PreconditionViolation, message);
    }
}

}  // namespace ira
