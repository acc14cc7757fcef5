// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qsf {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfig = 2,
  kMissingPrerequisite = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kFailure)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

#define QSF_DEFINE_ERROR(Name, Code)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(what, Code) {}     \
  }

QSF_DEFINE_ERROR(ConfigError, ExitCode::kConfig);
QSF_DEFINE_ERROR(MissingModality, ExitCode::kFailure);
QSF_DEFINE_ERROR(EmptyDataset, ExitCode::kFailure);
QSF_DEFINE_ERROR(DecodeError, ExitCode::kFailure);
QSF_DEFINE_ERROR(IoError, ExitCode::kFailure);
QSF_DEFINE_ERROR(ShapeMismatch, ExitCode::kFailure);
QSF_DEFINE_ERROR(ResolutionError, ExitCode::kFailure);
QSF_DEFINE_ERROR(HeadDivisibility, ExitCode::kFailure);
QSF_DEFINE_ERROR(UnknownScope, ExitCode::kFailure);
QSF_DEFINE_ERROR(MissingPrediction, ExitCode::kFailure);
QSF_DEFINE_ERROR(MissingPrerequisiteCheckpoint, ExitCode::kMissingPrerequisite);
QSF_DEFINE_ERROR(NonFiniteLoss, ExitCode::kNumeric);

#undef QSF_DEFINE_ERROR

}  // namespace qsf
