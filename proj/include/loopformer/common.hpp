// Copyright 2026 The Loopformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace loopformer {

// Dense row-major matrix, the one tensor type everything runs on.
// Column vectors (gains, per-token losses) are (n, 1) matrices.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for the named op.
struct ShapeError : Error {
  using Error::Error;
};

// A non-finite value (NaN/Inf) appeared where it must not.
struct NumericError : Error {
  using Error::Error;
};

// Bad configuration, bad flags, missing or malformed input files.
struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

template <typename Scalar>
inline std::string shape_str(const Mat<Scalar>& m) {
  std::ostringstream os;
  os << "(" << m.rows() << "," << m.cols() << ")";
  return os.str();
}

template <typename Scalar>
inline void require_shape(bool ok, const char* op, const Mat<Scalar>& a, const Mat<Scalar>& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " do not conform");
  }
}

enum class LogLevel : int { error = 0, info = 1, debug = 2 };

// Verbosity comes from LOOPFORMER_LOG in {error, info, debug}; default info.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("LOOPFORMER_LOG");
    if (env == nullptr) return LogLevel::info;
    const std::string v(env);
    if (v == "error") return LogLevel::error;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log_line(LogLevel lvl, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(log_level())) {
    std::cerr << msg << "\n";
  }
}

inline void log_info(const std::string& msg) { log_line(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::debug, msg); }
inline void log_error(const std::string& msg) { log_line(LogLevel::error, msg); }

}  // namespace loopformer
