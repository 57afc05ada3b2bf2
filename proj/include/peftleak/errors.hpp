/*
 * Copyright 2026 The peftleak Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef PEFTLEAK_ERRORS_HPP
#define PEFTLEAK_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace peftleak {

// Every error raised by the library derives from Error so callers (the CLI
// in particular) can map families onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid or infeasible configuration; the CLI exits with code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DegenerateStatsError : public Error {
 public:
  using Error::Error;
};

class EmptyBinError : public Error {
 public:
  using Error::Error;
};

namespace detail {

[[noreturn]] inline void throw_shape(const std::string& what) {
  throw ShapeError("shape error: " + what);
}

}  // namespace detail
}  // namespace peftleak

#endif  // PEFTLEAK_ERRORS_HPP
