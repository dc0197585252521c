#pragma once

#include <stdexcept>
#include <string>

namespace malvit {

// Every error raised by the library carries a short machine-parsable category
// ("dimension", "numeric", ...) which the CLI prints as the first token of its
// single-line error report.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define MALVIT_ERROR_KIND(Name, tag)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& message) : Error(tag, message) {} \
  }

MALVIT_ERROR_KIND(DimensionError, "dimension");
MALVIT_ERROR_KIND(NumericError, "numeric");
MALVIT_ERROR_KIND(ContractError, "contract");
MALVIT_ERROR_KIND(ConfigError, "config");
MALVIT_ERROR_KIND(DataError, "data");
MALVIT_ERROR_KIND(IoError, "io");
MALVIT_ERROR_KIND(CorruptionError, "corruption");
MALVIT_ERROR_KIND(VersionError, "version");
MALVIT_ERROR_KIND(IntegrityError, "integrity");
MALVIT_ERROR_KIND(VariantMismatchError, "variant-mismatch");

#undef MALVIT_ERROR_KIND

}  // namespace malvit
