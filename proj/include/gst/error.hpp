#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gst {

/// Base of every error thrown by the library. `category()` is a short,
/// stable, machine-parseable tag printed by the CLI on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string_view category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  [[nodiscard]] const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define GST_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

GST_DEFINE_ERROR(IoError, "io")
GST_DEFINE_ERROR(FormatError, "format")
GST_DEFINE_ERROR(ArgumentError, "argument")
GST_DEFINE_ERROR(StateError, "state")
GST_DEFINE_ERROR(ConfigError, "config")
GST_DEFINE_ERROR(PreconditionError, "precondition")
GST_DEFINE_ERROR(NumericError, "numeric")
GST_DEFINE_ERROR(InternalError, "internal")
GST_DEFINE_ERROR(InitializationError, "init")

#undef GST_DEFINE_ERROR

}  // namespace gst
