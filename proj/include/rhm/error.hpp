#pragma once

#include <stdexcept>
#include <string>

namespace rhm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define RHM_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

RHM_DEFINE_ERROR(ParameterError)
RHM_DEFINE_ERROR(ParseError)
RHM_DEFINE_ERROR(InfeasibleError)
RHM_DEFINE_ERROR(EncodingError)
RHM_DEFINE_ERROR(ShapeError)
RHM_DEFINE_ERROR(RangeError)
RHM_DEFINE_ERROR(NonFiniteError)
RHM_DEFINE_ERROR(InconsistentPrefixError)
RHM_DEFINE_ERROR(DegenerateError)
RHM_DEFINE_ERROR(ConfigError)
RHM_DEFINE_ERROR(FormatError)
RHM_DEFINE_ERROR(MissingArtifactError)

#undef RHM_DEFINE_ERROR

}  // namespace rhm
