#pragma once

#include <stdexcept>
#include <string>

namespace cropmae {

enum class ErrorKind {
    Dimension,
    Parameter,
    Contract,
    Numeric,
    Parse,
    Format,
    Io,
    Config,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Dimension: return "dimension error";
        case ErrorKind::Parameter: return "parameter error";
        case ErrorKind::Contract: return "contract error";
        case ErrorKind::Numeric: return "numeric error";
        case ErrorKind::Parse: return "parse error";
        case ErrorKind::Format: return "format error";
        case ErrorKind::Io: return "io error";
        case ErrorKind::Config: return "config error";
    }
    return "error";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define CROPMAE_DEFINE_ERROR(Name, Kind)                                    \
    class Name : public Error {                                             \
    public:                                                                 \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

CROPMAE_DEFINE_ERROR(DimensionError, Dimension)
CROPMAE_DEFINE_ERROR(ParameterError, Parameter)
CROPMAE_DEFINE_ERROR(ContractError, Contract)
CROPMAE_DEFINE_ERROR(NumericError, Numeric)
CROPMAE_DEFINE_ERROR(ParseError, Parse)
CROPMAE_DEFINE_ERROR(FormatError, Format)
CROPMAE_DEFINE_ERROR(IoError, Io)
CROPMAE_DEFINE_ERROR(ConfigError, Config)

#undef CROPMAE_DEFINE_ERROR

}  // namespace cropmae
