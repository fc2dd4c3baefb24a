#pragma once

#include <stdexcept>
#include <string>

namespace peadapt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

#define PEADAPT_DEFINE_ERROR(Name, Kind)                                   \
    class Name : public Error {                                            \
    public:                                                                \
        using Error::Error;                                                \
        const char* kind() const noexcept override { return Kind; }        \
    };

PEADAPT_DEFINE_ERROR(ConfigError, "configuration")
PEADAPT_DEFINE_ERROR(ShapeError, "shape")
PEADAPT_DEFINE_ERROR(InputError, "input")
PEADAPT_DEFINE_ERROR(LookupError, "lookup")
PEADAPT_DEFINE_ERROR(IngestionError, "ingestion")
PEADAPT_DEFINE_ERROR(IoError, "io")
PEADAPT_DEFINE_ERROR(UnsupportedOperation, "unsupported-operation")
PEADAPT_DEFINE_ERROR(TrainingError, "training")

#undef PEADAPT_DEFINE_ERROR

inline std::string dims_str(long rows, long cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Throws ShapeError naming both the expected and the actual dimensions.
inline void check_dims(const char* what, long rows, long cols, long exp_rows, long exp_cols) {
    if ((exp_rows >= 0 && rows != exp_rows) || (exp_cols >= 0 && cols != exp_cols)) {
        throw ShapeError(std::string(what) + ": expected " +
                         (exp_rows >= 0 ? std::to_string(exp_rows) : std::string("*")) + "x" +
                         (exp_cols >= 0 ? std::to_string(exp_cols) : std::string("*")) +
                         ", got " + dims_str(rows, cols));
    }
}

}  // namespace peadapt
