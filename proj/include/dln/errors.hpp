#pragma once

#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>

namespace dln {

/// Base class for all library errors.
///
/// Integration drivers tag the failing step via `set_step_index` and rethrow,
/// so the dynamic type is preserved for callers.
class Error : public std::runtime_error {
public:
    static constexpr std::size_t no_step = std::numeric_limits<std::size_t>::max();

    explicit Error(const std::string& what) : std::runtime_error(what) {}

    [[nodiscard]] std::size_t step_index() const noexcept { return step_index_; }
    void set_step_index(std::size_t index) noexcept { step_index_ = index; }

private:
    std::size_t step_index_ = no_step;
};

#define DLN_DEFINE_ERROR(Name)                                          \
    class Name : public Error {                                         \
    public:                                                             \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    };

DLN_DEFINE_ERROR(InvalidArgument)
DLN_DEFINE_ERROR(InvalidConfig)
DLN_DEFINE_ERROR(DimensionMismatch)
DLN_DEFINE_ERROR(GridMismatch)
DLN_DEFINE_ERROR(SolverDiverged)
DLN_DEFINE_ERROR(NonFiniteState)
DLN_DEFINE_ERROR(NonFiniteField)
DLN_DEFINE_ERROR(DegenerateHistory)
DLN_DEFINE_ERROR(ZeroDivisor)
DLN_DEFINE_ERROR(ZeroNorm)
DLN_DEFINE_ERROR(ZeroViscousDissipation)
DLN_DEFINE_ERROR(LinearSolverStagnation)
DLN_DEFINE_ERROR(NonZeroMean)
DLN_DEFINE_ERROR(IoError)

#undef DLN_DEFINE_ERROR

}  // namespace dln
