"""Exception types shared across the package."""


class EmdmError(Exception):
    """Base class for all package-specific errors."""


# --- linear algebra ---------------------------------------------------------

class NonConvergence(EmdmError, RuntimeError):
    """Jacobi eigensolver did not converge within the sweep budget."""


class SingularShift(EmdmError, ArithmeticError):
    """A shifted spectrum c*lambda + d touched zero; the solve is undefined."""


class SingularSystem(EmdmError, ArithmeticError):
    """Linear estimator system matrix is singular."""


# --- autodiff ---------------------------------------------------------------

class ShapeMismatch(EmdmError, ValueError):
    """Tensor shapes are inconsistent with an op's rule."""


class UnboundInput(EmdmError, KeyError):
    """Graph evaluation is missing a binding for an input node."""


class NonScalarOutput(EmdmError, ValueError):
    """gradient() requires a scalar-shaped output node."""


# --- data / configs ---------------------------------------------------------

class InvalidRange(EmdmError, ValueError):
    """A numeric parameter is outside its permitted range."""


class IndexOutOfRange(EmdmError, IndexError):
    """A diffusion step index is outside 1..T."""


class DimensionMismatch(EmdmError, ValueError):
    """Matrix/vector dimensions do not conform."""


class EmptyBatch(EmdmError, ValueError):
    """A training batch contained no items."""


class InsufficientData(EmdmError, ValueError):
    """Not enough samples to fit the requested statistics."""


class ZeroReference(EmdmError, ValueError):
    """NMSE reference vector has zero norm."""


# --- file formats -----------------------------------------------------------

class FormatError(EmdmError, ValueError):
    """File has a bad magic string or is otherwise malformed."""


class TruncatedFile(FormatError):
    """File ended before the declared payload was complete."""


class VersionMismatch(FormatError):
    """File format version is not supported."""


class ArchitectureMismatch(EmdmError, ValueError):
    """Checkpoint tensors do not match the expected architecture."""


class MissingCheckpoint(EmdmError, FileNotFoundError):
    """An estimator requiring a trained model was run without one."""


class ConfigError(EmdmError, ValueError):
    """Experiment configuration is invalid or inconsistent."""


# --- sampling / training ----------------------------------------------------

class DegenerateKernel(EmdmError, ArithmeticError):
    """Transition density requested at a step whose noise scale is zero."""


class TrainingDiverged(EmdmError, RuntimeError):
    """Loss became non-finite during training."""


class SamplerDivergence(EmdmError, RuntimeError):
    """Sampler state became non-finite; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
