"""Exception hierarchy shared across meshbench modules."""


class MeshBenchError(Exception):
    pass


class InvalidDimensionError(MeshBenchError, ValueError):
    pass


class InvalidGradingError(MeshBenchError, ValueError):
    pass


class InvalidGeometryError(MeshBenchError, ValueError):
    pass


class ConvergenceError(MeshBenchError, RuntimeError):
    """Iterative solve stopped before reaching its tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class SetupError(MeshBenchError, ValueError):
    pass


class SizeError(MeshBenchError, ValueError):
    pass


class InsufficientNodesError(MeshBenchError, ValueError):
    pass


class DegenerateInputError(MeshBenchError, ValueError):
    pass


class ShapeError(MeshBenchError, ValueError):
    pass


class UsageError(MeshBenchError, RuntimeError):
    pass


class NumericError(MeshBenchError, FloatingPointError):
    pass


class FormatVersionError(MeshBenchError, ValueError):
    pass


class TruncatedPayloadError(MeshBenchError, ValueError):
    pass


class InconsistentSetError(MeshBenchError, ValueError):
    pass


class ConfigError(MeshBenchError, ValueError):
    """Carries every violated field, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class GenerationError(MeshBenchError, RuntimeError):
    """A solve inside dataset generation failed; ``seed`` names the sample."""

    def __init__(self, seed, cause):
        super().__init__(f"generation failed for seed {seed}: {cause}")
        self.seed = seed
