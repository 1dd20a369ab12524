"""Exception types shared across the release mechanisms."""


class ComprivError(Exception):
    """Base class for all library errors."""


class ValidationError(ComprivError, ValueError):
    """Bad user input: shapes, ranges, or config fields."""


class SingularCompression(ComprivError):
    """A compression matrix made the attacker's normal equations singular."""


class InfeasibleDistortion(ComprivError):
    """Requested distortion budget is below the rank-k feasibility bound."""

    def __init__(self, gamma: float, bound: float, k: int):
        self.gamma = gamma
        self.bound = bound
        self.k = k
        super().__init__(
            f"distortion budget gamma={gamma:.6g} is below the minimum feasible "
            f"distortion {bound:.6g} for target rank k={k}"
        )


class NonConvergence(ComprivError):
    """An iterative solver hit its iteration cap before meeting tolerances."""

    def __init__(self, message: str, residuals: dict | None = None):
        self.residuals = dict(residuals or {})
        super().__init__(message)


class RankNotAttained(ComprivError):
    """The nuclear-norm weight search never produced the target rank."""

    def __init__(self, target: int, closest: int, beta: float):
        self.target = target
        self.closest = closest
        self.beta = beta
        super().__init__(
            f"rank targeting failed: wanted {target}, closest attained {closest} "
            f"(last beta={beta:.6g})"
        )


class DegenerateSample(ComprivError):
    """Too many coincident points for a meaningful neighbor-distance estimate."""
