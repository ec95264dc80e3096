"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition or invariant of a public operation was violated."""


class CoverageError(ContractError):
    """Two structures that must describe the same (layer, token) grid do not."""


class UnservableError(RuntimeError):
    """The memory budget cannot hold a single required expert."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries seed and step for reproduction."""

    def __init__(self, message: str, seed: int, step: int):
        super().__init__(f"{message} (seed={seed}, step={step})")
        self.seed = seed
        self.step = step
