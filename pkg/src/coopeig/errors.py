"""Exception hierarchy.

Every error records ``where`` as ``"module.operation"`` so the CLI can name the
failing step. Errors split into two families that map onto CLI exit codes:
:class:`ValidationFailure` (bad input, exit 2) and :class:`NumericalFailure`
(a computation could not certify its result, exit 3).
"""
from __future__ import annotations

from typing import Any


class CoopEigError(Exception):
    where = "coopeig"

    def __init__(self, message: str, *, where: str | None = None, partial: Any = None):
        if where is not None:
            self.where = where
        self.partial = partial
        super().__init__(f"[{self.where}] {message}")


class ValidationFailure(CoopEigError):
    pass


class NumericalFailure(CoopEigError):
    pass


# model
class OracleFailure(ValidationFailure):
    where = "model.validate"


class CooperativityViolation(ValidationFailure):
    where = "model.validate"


class EllipticityViolation(ValidationFailure):
    where = "model.validate"


class RegionError(ValidationFailure):
    where = "model.region"


class ConfigError(ValidationFailure):
    where = "cli.run"


# exprlang
class ExprSyntaxError(ValidationFailure):
    where = "exprlang.parse"

    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.reason = message
        self.offset = offset
        self.expected = frozenset(expected)
        exp = ", ".join(sorted(self.expected))
        super().__init__(f"{message} at offset {offset}" + (f" (expected {exp})" if exp else ""))


class EvalError(NumericalFailure):
    where = "exprlang.eval"

    def __init__(self, kind: str, position: int, detail: str = ""):
        self.kind = kind
        self.position = position
        super().__init__(f"{kind} at offset {position}" + (f": {detail}" if detail else ""))


# discretize
class EmptyInterior(ValidationFailure):
    where = "discretize.build_grid"


class DisconnectedInterior(ValidationFailure):
    where = "discretize.build_grid"


class MixedTermPositivityFailure(NumericalFailure):
    where = "discretize.assemble"


class SingularSystem(NumericalFailure):
    where = "discretize.solve_dirichlet"

    def __init__(self, message: str, smallest_pivot: float = 0.0, **kw):
        self.smallest_pivot = smallest_pivot
        super().__init__(f"{message} (smallest pivot {smallest_pivot:.3e})", **kw)


# eigen
class NotIrreducible(NumericalFailure):
    where = "eigen.principal_eigenpair"


class MaxIterExceeded(NumericalFailure):
    where = "eigen.principal_eigenpair"


class MetzlerRequired(NumericalFailure):
    where = "eigen.principal_eigenpair"


# spectrum
class NotDecreasing(NumericalFailure):
    where = "spectrum.lambda_star"


class NonConvergent(NumericalFailure):
    where = "spectrum.lambda_star"


class ResolventNotPositive(NumericalFailure):
    where = "spectrum.eigenfunction_at"


# twist / stability
class NonpositivePsi(NumericalFailure):
    where = "twist.twist"


class GapNonpositive(NumericalFailure):
    where = "stability"


# sde
class RateBoundExceeded(NumericalFailure):
    where = "sde.simulate"


class EffectiveSampleCollapse(NumericalFailure):
    where = "sde.risk_sensitive_cost"


class CensoringTooHigh(NumericalFailure):
    where = "sde.hitting_representation_check"
