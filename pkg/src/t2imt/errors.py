"""Exception hierarchy shared across the harness."""

from __future__ import annotations

from typing import Any


class T2IMTError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(T2IMTError, ValueError):
    pass


# --- ER core -------------------------------------------------------------

class UnknownSurfaceForm(T2IMTError, LookupError):
    def __init__(self, surface: str, kind: str):
        super().__init__(f"unknown {kind} surface form: {surface!r}")
        self.surface = surface
        self.kind = kind


class PoolBuildError(T2IMTError):
    """Strict pool construction failed; ``errors`` holds one entry per bad triple."""

    def __init__(self, caption: str, errors: list[tuple[int, tuple[str, str, str], str]]):
        lines = "; ".join(f"#{i} {t}: {msg}" for i, t, msg in errors)
        super().__init__(f"cannot build pool for {caption!r}: {lines}")
        self.caption = caption
        self.errors = errors


class RegistryError(T2IMTError):
    pass


# --- mutation ------------------------------------------------------------

class MutationInapplicable(T2IMTError):
    """A mutation operator's precondition does not hold for this seed."""


class EmptyPool(MutationInapplicable):
    pass


class InsufficientDensity(MutationInapplicable):
    pass


class NoEligibleReplacement(MutationInapplicable):
    pass


class NoEligibleAugmentation(MutationInapplicable):
    pass


class NoSubstitutableWord(MutationInapplicable):
    pass


# --- text synthesis ------------------------------------------------------

class UnknownTemplateSlot(T2IMTError):
    pass


# --- generator gateway ---------------------------------------------------

class BackendError(T2IMTError):
    retryable = False


class BackendNotRegistered(BackendError):
    pass


class BackendTimeout(BackendError):
    retryable = True


class BackendRejected(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"backend rejected request with HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body
        self.retryable = status >= 500


class RateLimited(BackendError):
    retryable = True

    def __init__(self, retry_after: float | None, body: str = ""):
        super().__init__(f"rate limited (retry after {retry_after}s)")
        self.retry_after = retry_after
        self.body = body


class PersistFailure(BackendError):
    pass


class UnparseablePrompt(BackendError):
    pass


# --- detector gateway ----------------------------------------------------

class DetectorUnavailable(T2IMTError):
    pass


class MalformedResponse(T2IMTError):
    def __init__(self, message: str, body: Any = None):
        super().__init__(message)
        self.body = body


class UnknownClassStrict(T2IMTError):
    pass


# --- MR evaluation -------------------------------------------------------

class OperatorMismatch(T2IMTError):
    pass


class EmptyVerdictSet(T2IMTError):
    pass


class ZeroDenominator(T2IMTError):
    pass


# --- quality metrics -----------------------------------------------------

class TooFewSamples(T2IMTError):
    pass


class NonFiniteInput(T2IMTError):
    pass


class DimensionMismatch(T2IMTError):
    pass


class EigDecompositionFailure(T2IMTError):
    pass


class NonPositiveTemperature(T2IMTError):
    pass


class InvalidDistribution(T2IMTError):
    pass


class EmptyMatrix(T2IMTError):
    pass


# --- campaign ------------------------------------------------------------

class ConfigError(T2IMTError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid campaign config:\n  - " + "\n  - ".join(errors))
        self.errors = errors


class IncompleteRun(T2IMTError):
    """Raised with a partial report attached; ``missing`` lists the absent cells."""

    def __init__(self, report: Any, missing: list[str]):
        super().__init__(f"run is incomplete: {len(missing)} cell(s) missing")
        self.report = report
        self.missing = missing
