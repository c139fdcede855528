"""Parameter algebra of the symmetric q-community block model.

Labels are 0-based throughout the package: community ``0`` plays the role of
the distinguished root label in every Monte Carlo harness.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDENTITY_TOL = 1e-12
VALIDATION_TOL = 1e-9


class ParamError(ValueError):
    """Invalid block-model parameters."""


class NoiseMatrixError(ValueError):
    """A candidate noise matrix violates one of the channel assumptions.

    ``code`` is one of ``shape``, ``negative``, ``row_sum``, ``column_sum``,
    ``diagonal``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass(frozen=True)
class ModelParams:
    """(q, a, b) together with the derived broadcast quantities.

    ``d`` is the branching degree, ``p`` the probability that a child does
    not copy its parent, ``lam`` the second eigenvalue of the transition
    matrix and ``snr`` the Kesten-Stigum quantity ``lam**2 * d``.
    """

    q: int
    a: float
    b: float
    d: float = field(init=False)
    p: float = field(init=False)
    lam: float = field(init=False)
    snr: float = field(init=False)

    def __post_init__(self):
        q, a, b = self.q, float(self.a), float(self.b)
        if int(q) != q or q < 3:
            raise ParamError(f"q must be an integer >= 3, got {q}")
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ParamError("a and b must be finite")
        if b < 0:
            raise ParamError(f"b must be >= 0, got {b}")
        if a <= b:
            raise ParamError(f"need a > b (assortative regime), got a={a}, b={b}")
        d = (a + b * (q - 1)) / q
        p = b * (q - 1) / (a + b * (q - 1))
        lam = 1.0 - p * q / (q - 1)
        object.__setattr__(self, "q", int(q))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "snr", lam * lam * d)

    @classmethod
    def from_lambda_degree(cls, q: int, lam: float, d: float) -> "ModelParams":
        """Build parameters from the broadcast view (lambda, d) instead of (a, b)."""
        if not 0 < lam <= 1:
            raise ParamError(f"lambda must lie in (0, 1], got {lam}")
        if d <= 0:
            raise ParamError(f"d must be positive, got {d}")
        p = (1.0 - lam) * (q - 1) / q
        b = p * q * d / (q - 1)
        a = q * d - b * (q - 1)
        return cls(q, a, b)

    @property
    def snr_from_edges(self) -> float:
        """lambda^2 d computed directly from the edge rates."""
        q, a, b = self.q, self.a, self.b
        return (a - b) ** 2 / (q * (a + b * (q - 1)))

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "a": self.a,
            "b": self.b,
            "d": self.d,
            "p": self.p,
            "lambda": self.lam,
            "snr": self.snr,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def derive_params(q: int, a: float, b: float) -> ModelParams:
    """Validate (q, a, b) and return the fully populated parameter record."""
    params = ModelParams(q, a, b)
    if abs(params.snr - params.snr_from_edges) > IDENTITY_TOL * max(1.0, params.snr):
        raise ParamError("lambda^2 d derivations disagree; parameters are numerically degenerate")
    return params


def transition_matrix(params: ModelParams) -> np.ndarray:
    """The q x q broadcast channel: keep the parent label w.p. 1-p, else uniform on the rest."""
    q, p = params.q, params.p
    m = np.full((q, q), p / (q - 1))
    np.fill_diagonal(m, 1.0 - p)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class NoiseMatrix:
    """Validated channel ``entries[i, j] = P(tau = j | sigma = i)``."""

    entries: np.ndarray

    @property
    def q(self) -> int:
        return self.entries.shape[0]

    def is_symmetric_channel(self, tol: float = VALIDATION_TOL) -> bool:
        """True when every label permutation leaves the channel invariant."""
        e = self.entries
        diag = np.diag(e)
        off = e[~np.eye(self.q, dtype=bool)]
        return bool(np.ptp(diag) <= tol and np.ptp(off) <= tol)

    def to_list(self) -> list:
        return self.entries.tolist()


def validate_noise_matrix(delta, tol: float = VALIDATION_TOL) -> NoiseMatrix:
    """Check the channel assumptions and wrap ``delta`` as an immutable NoiseMatrix.

    Rows and columns must sum to one and every diagonal entry must be at
    least ``1 - 1/q``.
    """
    e = np.array(delta, dtype=float)
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise NoiseMatrixError("shape", f"expected a square matrix, got shape {e.shape}")
    q = e.shape[0]
    if np.any(e < -tol):
        raise NoiseMatrixError("negative", "entries must be non-negative")
    rows = e.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > tol):
        raise NoiseMatrixError("row_sum", f"row sums {rows.tolist()} differ from 1")
    cols = e.sum(axis=0)
    if np.any(np.abs(cols - 1.0) > tol):
        raise NoiseMatrixError("column_sum", f"column sums {cols.tolist()} differ from 1")
    floor = 1.0 - 1.0 / q
    diag = np.diag(e)
    if np.any(diag < floor - tol):
        raise NoiseMatrixError(
            "diagonal", f"diagonal {diag.tolist()} below 1 - 1/q = {floor:.6g}"
        )
    e = np.clip(e, 0.0, None)
    e.setflags(write=False)
    return NoiseMatrix(e)


def noise_family(spec: str, q: int) -> NoiseMatrix:
    """Resolve a named noise family.

    ``identity``; ``uniform-diag:c`` (diagonal c, off-diagonal (1-c)/(q-1),
    valid iff c >= 1 - 1/q); ``file:path`` (JSON q x q array, or an object
    with an ``entries`` key).
    """
    if spec == "identity":
        return validate_noise_matrix(np.eye(q))
    if spec.startswith("uniform-diag:"):
        c = float(spec.split(":", 1)[1])
        e = np.full((q, q), (1.0 - c) / (q - 1))
        np.fill_diagonal(e, c)
        return validate_noise_matrix(e)
    if spec.startswith("file:"):
        raw = json.loads(Path(spec.split(":", 1)[1]).read_text())
        if isinstance(raw, dict):
            raw = raw["entries"]
        nm = validate_noise_matrix(raw)
        if nm.q != q:
            raise NoiseMatrixError("shape", f"file matrix is {nm.q}x{nm.q}, expected q={q}")
        return nm
    raise ValueError(f"unknown noise family {spec!r}")
