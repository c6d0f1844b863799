"""Rollout-entropy kernel.

Scores how reproducible a chart is from the embeddings of its repeated
code-based reconstructions: stack the K successfully rendered attempts
into a K x d matrix, center it, and measure the spectral entropy of the
resulting Gram matrix.  The score is that entropy divided by the valid
count, so execution failures push the score up.  Everything here is a
pure function over immutable arrays and safe to call from any thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# Sentinel assigned when every reconstruction attempt failed to execute:
# orders above every finite score so threshold filters always keep it.
SENTINEL_SCORE = math.inf

# Off-diagonal convergence target for the Jacobi sweeps, relative to the
# Frobenius norm of the Gram matrix (absolute would never converge for
# large-magnitude inputs).
_JACOBI_TOL = 1e-12

# Mass below this fraction of max(1, ||Vc||_F^2) counts as "identical
# reconstructions": zero variability, entropy defined as 0.
_MASS_EPS = 1e-12


@dataclass(frozen=True)
class SpectralSummary:
    """Spectrum of the centered reconstruction Gram matrix.

    singular_values: nonincreasing, one per reconstruction row.
    mass_distribution: normalized spectrum (empty when total mass is
        degenerate); sums to 1 otherwise.
    entropy: Shannon entropy of the mass distribution, in nats.
    """

    singular_values: tuple[float, ...]
    mass_distribution: tuple[float, ...]
    entropy: float


@dataclass(frozen=True)
class RpeScore:
    """Failure-normalized reconstruction-entropy score for one chart."""

    value: float
    valid_count: int
    attempted_count: int

    @property
    def is_sentinel(self) -> bool:
        return math.isinf(self.value)

    def to_json(self) -> dict:
        return {
            "value": None if self.is_sentinel else self.value,
            "sentinel": self.is_sentinel,
            "valid_count": self.valid_count,
            "attempted_count": self.attempted_count,
        }

    @staticmethod
    def from_json(obj: dict) -> "RpeScore":
        value = SENTINEL_SCORE if obj.get("sentinel") else float(obj["value"])
        return RpeScore(value, int(obj["valid_count"]), int(obj["attempted_count"]))


def _as_matrix(m: np.ndarray, op: str) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{op}: expected a 2-D K x d matrix, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidInputError(f"{op}: matrix has no rows")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{op}: matrix contains non-finite entries")
    return arr


def _canonical_row_order(arr: np.ndarray) -> np.ndarray:
    return np.lexsort(arr.T[::-1]) if arr.shape[1] else np.arange(arr.shape[0])


def center_rows(m: np.ndarray) -> np.ndarray:
    """Subtract the column-wise mean from every row.

    The mean is accumulated over a canonical row order so the result is
    bit-identical under row shuffles.  Raises InvalidInputError for an
    empty or non-finite matrix.
    """
    arr = _as_matrix(m, "center_rows")
    mean = arr[_canonical_row_order(arr)].mean(axis=0, keepdims=True)
    return arr - mean


def jacobi_eigenvalues(sym: np.ndarray, tol: float = _JACOBI_TOL, max_sweeps: int = 200) -> np.ndarray:
    """Eigenvalues of a small dense symmetric matrix via cyclic Jacobi sweeps.

    Rotates until the off-diagonal Frobenius norm drops below
    tol * max(1, ||A||_F).  Sized for the K x K Gram matrices this
    pipeline produces (K = rollout count, typically 8).
    """
    a = np.array(sym, dtype=np.float64, copy=True)
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, float(np.sum(a * a) - np.sum(a.diagonal() ** 2))))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                app, aqq = a[p, p], a[q, q]
                diff = aqq - app
                if abs(apq) <= 1e-150 * max(1.0, abs(diff)):
                    a[p, q] = a[q, p] = 0.0
                    continue
                tau = diff / (2.0 * apq)
                if abs(tau) > 1e10:
                    t = 1.0 / (2.0 * tau)
                elif tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                a[p, q] = a[q, p] = 0.0
    return a.diagonal().copy()


def gram_spectrum(mc: np.ndarray, sigma_source: str = "gram_eigenvalues") -> SpectralSummary:
    """Spectrum, normalized mass and entropy of G = mc @ mc.T.

    ``mc`` must already be centered (not re-verified here).  Eigenvalues
    below zero are numerical noise and clamp to 0.  ``sigma_source``
    selects what feeds the mass distribution: the Gram eigenvalues
    (default) or the singular values of ``mc`` itself (their square
    roots), kept as a switch for sensitivity checks.
    """
    arr = _as_matrix(mc, "gram_spectrum")
    if sigma_source not in ("gram_eigenvalues", "matrix_singular_values"):
        raise InvalidInputError(f"gram_spectrum: unknown sigma_source {sigma_source!r}")
    # Canonical row order makes the spectrum bit-identical under row
    # shuffles; the Gram matrix only permutes symmetrically, so the
    # eigenvalues are unchanged.
    arr = arr[_canonical_row_order(arr)]
    gram = arr @ arr.T
    eigs = jacobi_eigenvalues(gram)
    sigma = np.clip(eigs, 0.0, None)
    if sigma_source == "matrix_singular_values":
        sigma = np.sqrt(sigma)
    sigma = np.sort(sigma)[::-1]

    frob_sq = float(np.sum(arr * arr))
    total = float(np.sum(sigma))
    if total <= _MASS_EPS * max(1.0, frob_sq):
        return SpectralSummary(tuple(sigma.tolist()), (), 0.0)
    mass = sigma / total
    nonzero = mass[mass > 0.0]
    entropy = float(-np.sum(nonzero * np.log(nonzero)))
    return SpectralSummary(tuple(sigma.tolist()), tuple(mass.tolist()), max(0.0, entropy))


def rpe(
    attempted: int,
    m: np.ndarray | None = None,
    zero_valid_policy: str = "sentinel",
    sigma_source: str = "gram_eigenvalues",
) -> RpeScore | None:
    """Score one chart from its reconstruction embeddings.

    ``attempted`` is the number of reconstruction attempts issued; ``m``
    holds one row per attempt that executed successfully (None or empty
    when all failed).  Returns entropy / valid_count, the sentinel when
    nothing executed under the default policy, or None under the
    ``drop`` policy so the caller can discard the record.
    """
    if attempted < 1:
        raise InvalidInputError(f"rpe: attempted must be >= 1, got {attempted}")
    if zero_valid_policy not in ("sentinel", "drop"):
        raise InvalidInputError(f"rpe: unknown zero_valid_policy {zero_valid_policy!r}")
    rows = 0 if m is None else np.asarray(m).shape[0]
    if attempted < rows:
        raise InvalidInputError(f"rpe: attempted={attempted} is less than {rows} valid rows")
    if rows == 0:
        if zero_valid_policy == "drop":
            return None
        return RpeScore(SENTINEL_SCORE, 0, attempted)
    summary = gram_spectrum(center_rows(m), sigma_source=sigma_source)
    return RpeScore(summary.entropy / rows, rows, attempted)
