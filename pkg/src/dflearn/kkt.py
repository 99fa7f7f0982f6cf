"""Shared linear-algebra plumbing for differentiating through KKT systems.

Both decision layers reduce their backward pass to one linear solve against a
(possibly ill-conditioned) KKT matrix.  The solve below tries plain LU first
and falls back to a Tikhonov-damped retry, emitting a warning so callers can
count degenerate solves.
"""

import warnings

import numpy as np


class SingularSystem(RuntimeError):
    """KKT matrix is not invertible, even after damping."""


class DegenerateKktWarning(RuntimeWarning):
    """A KKT solve needed the damped fallback."""


def solve_checked(M, rhs, damping=1e-8, label="KKT system", fallback=None):
    """Solve ``M z = rhs`` with LU, retrying with damping on (near) singularity.

    ``fallback`` optionally supplies a repaired matrix (e.g. with degenerate
    complementarity rows resolved) used for the damped retry.  Returns
    ``(z, damped)`` where ``damped`` reports whether the fallback ran.
    """
    M = np.asarray(M, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    try:
        z = np.linalg.solve(M, rhs)
        if _residual(M, z, rhs) <= 1e-6 * scale:
            return z, False
    except np.linalg.LinAlgError:
        pass
    warnings.warn(
        f"singular {label}; retrying with damping {damping:g}",
        DegenerateKktWarning,
        stacklevel=2,
    )
    Md = (fallback() if fallback is not None else M) + damping * np.eye(M.shape[0])
    try:
        z = np.linalg.solve(Md, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"{label} is singular even after damping") from exc
    if _residual(Md, z, rhs) > 1e-4 * scale:
        raise SingularSystem(f"{label}: damped solve did not converge")
    return z, True


def _residual(M, z, rhs):
    r = M @ z - rhs
    return float(np.max(np.abs(r))) if r.size else 0.0
