"""State-vector layout helpers and feasible-state sampling.

The state stacks per-segment (hydrogen partial, total) pressure pairs,
followed by the supply-manifold pair:

    [x_1,H2, x_1, ..., x_q,H2, x_q, ..., x_n,H2, x_n, x_sm,H2, x_sm]

so the vector has ``2*n_seg + 2`` entries, all in Pa.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .params import StackParams


def idx_h2(k: int) -> int:
    """Index of segment k's hydrogen partial pressure (k is 0-based)."""
    return 2 * k


def idx_total(k: int) -> int:
    """Index of segment k's total pressure (k is 0-based)."""
    return 2 * k + 1


def idx_sm_h2(n_seg: int) -> int:
    return 2 * n_seg


def idx_sm(n_seg: int) -> int:
    return 2 * n_seg + 1


def output_indices(n_seg: int) -> tuple[int, int]:
    """Indices of the measured outputs: outlet-segment and manifold totals."""
    return idx_total(n_seg - 1), idx_sm(n_seg)


def output_matrix(n_seg: int) -> np.ndarray:
    """Selection matrix mapping the state to the two measured pressures."""
    c = np.zeros((2, 2 * n_seg + 2))
    i_n, i_sm = output_indices(n_seg)
    c[0, i_n] = 1.0
    c[1, i_sm] = 1.0
    return c


def column_names(n_seg: int) -> list[str]:
    names = []
    for k in range(n_seg):
        names += [f"x_a{k + 1}_h2", f"x_a{k + 1}"]
    names += ["x_sm_h2", "x_sm"]
    return names


def validate_state(x: np.ndarray, n_seg: int) -> None:
    x = np.asarray(x)
    if x.shape != (2 * n_seg + 2,):
        raise DomainError(f"state must have {2 * n_seg + 2} entries, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("state contains non-finite entries")
    for k in range(n_seg):
        h2, tot = x[idx_h2(k)], x[idx_total(k)]
        if not (0.0 <= h2 <= tot):
            raise DomainError(
                f"segment {k + 1}: need 0 <= hydrogen partial ({h2}) <= total ({tot})")
    h2, tot = x[idx_sm_h2(n_seg)], x[idx_sm(n_seg)]
    if not (0.0 <= h2 <= tot):
        raise DomainError(f"manifold: need 0 <= hydrogen partial ({h2}) <= total ({tot})")


def sample_feasible(rng: np.random.Generator, params: StackParams,
                    n: int = 1, span: float = 0.3) -> np.ndarray:
    """Draw states with the expected pressure ordering.

    Totals satisfy x_sm > x_1 > ... > x_n > p_0 with relative gaps up to
    ``span``; hydrogen fractions are drawn in (0.55, 0.98).  Returns an
    (n, 2*n_seg+2) array.
    """
    ns = params.n_seg
    out = np.empty((n, 2 * ns + 2))
    for i in range(n):
        # strictly decreasing totals from the manifold down the chain
        gaps = rng.uniform(0.005, span / (ns + 1), size=ns + 1)
        x_n_total = params.p_0 * (1.0 + rng.uniform(0.01, 0.5))
        totals = [x_n_total]
        for g in gaps[:ns]:
            totals.append(totals[-1] * (1.0 + g))
        totals = totals[::-1]          # [x_sm, x_1, ..., x_n]
        fracs = rng.uniform(0.55, 0.98, size=ns + 1)
        for k in range(ns):
            out[i, idx_total(k)] = totals[k + 1]
            out[i, idx_h2(k)] = fracs[k] * totals[k + 1]
        out[i, idx_sm(ns)] = totals[0]
        out[i, idx_sm_h2(ns)] = fracs[ns] * totals[0]
    return out
