"""Geographic and age-group mixing weights.

Every weight matrix here is column-stochastic: entry ``w[recipient, source]``
is the share of a source's expected secondary cases sent to the recipient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


class MixingError(ValueError):
    pass


def _check_contact(C) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise MixingError(f"contact matrix must be square, got shape {C.shape}")
    if not np.all(np.isfinite(C)) or np.any(C <= 0):
        raise MixingError("contact matrix entries must be finite and strictly positive")
    if not np.allclose(C, C.T, rtol=1e-10, atol=0):
        raise MixingError("contact matrix must be symmetric")
    return C


def column_normalize(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M / M.sum(axis=0, keepdims=True)


def normalize_contact(C) -> np.ndarray:
    """Age mixing weights ``C[i, i'] / sum_r C[r, i']``."""
    return column_normalize(_check_contact(C))


def activity_from_contact(C) -> np.ndarray:
    """Per-group contact volume (column totals of C)."""
    return _check_contact(C).sum(axis=0)


def geo_weights_power_decay(orders, rho: float) -> np.ndarray:
    """Weights proportional to ``(1 + o[g, g'])**-rho``."""
    if not rho >= 0:
        raise MixingError("rho must be nonnegative")
    o = np.asarray(orders, dtype=float)
    return column_normalize((1.0 + o) ** (-rho))


def geo_weights_gravity(D, tau, rho) -> np.ndarray:
    """Gravity weights ``tau[g] * D[g, g']**-rho[g']`` normalized over recipients g."""
    D = np.asarray(D, dtype=float)
    tau = np.asarray(tau, dtype=float)
    rho = np.asarray(rho, dtype=float)
    G = D.shape[0]
    if D.shape != (G, G) or tau.shape != (G,) or rho.shape != (G,):
        raise MixingError("D must be G x G and tau, rho length G")
    if np.any(tau <= 0) or np.any(rho <= 0):
        raise MixingError("tau and rho must be strictly positive")
    if np.any(D <= 0):
        raise MixingError("zero distance with positive decay rate is singular; "
                          "use within-unit mean distances on the diagonal")
    # log-space evaluation keeps large decay rates finite
    logw = np.log(tau)[:, None] - rho[None, :] * np.log(D)
    logw -= logw.max(axis=0, keepdims=True)
    return column_normalize(np.exp(logw))


def eigen_deformation(C_known, kappa: float, tol: float = 1e-10) -> np.ndarray:
    """Column-normalized ``Omega Lambda**kappa Omega^-1`` for a known contact matrix.

    kappa = 1 gives back ``column_normalize(C_known)``; kappa -> 0 tends to the
    identity (fully assortative mixing).
    """
    if not kappa > 0:
        raise MixingError("kappa must be positive")
    C = np.asarray(C_known, dtype=float)
    if kappa == 1.0:
        recomposed = C.copy()
    elif np.allclose(C, C.T, rtol=1e-12, atol=0):
        lam, vec = np.linalg.eigh(0.5 * (C + C.T))
        if np.any(lam <= tol * np.abs(lam).max()):
            raise MixingError("known contact matrix has nonpositive eigenvalues")
        recomposed = (vec * lam ** kappa) @ vec.T
    else:
        lam, vec = np.linalg.eig(C)
        if np.any(np.abs(lam.imag) > tol * np.abs(lam).max()):
            raise MixingError("known contact matrix has complex eigenvalues")
        lam = lam.real
        vec = vec.real
        if np.any(lam <= tol * np.abs(lam).max()):
            raise MixingError("known contact matrix has nonpositive eigenvalues")
        recomposed = (vec * lam ** kappa) @ np.linalg.inv(vec)
    floor = -tol * np.abs(recomposed).max()
    if np.any(recomposed < floor):
        raise MixingError(f"eigen-deformation with kappa={kappa} yields negative mixing weights")
    recomposed = np.maximum(recomposed, 0.0)
    return column_normalize(recomposed)


@dataclass(frozen=True)
class ContactPriorHyper:
    """Gamma shapes for diagonal and off-diagonal contact rates, common scale."""

    alpha_diag: float
    alpha_offdiag: float
    scale: float

    def __post_init__(self):
        if min(self.alpha_diag, self.alpha_offdiag, self.scale) <= 0:
            raise MixingError("contact prior hyperparameters must be positive")

    @classmethod
    def default(cls, I: int) -> "ContactPriorHyper":  # noqa: E741
        h = hyper_from_target(0.4, 1.8, I)
        return cls(h.alpha_diag, h.alpha_offdiag, 1.0 / (2 * I))

    def shapes(self, I: int) -> np.ndarray:  # noqa: E741
        a = np.full((I, I), self.alpha_offdiag)
        np.fill_diagonal(a, self.alpha_diag)
        return a


def hyper_from_target(expected_diag: float, conc_diag: float, I: int,
                      scale: float | None = None) -> ContactPriorHyper:  # noqa: E741
    """Gamma shapes giving a target mean diagonal mixing share.

    Convention: the total Dirichlet concentration of each column is
    ``conc_diag * I``; it is split so that
    ``alpha_diag / (alpha_diag + (I - 1) * alpha_offdiag) = expected_diag``.
    With ``expected_diag=0.4, conc_diag=1.8, I=6`` this gives (4.32, 1.296).
    """
    if I < 2:
        raise MixingError("need at least two groups")
    if not 0 < expected_diag < 1:
        raise MixingError("expected_diag must lie strictly between 0 and 1")
    if not conc_diag > 0:
        raise MixingError("conc_diag must be positive")
    total = conc_diag * I
    a1 = expected_diag * total
    a2 = (1.0 - expected_diag) * total / (I - 1)
    return ContactPriorHyper(a1, a2, scale if scale is not None else 1.0 / (2 * I))


def sample_contact_prior(hyper: ContactPriorHyper, I: int, rng, size=None) -> np.ndarray:  # noqa: E741
    """Draw symmetric contact matrices with independent gamma lower triangles.

    Returns shape (I, I) or (size, I, I).
    """
    if I < 2:
        raise MixingError("need at least two groups")
    rows, cols = np.tril_indices(I)
    shapes = hyper.shapes(I)[rows, cols]
    n = 1 if size is None else int(size)
    tri = rng.gamma(shapes, hyper.scale, size=(n, len(rows)))
    C = np.zeros((n, I, I))
    C[:, rows, cols] = tri
    C[:, cols, rows] = tri
    return C[0] if size is None else C


def contact_log_prior(C, hyper: ContactPriorHyper) -> float:
    """Gamma log density of the free (lower-triangular) contact entries."""
    C = _check_contact(C)
    rows, cols = np.tril_indices(C.shape[0])
    a = hyper.shapes(C.shape[0])[rows, cols]
    x = C[rows, cols]
    s = hyper.scale
    return float(np.sum((a - 1) * np.log(x) - x / s - special.gammaln(a) - a * np.log(s)))
