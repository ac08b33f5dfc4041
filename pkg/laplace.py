import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import eigh, pinvh
from scipy.stats import norm

from base_models import CountsMatrix, GaussianPosterior, MleFit, OutcomeSystem, SampleSet
from exceptions import NotConvergedError, NotSymmetricError, SameTeamError
from model_core import hessian
from utils import get_setting, kde_1d

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
INTERVAL = 0.90


def _rank_tol(rank_tol: Optional[float]) -> float:
    return get_setting("MOBT_RANK_TOL", 1e-9, float) if rank_tol is None else rank_tol


def pseudo_inverse(hess: np.ndarray, rank_tol: Optional[float] = None) -> np.ndarray:
    """
    Moore-Penrose pseudo-inverse of a symmetric matrix: eigenvalues with
    |e| <= rank_tol * max|e| count as zero, the rest are reciprocated.
    """
    hess = np.asarray(hess, dtype=float)
    if hess.ndim != 2 or hess.shape[0] != hess.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {hess.shape}")
    scale = max(1.0, float(np.max(np.abs(hess), initial=0.0)))
    if np.max(np.abs(hess - hess.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise NotSymmetricError("matrix is not symmetric")

    inverse = pinvh(hess, atol=0.0, rtol=_rank_tol(rank_tol))
    return (inverse + inverse.T) / 2


def gaussian_approximation(system: OutcomeSystem, counts: CountsMatrix, fit: MleFit,
                           rank_tol: Optional[float] = None) -> GaussianPosterior:
    """Gaussian centred on the MLE with covariance the pseudo-inverse of the Hessian there."""
    if not fit.converged:
        raise NotConvergedError(f"the fit did not converge after {fit.iterations} iterations")
    covariance = pseudo_inverse(hessian(system, counts, fit.params), rank_tol)
    if not system.has_overtime:
        # tau is not identified without overtime outcomes
        covariance[-1, :] = 0.0
        covariance[:, -1] = 0.0
    return GaussianPosterior(system=system, teams=counts.teams, mean=fit.params.as_vector(), covariance=covariance)


def _factor(covariance: np.ndarray, rank_tol: float) -> np.ndarray:
    # columns span only the non-zero modes, so draws never leave the sum-zero subspace
    eigenvalues, eigenvectors = eigh(covariance)
    top = float(np.max(np.abs(eigenvalues), initial=0.0))
    keep = eigenvalues > rank_tol * top
    return eigenvectors[:, keep] * np.sqrt(eigenvalues[keep])


def sample_gaussian(post: GaussianPosterior, n: int, seed: int, rank_tol: Optional[float] = None) -> SampleSet:
    """n draws from N(mean, covariance); identical for identical seeds."""
    if n < 1:
        raise ValueError("need at least one draw")
    factor = _factor(post.covariance, _rank_tol(rank_tol))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, factor.shape[1]))
    draws = post.mean[None, :] + z @ factor.T
    logger.info("drew %d Gaussian samples (rank %d)", n, factor.shape[1])
    return SampleSet(system=post.system, teams=post.teams, draws=draws, source="gaussian",
                     chain_ids=np.zeros(n, dtype=int), seed=seed)


@dataclass(frozen=True)
class GammaSummary:
    """Marginal of gamma_ij = lambda_i - lambda_j with its central 90% interval."""
    mean: float
    sd: float
    interval: Tuple[float, float]
    grid: Optional[np.ndarray] = None
    density: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "interval": list(self.interval)}


def marginal_gamma(source: Union[GaussianPosterior, SampleSet], i: int, j: int,
                   density: bool = False, grid_points: Optional[int] = None) -> GammaSummary:
    """Closed form for a Gaussian posterior, sample moments and quantiles for draws."""
    if i == j:
        raise SameTeamError(f"team {i} cannot play itself")
    tail = (1 - INTERVAL) / 2

    if isinstance(source, GaussianPosterior):
        cov = source.covariance
        mean = float(source.mean[i] - source.mean[j])
        sd = float(np.sqrt(max(cov[i, i] + cov[j, j] - 2 * cov[i, j], 0.0)))
        interval = (float(norm.ppf(tail, mean, sd)), float(norm.ppf(1 - tail, mean, sd))) if sd > 0 else (mean, mean)
        if not density or sd == 0:
            return GammaSummary(mean=mean, sd=sd, interval=interval)
        grid_points = grid_points or get_setting("MOBT_GRID_POINTS", 256, int)
        grid = np.linspace(mean - 5 * sd, mean + 5 * sd, grid_points)
        return GammaSummary(mean=mean, sd=sd, interval=interval, grid=grid, density=norm.pdf(grid, mean, sd))

    gamma = source.lam[:, i] - source.lam[:, j]
    sd = float(np.std(gamma, ddof=1)) if gamma.size > 1 else 0.0
    low, high = np.quantile(gamma, [tail, 1 - tail])
    summary = GammaSummary(mean=float(np.mean(gamma)), sd=sd, interval=(float(low), float(high)))
    if not density or sd == 0:
        return summary
    grid, values = kde_1d(gamma, grid_points)
    return GammaSummary(mean=summary.mean, sd=sd, interval=summary.interval, grid=grid, density=values)
