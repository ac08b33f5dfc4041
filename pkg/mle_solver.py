import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from base_models import CountsMatrix, FitOptions, MleFit, ModelParams, OutcomeSystem
from exceptions import DegenerateDataError
from model_core import PairLikelihood, check_inputs, log_likelihood, log_likelihood_and_grad, probs_from_gamma

logger = logging.getLogger(__name__)

LOG_EVERY = 100


@dataclass(frozen=True)
class MlResiduals:
    """Actual minus expected points per team, and actual minus expected overtime games."""
    points: np.ndarray
    overtime: float

    @property
    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.points), initial=0.0), abs(self.overtime)))


def ml_equation_residuals(system: OutcomeSystem, counts: CountsMatrix, params: ModelParams) -> MlResiduals:
    """The maximum-likelihood equations as residuals; all vanish at the MLE."""
    check_inputs(system, counts, params.n_teams)
    _, dlam, dtau = log_likelihood_and_grad(system, counts, params.lam, params.tau)
    return MlResiduals(points=dlam, overtime=float(dtau))


def _names(counts: CountsMatrix, mask) -> List[str]:
    return [team for team, flagged in zip(counts.teams, mask) if flagged]


def check_degenerate(system: OutcomeSystem, counts: CountsMatrix):
    """
    Raises DegenerateDataError when no finite MLE exists.

    Checked in order: no games at all, teams without games, teams with zero points,
    teams with every available point, a results graph that is not strongly connected
    (some group of teams never earns a point against the rest), and for systems with
    overtime outcomes, no overtime games or only overtime games.
    """
    if counts.total_games == 0:
        raise DegenerateDataError("no games have been played")

    games = counts.pair_totals.sum(axis=1)
    if np.any(games == 0):
        raise DegenerateDataError("teams without any games have no finite strength", _names(counts, games == 0))

    points = counts.points
    available = games.astype(float)
    undefeated = np.isclose(points, available, rtol=0.0, atol=1e-9)
    if np.any(undefeated):
        raise DegenerateDataError("teams earned every available point, their strength diverges to +inf",
                                  _names(counts, undefeated))
    pointless = np.isclose(points, 0.0, rtol=0.0, atol=1e-9)
    if np.any(pointless):
        raise DegenerateDataError("teams earned no points, their strength diverges to -inf",
                                  _names(counts, pointless))

    # i -> j when i took at least some points from j
    earned = (counts.counts @ system.p) > 0
    n_groups, labels = connected_components(csr_matrix(earned), directed=True, connection="strong")
    if n_groups > 1:
        sizes = np.bincount(labels)
        smallest = int(np.argmin(sizes))
        raise DegenerateDataError(f"results split into {n_groups} groups that are not mutually connected",
                                  _names(counts, labels == smallest))

    if system.has_overtime:
        if counts.overtime_games == 0:
            raise DegenerateDataError("no game ended in an overtime outcome, tau diverges to -inf")
        if counts.overtime_games == counts.total_games:
            raise DegenerateDataError("every game ended in an overtime outcome, tau diverges to +inf")


def _team_pairs(counts: CountsMatrix) -> List[np.ndarray]:
    pairs = counts.pairs
    return [np.flatnonzero((pairs.i == k) | (pairs.j == k)) for k in range(counts.n_teams)]


def fit_mle(system: OutcomeSystem, counts: CountsMatrix, opts: Optional[FitOptions] = None,
            initial: Optional[ModelParams] = None) -> MleFit:
    """
    Solves the maximum-likelihood equations by fixed-point iteration.

    Each sweep updates tau from the overtime-count equation, then each lambda_k in turn
    from its points equation using the latest values, then recentres lambda to sum zero.
    Stops when every residual is below tol * max(1, games) and no parameter moved by
    more than tol. Running out of iterations is reported through MleFit.converged.
    """
    opts = opts or FitOptions()
    check_inputs(system, counts, counts.n_teams if initial is None else initial.n_teams)
    check_degenerate(system, counts)

    t = counts.n_teams
    pairs = counts.pairs
    p, o = system.p, system.o
    log_points = np.log(counts.points)
    log_overtime = np.log(counts.overtime_games) if system.has_overtime else 0.0
    members = _team_pairs(counts)
    likelihood = PairLikelihood(system, counts)

    if initial is None:
        lam, tau = np.zeros(t), 0.0
    else:
        lam, tau = np.array(initial.lam, dtype=float), initial.tau
    if not system.has_overtime:
        tau = 0.0
    lam -= lam.mean()

    ll_initial = log_likelihood(system, counts, ModelParams(lam=lam, tau=tau))
    scale = max(1.0, float(counts.total_games))
    previous_step = None
    converged = False
    residual = float("inf")
    iteration = 0

    for iteration in range(1, opts.max_iter + 1):
        start = np.append(lam, tau)

        if system.has_overtime:
            theta = probs_from_gamma(system, lam[pairs.i] - lam[pairs.j], tau)
            tau += log_overtime - np.log(np.sum(pairs.n * (theta @ o)))

        for k in range(t):
            idx = members[k]
            i, j, n = pairs.i[idx], pairs.j[idx], pairs.n[idx]
            expected = n * (probs_from_gamma(system, lam[i] - lam[j], tau) @ p)
            expected_k = np.sum(np.where(i == k, expected, n - expected))
            lam[k] += log_points[k] - np.log(expected_k)

        lam -= lam.mean()
        step = np.append(lam, tau) - start
        if opts.damping < 1.0 and previous_step is not None and np.dot(step, previous_step) < 0:
            step *= opts.damping
            lam = start[:-1] + step[:-1]
            lam -= lam.mean()
            tau = start[-1] + step[-1]
        previous_step = step

        if not np.all(np.isfinite(step)):
            logger.warning("fixed-point iteration produced non-finite values at iteration %d", iteration)
            lam, tau = start[:-1], float(start[-1])
            break

        _, dlam, dtau = likelihood(lam, tau)
        residual = MlResiduals(points=dlam, overtime=dtau).max_abs
        change = float(np.max(np.abs(step)))
        if iteration % LOG_EVERY == 0:
            logger.debug("iteration %d: max residual %.3e, max change %.3e", iteration, residual, change)
        if residual < opts.tol * scale and change < opts.tol:
            converged = True
            break

    params = ModelParams(lam=lam - lam.mean(), tau=tau)
    ll_final = log_likelihood(system, counts, params)
    if not converged:
        logger.warning("no convergence after %d iterations (max residual %.3e)", iteration, residual)
    if ll_final < ll_initial:
        logger.warning("log-likelihood decreased from %.6f to %.6f", ll_initial, ll_final)
    logger.info("fit '%s' on %d teams: %d iterations, log-likelihood %.6f",
                system.name, t, iteration, ll_final)

    return MleFit(params=params, iterations=iteration, converged=converged, max_residual=residual,
                  log_likelihood_at_mle=ll_final, log_likelihood_initial=ll_initial)
