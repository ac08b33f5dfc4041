import logging
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import arviz as az
import numpy as np

from base_models import CountsMatrix, HmcConfig, HmcDiagnostics, MleFit, OutcomeSystem, SampleSet
from exceptions import DimensionMismatchError, TooFewChainsError
from mle_solver import check_degenerate, fit_mle
from model_core import PairLikelihood

logger = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], Tuple[float, np.ndarray]]

DIVERGENCE_THRESHOLD = 1000.0
RHAT_LIMIT = 1.05
STEP_JITTER = 0.1
MAX_STEP_DOUBLINGS = 100


# Reduced coordinates: omega_k = lambda_k - lambda_{k+1}
def lambda_from_omega(omega: np.ndarray) -> np.ndarray:
    """Log-strengths with sum zero whose neighbouring differences are omega; works on stacked draws."""
    omega = np.asarray(omega, dtype=float)
    zeros = np.zeros(omega.shape[:-1] + (1,))
    lam = np.concatenate([zeros, -np.cumsum(omega, axis=-1)], axis=-1)
    return lam - lam.mean(axis=-1, keepdims=True)


def omega_from_lambda(lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    return lam[..., :-1] - lam[..., 1:]


def _omega_gradient(dlam: np.ndarray) -> np.ndarray:
    # lambda_m depends on omega_k with coefficient -1 for every m > k
    return -np.cumsum(dlam[::-1])[::-1][1:]


def model_log_density(system: OutcomeSystem, counts: CountsMatrix) -> LogDensity:
    """
    Log-posterior over q = (omega_1..omega_{t-1}, tau) under the flat prior. Systems
    without overtime outcomes get a standard-normal prior on tau so the posterior stays proper.
    """
    likelihood = PairLikelihood(system, counts)
    tau_prior = not system.has_overtime

    def log_density(q: np.ndarray) -> Tuple[float, np.ndarray]:
        omega, tau = q[:-1], q[-1]
        value, dlam, dtau = likelihood(lambda_from_omega(omega), tau)
        if tau_prior:
            value -= 0.5 * tau ** 2
            dtau -= tau
        return value, np.append(_omega_gradient(dlam), dtau)

    return log_density


def log_posterior_reduced(system: OutcomeSystem, counts: CountsMatrix, omega, tau: float) -> Tuple[float, np.ndarray]:
    """Value and gradient in (omega, tau) of the log-posterior."""
    omega = np.asarray(omega, dtype=float)
    if counts.counts.shape[2] != len(system.outcomes) or omega.shape != (max(counts.n_teams - 1, 0),):
        raise DimensionMismatchError(f"expected {counts.n_teams - 1} differences, got shape {omega.shape}")
    return model_log_density(system, counts)(np.append(omega, tau))


def leapfrog(log_density: LogDensity, q: np.ndarray, r: np.ndarray, grad: np.ndarray, step_size: float,
             n_steps: int, inv_metric: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Runs n_steps leapfrog steps; returns position, momentum, log-density and gradient at the end."""
    r = r + 0.5 * step_size * grad
    value = float("nan")
    for step in range(n_steps):
        q = q + step_size * inv_metric * r
        value, grad = log_density(q)
        if step != n_steps - 1:
            r = r + step_size * grad
    r = r + 0.5 * step_size * grad
    return q, r, value, grad


def _kinetic(r: np.ndarray, inv_metric: np.ndarray) -> float:
    return 0.5 * float(np.sum(inv_metric * r ** 2))


def _momentum(rng: np.random.Generator, inv_metric: np.ndarray) -> np.ndarray:
    return rng.standard_normal(inv_metric.size) / np.sqrt(inv_metric)


def find_reasonable_step_size(log_density: LogDensity, q, value, grad, inv_metric, rng) -> float:
    """Doubles or halves a unit step until one leapfrog step crosses acceptance probability 1/2."""
    step_size = 1.0
    r = _momentum(rng, inv_metric)
    h0 = -value + _kinetic(r, inv_metric)

    def log_accept(eps):
        _, r_new, value_new, _ = leapfrog(log_density, q, r, grad, eps, 1, inv_metric)
        log_ratio = h0 - (-value_new + _kinetic(r_new, inv_metric))
        return log_ratio if np.isfinite(log_ratio) else -np.inf

    log_ratio = log_accept(step_size)
    direction = 1 if log_ratio > np.log(0.5) else -1
    for _ in range(MAX_STEP_DOUBLINGS):
        if direction * log_ratio <= -direction * np.log(2.0):
            break
        step_size *= 2.0 ** direction
        log_ratio = log_accept(step_size)
    return step_size


class DualAveraging:
    """Step-size adaptation towards a target mean acceptance probability."""

    def __init__(self, step_size: float, target: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.mu = np.log(10 * step_size)
        self.count = 0
        self.h_bar = 0.0
        self.log_step = np.log(step_size)
        self.log_step_bar = 0.0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(self.count) / self.gamma * self.h_bar
        weight = self.count ** (-self.kappa)
        self.log_step_bar = weight * self.log_step + (1 - weight) * self.log_step_bar
        return float(np.exp(self.log_step))

    @property
    def final_step_size(self) -> float:
        return float(np.exp(self.log_step_bar))


@dataclass
class ChainStats:
    accept_rate: float
    divergences: int
    step_size: float


def _transition(log_density, q, value, grad, step_size, n_steps, inv_metric, rng):
    r0 = _momentum(rng, inv_metric)
    h0 = -value + _kinetic(r0, inv_metric)
    with np.errstate(all="ignore"):
        q_new, r_new, value_new, grad_new = leapfrog(log_density, q, r0, grad, step_size, n_steps, inv_metric)
        delta = -value_new + _kinetic(r_new, inv_metric) - h0

    divergent = not np.isfinite(delta) or delta > DIVERGENCE_THRESHOLD
    accept_prob = 0.0 if not np.isfinite(delta) else float(min(1.0, np.exp(-delta)))
    if rng.uniform() < accept_prob:
        return q_new, value_new, grad_new, accept_prob, divergent
    return q, value, grad, accept_prob, divergent


def _regularized_variance(window: np.ndarray) -> np.ndarray:
    n = window.shape[0]
    return (n / (n + 5.0)) * np.var(window, axis=0, ddof=1) + 1e-3 * (5.0 / (n + 5.0))


def run_chain(log_density: LogDensity, q0: np.ndarray, config: HmcConfig,
              rng: np.random.Generator, chain: int = 0) -> Tuple[np.ndarray, ChainStats]:
    """
    One chain of static-path HMC. The first half of warmup runs with a unit metric and
    collects its second half as a variance window; at the midpoint the diagonal inverse
    metric becomes the regularized window variance and step-size adaptation restarts.
    During sampling the adapted step size is jittered by +/-10% per transition.
    """
    q = np.asarray(q0, dtype=float).copy()
    inv_metric = np.ones(q.size)
    value, grad = log_density(q)

    step_size = find_reasonable_step_size(log_density, q, value, grad, inv_metric, rng)
    adapter = DualAveraging(step_size, config.target_accept)
    midpoint = config.warmup // 2
    window = []

    for it in range(config.warmup):
        q, value, grad, accept_prob, _ = _transition(log_density, q, value, grad, step_size,
                                                     config.leapfrog_steps, inv_metric, rng)
        step_size = adapter.update(accept_prob)
        if midpoint // 2 <= it < midpoint:
            window.append(q)
        if it == midpoint - 1 and len(window) >= 2:
            inv_metric = _regularized_variance(np.array(window))
            step_size = find_reasonable_step_size(log_density, q, value, grad, inv_metric, rng)
            adapter = DualAveraging(step_size, config.target_accept)
            logger.debug("chain %d: metric adapted, step size restarts at %.4f", chain, step_size)

    step_size = adapter.final_step_size
    logger.debug("chain %d: warmup done, step size %.4f", chain, step_size)

    draws = np.empty((config.draws_per_chain, q.size))
    accept_total = 0.0
    divergences = 0
    for it in range(config.draws_per_chain):
        jittered = step_size * rng.uniform(1 - STEP_JITTER, 1 + STEP_JITTER)
        q, value, grad, accept_prob, divergent = _transition(log_density, q, value, grad, jittered,
                                                             config.leapfrog_steps, inv_metric, rng)
        draws[it] = q
        accept_total += accept_prob
        divergences += int(divergent)

    return draws, ChainStats(accept_rate=accept_total / config.draws_per_chain, divergences=divergences,
                             step_size=step_size)


def sample_chains(log_density: LogDensity, initial_points: np.ndarray, config: HmcConfig) -> Tuple[np.ndarray, List[ChainStats]]:
    """Runs one chain per initial point, each on its own stream spawned from config.seed; returns (chain, draw, dim)."""
    initial_points = np.atleast_2d(np.asarray(initial_points, dtype=float))
    streams = np.random.SeedSequence(config.seed).spawn(initial_points.shape[0])
    draws, stats = [], []
    for chain, (q0, stream) in enumerate(zip(initial_points, streams)):
        chain_draws, chain_stats = run_chain(log_density, q0, config, np.random.default_rng(stream), chain)
        draws.append(chain_draws)
        stats.append(chain_stats)
    return np.stack(draws), stats


def coordinate_names(teams) -> List[str]:
    return [f"lambda_{team}" for team in teams] + ["tau"]


def diagnostics(samples: SampleSet) -> HmcDiagnostics:
    """Rank-normalized split R-hat and bulk ESS per (lambda, tau) coordinate."""
    if len(samples.chains) < 2:
        raise TooFewChainsError(f"R-hat needs at least 2 chains, got {len(samples.chains)}")
    by_chain = samples.by_chain()
    names = coordinate_names(samples.teams)
    rhat = np.full(len(names), np.nan)
    ess = np.full(len(names), np.nan)
    flags = []

    for k, name in enumerate(names):
        values = by_chain[:, :, k]
        if np.ptp(values) == 0:
            flags.append(f"{name}: constant across all draws, R-hat undefined")
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rhat[k] = float(az.rhat(values, method="rank"))
            ess[k] = float(az.ess(values, method="bulk"))
        if not np.isfinite(rhat[k]):
            flags.append(f"{name}: R-hat undefined")
        elif rhat[k] > RHAT_LIMIT:
            flags.append(f"{name}: R-hat {rhat[k]:.3f} > {RHAT_LIMIT}")
            logger.warning("%s has R-hat %.3f", name, rhat[k])

    return HmcDiagnostics(coordinates=names, rhat=rhat, ess=ess, flags=flags)


def hmc_sample(system: OutcomeSystem, counts: CountsMatrix, config: HmcConfig,
               fit: Optional[MleFit] = None) -> Tuple[SampleSet, HmcDiagnostics]:
    """
    Samples the exact posterior. Chains start at the MLE plus U(-1, 1) noise in every
    reduced coordinate; draws come back as (lambda, tau) with sum(lambda) = 0.
    """
    check_degenerate(system, counts)
    fit = fit or fit_mle(system, counts)

    q_mle = np.append(omega_from_lambda(fit.params.lam), fit.params.tau)
    jitter_stream = np.random.SeedSequence(config.seed).spawn(config.chains + 1)[-1]
    initial = q_mle + np.random.default_rng(jitter_stream).uniform(-1.0, 1.0, (config.chains, q_mle.size))

    draws, stats = sample_chains(model_log_density(system, counts), initial, config)
    lam = lambda_from_omega(draws[:, :, :-1])
    reduced = np.concatenate([lam, draws[:, :, -1:]], axis=-1)
    samples = SampleSet(system=system, teams=counts.teams, draws=reduced.reshape(-1, reduced.shape[-1]),
                        source="hmc", chain_ids=np.repeat(np.arange(config.chains), config.draws_per_chain),
                        seed=config.seed)

    if config.chains >= 2:
        diag = diagnostics(samples)
    else:
        names = coordinate_names(counts.teams)
        diag = HmcDiagnostics(coordinates=names, rhat=np.full(len(names), np.nan), ess=np.full(len(names), np.nan),
                              flags=["single chain, R-hat not computed"])
    diag.accept_rate = np.array([s.accept_rate for s in stats])
    diag.step_size = np.array([s.step_size for s in stats])
    diag.divergences = sum(s.divergences for s in stats)
    if diag.divergences:
        logger.warning("%d divergent transitions", diag.divergences)
    logger.info("HMC: %d chains x %d draws, mean acceptance %.2f",
                config.chains, config.draws_per_chain, float(np.mean(diag.accept_rate)))
    return samples, diag
