from typing import Iterable, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.special import expit, logsumexp, softmax

from base_models import CountsMatrix, GradVector, ModelParams, OutcomeSpec, OutcomeSystem
from exceptions import (BadExponentError, BadPairingError, DimensionMismatchError, DuplicateLabelError,
                        MissingOppositeError, OutcomeSystemError, SameTeamError, SelfOppositeNotHalfError)

PAIRING_TOL = 1e-12


def validate_system(raw: Iterable[Union[OutcomeSpec, dict]], name: str = "custom") -> OutcomeSystem:
    """Checks exponents, overtime flags and the opposite-outcome involution, and returns the system."""
    specs = []
    for spec in raw:
        if isinstance(spec, OutcomeSpec):
            specs.append(spec)
            continue
        try:
            specs.append(OutcomeSpec(**spec))
        except ValidationError as e:
            fields = {str(error["loc"][0]) for error in e.errors() if error["loc"]}
            if fields & {"p", "o"}:
                raise BadExponentError(f"outcome {spec!r}: p must be a number and o must be 0 or 1") from e
            raise OutcomeSystemError(f"outcome {spec!r} needs label, p, o and opposite") from e

    seen = set()
    for spec in specs:
        if spec.label in seen:
            raise DuplicateLabelError(f"outcome '{spec.label}' is defined more than once")
        seen.add(spec.label)
    if len(specs) < 2:
        raise OutcomeSystemError("an outcome system needs at least two outcomes")

    by_label = {spec.label: spec for spec in specs}
    for spec in specs:
        if not 0.0 <= spec.p <= 1.0:
            raise BadExponentError(f"outcome '{spec.label}' has p = {spec.p}, outside [0, 1]")
        if spec.o not in (0, 1):
            raise BadExponentError(f"outcome '{spec.label}' has overtime flag {spec.o}, expected 0 or 1")
        if spec.opposite not in by_label:
            raise MissingOppositeError(f"outcome '{spec.label}' names missing opposite '{spec.opposite}'")

    for spec in specs:
        opposite = by_label[spec.opposite]
        if opposite.opposite != spec.label:
            raise BadPairingError(f"'{spec.label}' -> '{opposite.label}' -> '{opposite.opposite}' is not an involution")
        if opposite.label == spec.label:
            if abs(spec.p - 0.5) > PAIRING_TOL:
                raise SelfOppositeNotHalfError(f"self-opposite outcome '{spec.label}' must have p = 1/2, not {spec.p}")
            continue
        if abs(opposite.p - (1.0 - spec.p)) > PAIRING_TOL or opposite.o != spec.o:
            raise BadPairingError(f"'{spec.label}' and '{opposite.label}' need p summing to 1 and equal overtime flags")

    if not any(abs(spec.p - 1.0) <= PAIRING_TOL for spec in specs):
        raise OutcomeSystemError("an outcome system needs a full win (p = 1)")

    return OutcomeSystem(name=name, outcomes=tuple(specs))


BRADLEY_TERRY = validate_system([
    OutcomeSpec(label="W", p=1.0, o=0, opposite="L"),
    OutcomeSpec(label="L", p=0.0, o=0, opposite="W"),
], name="bt")

DAVIDSON = validate_system([
    OutcomeSpec(label="W", p=1.0, o=0, opposite="L"),
    OutcomeSpec(label="T", p=0.5, o=1, opposite="T"),
    OutcomeSpec(label="L", p=0.0, o=0, opposite="W"),
], name="davidson")

FOUR_OUTCOME = validate_system([
    OutcomeSpec(label="RW", p=1.0, o=0, opposite="RL"),
    OutcomeSpec(label="OW", p=2.0 / 3.0, o=1, opposite="OL"),
    OutcomeSpec(label="OL", p=1.0 / 3.0, o=1, opposite="OW"),
    OutcomeSpec(label="RL", p=0.0, o=0, opposite="RW"),
], name="four-outcome")

# 5-3-2-0: regulation/overtime wins, shootout wins and losses, regulation/overtime losses
CCHA = validate_system([
    OutcomeSpec(label="W", p=1.0, o=0, opposite="L"),
    OutcomeSpec(label="SW", p=0.6, o=1, opposite="SL"),
    OutcomeSpec(label="SL", p=0.4, o=1, opposite="SW"),
    OutcomeSpec(label="L", p=0.0, o=0, opposite="W"),
], name="ccha")

BUILTIN_SYSTEMS = {system.name: system for system in (BRADLEY_TERRY, DAVIDSON, FOUR_OUTCOME, CCHA)}


def get_system(name: str) -> OutcomeSystem:
    try:
        return BUILTIN_SYSTEMS[name]
    except KeyError:
        raise OutcomeSystemError(f"unknown outcome system '{name}' (known: {', '.join(BUILTIN_SYSTEMS)})") from None


def check_inputs(system: OutcomeSystem, counts: CountsMatrix, n_teams: int):
    if counts.system.outcomes != system.outcomes:
        raise DimensionMismatchError(f"counts are for '{counts.system.name}', not '{system.name}'")
    if n_teams != counts.n_teams:
        raise DimensionMismatchError(f"{n_teams} log-strengths for {counts.n_teams} teams")


def _check_pair(n_teams: int, i: int, j: int):
    if i == j:
        raise SameTeamError(f"team {i} cannot play itself")
    if not (0 <= i < n_teams and 0 <= j < n_teams):
        raise DimensionMismatchError(f"team index out of range for {n_teams} teams")


def probs_from_gamma(system: OutcomeSystem, gamma, tau) -> np.ndarray:
    """Softmax of p_I * gamma + o_I * tau over the outcomes; broadcasts over gamma and tau."""
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    exponents = gamma[..., None] * system.p + tau[..., None] * system.o
    return softmax(exponents, axis=-1)


def outcome_probs(system: OutcomeSystem, params: ModelParams, i: int, j: int) -> np.ndarray:
    """theta^I_ij for every outcome I, in the system's outcome order."""
    _check_pair(params.n_teams, i, j)
    return probs_from_gamma(system, params.lam[i] - params.lam[j], params.tau)


def probability_table(system: OutcomeSystem, params: ModelParams) -> np.ndarray:
    """theta^I_ij for all ordered pairs as a (t, t, K) array; the diagonal is NaN."""
    gamma = params.lam[:, None] - params.lam[None, :]
    table = probs_from_gamma(system, gamma, np.full(gamma.shape, params.tau))
    table[np.arange(params.n_teams), np.arange(params.n_teams), :] = np.nan
    return table


def win_and_overtime(system: OutcomeSystem, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Collapses theta^I into (theta^W, theta^o): any kind of win, and any o = 1 outcome."""
    theta = np.asarray(theta, dtype=float)
    return theta[..., system.win_mask].sum(axis=-1), theta @ system.o


class PairLikelihood:
    """
    Log-likelihood terms of the pairs that met at least once. The per-pair arrays are
    built once and reused by every evaluation; inputs are not checked here.
    """

    def __init__(self, system: OutcomeSystem, counts: CountsMatrix):
        pairs = counts.pairs
        self.i, self.j, self.counts, self.n = pairs.i, pairs.j, pairs.counts, pairs.n
        self.p, self.o = system.p, system.o
        self.n_teams = counts.n_teams
        self.overtime_games = counts.overtime_games
        self.pair_points = self.counts @ self.p

    def log_probs(self, lam, tau) -> np.ndarray:
        exponents = (lam[self.i] - lam[self.j])[:, None] * self.p + tau * self.o
        return exponents - logsumexp(exponents, axis=1, keepdims=True)

    def _per_team(self, weights, sign: float = -1.0) -> np.ndarray:
        t = self.n_teams
        return np.bincount(self.i, weights=weights, minlength=t) + sign * np.bincount(self.j, weights=weights, minlength=t)

    def __call__(self, lam, tau) -> Tuple[float, np.ndarray, float]:
        if self.n.size == 0:
            return 0.0, np.zeros(self.n_teams), 0.0
        log_theta = self.log_probs(lam, tau)
        theta = np.exp(log_theta)
        value = float(np.sum(self.counts * log_theta))
        # d/d(gamma_ij) = points of i against j minus their expectation
        dlam = self._per_team(self.pair_points - self.n * (theta @ self.p))
        dtau = self.overtime_games - float(np.sum(self.n * (theta @ self.o)))
        return value, dlam, dtau

    def expected_points(self, lam, tau) -> np.ndarray:
        if self.n.size == 0:
            return np.zeros(self.n_teams)
        expected = self.n * (np.exp(self.log_probs(lam, tau)) @ self.p)
        return (np.bincount(self.i, weights=expected, minlength=self.n_teams)
                + np.bincount(self.j, weights=self.n - expected, minlength=self.n_teams))

    def hessian(self, lam, tau) -> np.ndarray:
        t = self.n_teams
        hess = np.zeros((t + 1, t + 1))
        if self.n.size == 0:
            return hess
        theta = np.exp(self.log_probs(lam, tau))
        centered_p = self.p[None, :] - (theta @ self.p)[:, None]
        var_p = np.sum(theta * centered_p ** 2, axis=1)
        cov_po = np.sum(theta * centered_p * self.o[None, :], axis=1)
        theta_o = theta @ self.o

        weights = self.n * var_p
        hess[np.arange(t), np.arange(t)] = self._per_team(weights, sign=1.0)
        hess[self.i, self.j] = -weights
        hess[self.j, self.i] = -weights

        tau_row = self._per_team(self.n * cov_po)
        hess[t, :t] = tau_row
        hess[:t, t] = tau_row
        hess[t, t] = float(np.sum(self.n * theta_o * (1.0 - theta_o)))
        return hess


def log_likelihood_and_grad(system: OutcomeSystem, counts: CountsMatrix, lam, tau) -> Tuple[float, np.ndarray, float]:
    """Log-likelihood and its gradient in one pass over the pairs that met; no input checks."""
    return PairLikelihood(system, counts)(np.asarray(lam, dtype=float), tau)


def log_likelihood(system: OutcomeSystem, counts: CountsMatrix, params: ModelParams) -> float:
    """1/2 sum_ij sum_I n^I_ij ln theta^I_ij, accumulated once per unordered pair."""
    check_inputs(system, counts, params.n_teams)
    return log_likelihood_and_grad(system, counts, params.lam, params.tau)[0]


def grad_log_likelihood(system: OutcomeSystem, counts: CountsMatrix, params: ModelParams) -> GradVector:
    check_inputs(system, counts, params.n_teams)
    _, dlam, dtau = log_likelihood_and_grad(system, counts, params.lam, params.tau)
    return GradVector(dlambda=dlam, dtau=dtau)


def hessian(system: OutcomeSystem, counts: CountsMatrix, params: ModelParams) -> np.ndarray:
    """
    Minus the second-derivative matrix of the log-likelihood over (lambda_1..lambda_t, tau).

    The lambda block holds n_kl-weighted variances of p under theta_kl, the tau row the
    covariances of p and o, and H_tautau the variances of o; every row sums to zero over
    the lambda columns.
    """
    check_inputs(system, counts, params.n_teams)
    return PairLikelihood(system, counts).hessian(params.lam, params.tau)


def expected_points(system: OutcomeSystem, counts: CountsMatrix, params: ModelParams) -> np.ndarray:
    """sum_i n_ki sum_I p_I theta^I_ki, the model's expected points for each team."""
    check_inputs(system, counts, params.n_teams)
    return PairLikelihood(system, counts).expected_points(params.lam, params.tau)


def even_match_overtime_prob(system: OutcomeSystem, tau: float) -> float:
    """Probability that a game between equal-strength teams ends in an o = 1 outcome."""
    return float(softmax(system.o * tau) @ system.o)


def playoff_win_prob(params: ModelParams, i: int, j: int) -> float:
    """Probability that i beats j when the game cannot end in an overtime/shootout result."""
    _check_pair(params.n_teams, i, j)
    return float(expit(params.lam[i] - params.lam[j]))
