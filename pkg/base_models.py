from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt

from exceptions import DimensionMismatchError, InconsistentMirrorError, SchemaError, UnknownTeamError


# Base model for a single game outcome
class OutcomeSpec(BaseModel):
    """Outcome I with points share p_I, overtime flag o_I and the label of its opposite -I."""
    model_config = ConfigDict(frozen=True)

    label: str
    p: float
    o: int
    opposite: str


# Base model for a set of outcomes; build through model_core.validate_system
class OutcomeSystem(BaseModel):
    """Ordered list of outcomes. The list order fixes the softmax ordering."""
    model_config = ConfigDict(frozen=True)

    name: str
    outcomes: Tuple[OutcomeSpec, ...]

    @property
    def labels(self) -> List[str]:
        return [outcome.label for outcome in self.outcomes]

    @property
    def p(self) -> np.ndarray:
        return np.array([outcome.p for outcome in self.outcomes], dtype=float)

    @property
    def o(self) -> np.ndarray:
        return np.array([outcome.o for outcome in self.outcomes], dtype=float)

    @property
    def opposite_index(self) -> np.ndarray:
        labels = self.labels
        return np.array([labels.index(outcome.opposite) for outcome in self.outcomes], dtype=int)

    @property
    def has_overtime(self) -> bool:
        """True when tau enters the likelihood (at least one outcome with o = 1)."""
        return any(outcome.o == 1 for outcome in self.outcomes)

    @property
    def n_overtime_outcomes(self) -> int:
        return sum(outcome.o for outcome in self.outcomes)

    @property
    def n_regulation_outcomes(self) -> int:
        return len(self.outcomes) - self.n_overtime_outcomes

    @property
    def win_mask(self) -> np.ndarray:
        """Outcomes counted as a win for team i (points share above one half)."""
        return self.p > 0.5

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def to_json_list(self) -> List[dict]:
        return [outcome.model_dump() for outcome in self.outcomes]


class FitOptions(BaseModel):
    """Stopping rules for the fixed-point solver."""
    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=10000, ge=1)
    damping: float = Field(default=1.0, gt=0, le=1)


class HmcConfig(BaseModel):
    """Settings of the static-path HMC sampler. The seed has no default."""
    chains: int = Field(default=4, ge=1)
    warmup: int = Field(default=1000, ge=1)
    draws_per_chain: int = Field(default=1000, ge=1)
    leapfrog_steps: int = Field(default=32, ge=1)
    target_accept: float = Field(default=0.8, gt=0, lt=1)
    seed: int


class GameRecord(BaseModel):
    """One game; the outcome is read from team_i's perspective."""
    team_i: str
    team_j: str
    outcome: str
    date: Optional[str] = None


class CollapseMap(BaseModel):
    """Maps every outcome label of a source system onto a label of a target system."""
    name: str
    mapping: Dict[str, str]


# File schemas
class CountsFile(BaseModel):
    system: Union[str, List[OutcomeSpec]]
    teams: List[str]
    counts: Dict[str, List[List[NonNegativeInt]]]


class FittedModelFile(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="allow")

    system: Union[str, List[OutcomeSpec]]
    teams: List[str]
    lam: List[float] = Field(alias="lambda")
    tau: Optional[float] = None
    covariance: Optional[List[List[float]]] = None
    converged: bool


# Numeric containers
@dataclass(frozen=True)
class ModelParams:
    """Team log-strengths lambda_i = ln(pi_i) and the log-overtime parameter tau = ln(nu)."""
    lam: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float).copy()
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "tau", float(self.tau))
        if not (np.all(np.isfinite(lam)) and np.isfinite(self.tau)):
            raise ValueError("model parameters must be finite")

    @property
    def n_teams(self) -> int:
        return self.lam.shape[0]

    @property
    def strengths(self) -> np.ndarray:
        return np.exp(self.lam)

    def as_vector(self) -> np.ndarray:
        return np.append(self.lam, self.tau)

    @classmethod
    def from_vector(cls, vector) -> "ModelParams":
        vector = np.asarray(vector, dtype=float)
        return cls(lam=vector[:-1], tau=vector[-1])

    def normalized(self) -> "ModelParams":
        return ModelParams(lam=self.lam - self.lam.mean(), tau=self.tau)


@dataclass(frozen=True)
class GradVector:
    dlambda: np.ndarray
    dtau: float

    def as_vector(self) -> np.ndarray:
        return np.append(self.dlambda, self.dtau)


@dataclass(frozen=True)
class PairData:
    """Unordered pairs i < j that met at least once, with counts from team i's perspective."""
    i: np.ndarray
    j: np.ndarray
    counts: np.ndarray
    n: np.ndarray


@dataclass(frozen=True, eq=False)
class CountsMatrix:
    """Outcome counts n^I_ij for every ordered pair, mirror entries n^{-I}_ji included."""
    system: OutcomeSystem
    teams: Tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        teams = tuple(self.teams)
        counts = np.asarray(self.counts)
        t, k = len(teams), len(self.system.outcomes)
        if counts.size == 0:
            counts = np.zeros((t, t, k), dtype=np.int64)
        if counts.shape != (t, t, k):
            raise DimensionMismatchError(f"counts have shape {counts.shape}, expected {(t, t, k)}")
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise SchemaError("counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise SchemaError("counts must be non-negative")
        if t and np.any(counts[np.arange(t), np.arange(t), :] != 0):
            raise SchemaError("a team cannot have results against itself")
        mirrored = counts[:, :, self.system.opposite_index].transpose(1, 0, 2)
        if not np.array_equal(mirrored, counts):
            i, j, idx = np.argwhere(mirrored != counts)[0]
            label = self.system.labels[idx]
            opposite = self.system.outcomes[idx].opposite
            raise InconsistentMirrorError(
                f"n^{label}({teams[i]},{teams[j]}) = {counts[i, j, idx]} but "
                f"n^{opposite}({teams[j]},{teams[i]}) = {mirrored[i, j, idx]}"
            )
        counts.setflags(write=False)
        object.__setattr__(self, "teams", teams)
        object.__setattr__(self, "counts", counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountsMatrix):
            return NotImplemented
        return (self.system == other.system and self.teams == other.teams
                and np.array_equal(self.counts, other.counts))

    __hash__ = object.__hash__

    @property
    def n_teams(self) -> int:
        return len(self.teams)

    @property
    def pair_totals(self) -> np.ndarray:
        """n_ij, games played between i and j."""
        return self.counts.sum(axis=-1)

    @property
    def total_games(self) -> int:
        return int(self.pair_totals.sum() // 2)

    @property
    def overtime_games(self) -> float:
        """n^o, games ending in an o = 1 outcome."""
        return float((self.counts @ self.system.o).sum() / 2)

    @property
    def points(self) -> np.ndarray:
        """p_k, points earned by each team."""
        return (self.counts @ self.system.p).sum(axis=1)

    @property
    def outcome_totals(self) -> np.ndarray:
        """n^I_i, results of each type for each team (t x K)."""
        return self.counts.sum(axis=1)

    def team_index(self, name: str) -> int:
        try:
            return self.teams.index(name)
        except ValueError:
            raise UnknownTeamError(f"unknown team '{name}'") from None

    @cached_property
    def pairs(self) -> PairData:
        i, j = np.triu_indices(self.n_teams, k=1)
        n = self.pair_totals[i, j]
        played = n > 0
        i, j = i[played], j[played]
        return PairData(i=i, j=j, counts=self.counts[i, j, :].astype(float), n=n[played].astype(float))


@dataclass(frozen=True)
class MleFit:
    params: ModelParams
    iterations: int
    converged: bool
    max_residual: float
    log_likelihood_at_mle: float
    log_likelihood_initial: float = float("nan")


@dataclass(frozen=True)
class GaussianPosterior:
    """Gaussian approximation N(mean, covariance) over (lambda_1..lambda_t, tau)."""
    system: OutcomeSystem
    teams: Tuple[str, ...]
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def zero_variance(self) -> np.ndarray:
        """Coordinates without posterior spread (tau in win/loss systems)."""
        return self.sd <= 1e-12

    @property
    def correlation(self) -> np.ndarray:
        """rho_ij, with 0 wherever a zero-variance coordinate is involved."""
        sd = self.sd
        safe = np.where(self.zero_variance, 1.0, sd)
        rho = self.covariance / np.outer(safe, safe)
        rho[self.zero_variance, :] = 0.0
        rho[:, self.zero_variance] = 0.0
        return rho

    @property
    def params(self) -> ModelParams:
        return ModelParams.from_vector(self.mean)


@dataclass(frozen=True)
class SampleSet:
    """Posterior draws in (lambda, tau) coordinates, one row per draw."""
    system: OutcomeSystem
    teams: Tuple[str, ...]
    draws: np.ndarray
    source: Literal["gaussian", "hmc"]
    chain_ids: np.ndarray
    seed: Optional[int] = None

    @property
    def lam(self) -> np.ndarray:
        return self.draws[:, :-1]

    @property
    def tau(self) -> np.ndarray:
        return self.draws[:, -1]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def chains(self) -> np.ndarray:
        return np.unique(self.chain_ids)

    def by_chain(self) -> np.ndarray:
        """Draws reshaped to (chain, draw, coordinate); chains must be equally long."""
        per_chain = [self.draws[self.chain_ids == chain] for chain in self.chains]
        if len({len(chunk) for chunk in per_chain}) > 1:
            raise DimensionMismatchError("chains have different lengths")
        return np.stack(per_chain)


@dataclass
class HmcDiagnostics:
    coordinates: List[str]
    rhat: np.ndarray
    ess: np.ndarray
    accept_rate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    divergences: int = 0
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flags: List[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        # undefined (constant) coordinates are reported through flags instead
        defined = np.isfinite(self.rhat)
        if not np.any(defined):
            return False
        return bool(np.all(self.rhat[defined] <= 1.05))

    def to_dict(self) -> dict:
        def clean(values):
            return [None if not np.isfinite(v) else float(v) for v in values]

        return {
            "coordinates": self.coordinates,
            "rhat": clean(self.rhat),
            "ess": clean(self.ess),
            "accept_rate": clean(self.accept_rate),
            "step_size": clean(self.step_size),
            "divergences": int(self.divergences),
            "converged": self.converged,
            "flags": self.flags,
        }
