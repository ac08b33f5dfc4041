import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.optimize import brentq
from scipy.special import expit

from base_models import (CountsMatrix, FitOptions, FittedModelFile, GaussianPosterior, HmcConfig, ModelParams,
                         OutcomeSystem, SampleSet)
from exceptions import (DimensionMismatchError, IncompatibleMapError, MissingSamplesError, NotConvergedError,
                        SchemaError, UnknownTeamError)
from hmc import coordinate_names, hmc_sample
from ingest import COLLAPSE_TARGETS, collapse, read_counts, read_games, resolve_system, standard_collapse_map
from laplace import GammaSummary, gaussian_approximation, marginal_gamma, sample_gaussian
from mle_solver import fit_mle
from model_core import (BUILTIN_SYSTEMS, even_match_overtime_prob, expected_points, probability_table, probs_from_gamma,
                        validate_system, win_and_overtime)
from utils import format_table, get_setting, grid_mass, kde_1d, kde_2d

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.5, 0.95)
ROOT_BRACKET = 50.0


# Input
def load_counts(args: argparse.Namespace, system: OutcomeSystem) -> CountsMatrix:
    """Counts from --games or --counts, optionally collapsed onto the model's outcomes with --collapse."""
    collapse_name = getattr(args, "collapse", None)
    if args.games:
        source = resolve_system(args.source_model) if collapse_name else system
        counts = read_games(args.games, source)
    else:
        counts = read_counts(args.counts)

    if collapse_name:
        target = COLLAPSE_TARGETS[collapse_name]
        if target.outcomes != system.outcomes:
            raise IncompatibleMapError(f"--collapse {collapse_name} produces '{target.name}' counts, "
                                       f"not '{system.name}'")
        counts = collapse(counts, standard_collapse_map(counts.system, collapse_name), target)
    elif counts.system.outcomes != system.outcomes:
        raise DimensionMismatchError(f"counts are for '{counts.system.name}' but --model is '{system.name}'")

    logger.info("%d teams, %d games", counts.n_teams, counts.total_games)
    return counts


def _system_for_file(system: OutcomeSystem):
    builtin = BUILTIN_SYSTEMS.get(system.name)
    if builtin is not None and builtin.outcomes == system.outcomes:
        return system.name
    return list(system.outcomes)


def fitted_model_json(system: OutcomeSystem, teams, params: ModelParams, covariance: Optional[np.ndarray],
                      converged: bool, **extra) -> str:
    model = FittedModelFile(
        system=_system_for_file(system),
        teams=list(teams),
        lam=params.lam.tolist(),
        tau=params.tau if system.has_overtime else None,
        covariance=None if covariance is None else covariance.tolist(),
        converged=converged,
        **extra,
    )
    return model.model_dump_json(by_alias=True, indent=2)


def load_fitted_model(path) -> Tuple[OutcomeSystem, Tuple[str, ...], ModelParams, Optional[np.ndarray]]:
    try:
        model = FittedModelFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise SchemaError(f"fitted model file: {e.errors()[0]['msg']}") from None
    system = resolve_system(model.system) if isinstance(model.system, str) else validate_system(model.system)
    if len(model.lam) != len(model.teams):
        raise SchemaError("fitted model file: one lambda per team is required")
    params = ModelParams(lam=model.lam, tau=model.tau or 0.0)
    covariance = None if model.covariance is None else np.asarray(model.covariance, dtype=float)
    return system, tuple(model.teams), params, covariance


def samples_frame(samples: SampleSet) -> pd.DataFrame:
    chain_ids = np.asarray(samples.chain_ids)
    draw = np.zeros(chain_ids.size, dtype=int)
    for chain in samples.chains:
        mask = chain_ids == chain
        draw[mask] = np.arange(mask.sum())
    frame = pd.DataFrame(samples.draws, columns=coordinate_names(samples.teams))
    frame.insert(0, "draw", draw)
    frame.insert(0, "chain", chain_ids)
    return frame


def load_samples_csv(path, system: OutcomeSystem, teams: Sequence[str]) -> SampleSet:
    """Reads chain,draw,lambda_<team>...,tau; draws from more than one chain are taken to be HMC output."""
    path = Path(path)
    if not path.is_file():
        raise MissingSamplesError(f"no samples file at {path}")
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise MissingSamplesError(f"samples file {path} is empty") from None
    expected = ["chain", "draw"] + coordinate_names(teams)
    if list(frame.columns) != expected:
        raise MissingSamplesError(f"samples file columns {list(frame.columns)} do not match {expected}")
    if frame.empty:
        raise MissingSamplesError(f"samples file {path} has no draws")
    chain_ids = frame["chain"].to_numpy(dtype=int)
    source = "hmc" if np.unique(chain_ids).size > 1 else "gaussian"
    return SampleSet(system=system, teams=tuple(teams), draws=frame[expected[2:]].to_numpy(dtype=float),
                     source=source, chain_ids=chain_ids)


def parse_pairs(specs: Optional[List[str]], teams: Sequence[str], ordered: bool = True) -> List[Tuple[int, int]]:
    """'all' (or nothing) gives every pair; otherwise each spec is 'TeamA,TeamB'."""
    if not specs or specs == ["all"]:
        n = len(teams)
        return [(i, j) for i in range(n) for j in range(n) if i != j and (ordered or i < j)]
    index = {team: k for k, team in enumerate(teams)}
    pairs = []
    for spec in specs:
        names = [name.strip() for name in spec.split(",")]
        if len(names) != 2:
            raise SchemaError(f"pair '{spec}' must look like 'TeamA,TeamB'")
        for name in names:
            if name not in index:
                raise UnknownTeamError(f"unknown team '{name}'")
        if names[0] == names[1]:
            raise SchemaError(f"pair '{spec}' names the same team twice")
        pairs.append((index[names[0]], index[names[1]]))
    return pairs


# Transforms
@dataclass(frozen=True)
class WinOvertimePoint:
    gamma: float
    tau: float
    theta: np.ndarray


def invert_win_overtime(system: OutcomeSystem, theta_w: float, theta_o: float) -> WinOvertimePoint:
    """
    Finds the (gamma, tau) whose outcome probabilities have total win probability theta_w
    and overtime probability theta_o, by nested one-dimensional root finding: tau solves
    the overtime equation for each gamma, gamma solves the win equation along that curve.
    """
    if not system.has_overtime:
        raise IncompatibleMapError(f"'{system.name}' has no overtime outcomes")
    if not (0 < theta_w < 1 and 0 < theta_o < 1):
        raise ValueError("theta_w and theta_o must lie strictly between 0 and 1")

    def win_and_ot(gamma, tau):
        theta_win, theta_ot = win_and_overtime(system, probs_from_gamma(system, gamma, tau))
        return float(theta_win), float(theta_ot)

    def tau_for(gamma):
        return brentq(lambda tau: win_and_ot(gamma, tau)[1] - theta_o, -ROOT_BRACKET, ROOT_BRACKET, xtol=1e-14)

    gamma = brentq(lambda g: win_and_ot(g, tau_for(g))[0] - theta_w, -ROOT_BRACKET, ROOT_BRACKET, xtol=1e-14)
    tau = tau_for(gamma)
    return WinOvertimePoint(gamma=gamma, tau=tau, theta=probs_from_gamma(system, gamma, tau))


def ternary_coordinates(system: OutcomeSystem, theta: np.ndarray) -> pd.DataFrame:
    """Barycentric (W, T, L) probabilities and their position in a triangle with L at (0, 0) and W at (1, 0)."""
    theta_w, theta_t = win_and_overtime(system, theta)
    theta_l = 1.0 - theta_w - theta_t
    return pd.DataFrame({
        "theta_w": theta_w,
        "theta_t": theta_t,
        "theta_l": theta_l,
        "x": theta_w + 0.5 * theta_t,
        "y": np.sqrt(3.0) / 2.0 * theta_t,
    })


def overtime_prob_draws(system: OutcomeSystem, tau: np.ndarray) -> np.ndarray:
    """Even-match overtime probability for each draw of tau."""
    return probs_from_gamma(system, np.zeros_like(tau), tau) @ system.o


# Tables
def standings_frame(system: OutcomeSystem, counts: CountsMatrix, params: ModelParams,
                    post: Optional[GaussianPosterior] = None) -> pd.DataFrame:
    frame = pd.DataFrame({
        "games": counts.pair_totals.sum(axis=1),
        "points": counts.points,
        "expected": expected_points(system, counts, params),
        "pi": params.strengths,
        "lambda": params.lam,
    }, index=list(counts.teams))
    if post is not None:
        frame["sd"] = post.sd[:-1]
    return frame


def probability_frames(system: OutcomeSystem, teams: Sequence[str], params: ModelParams) -> Dict[str, pd.DataFrame]:
    """One t x t table of theta^I_ij (row team i, column team j) per outcome."""
    table = probability_table(system, params)
    return {label: pd.DataFrame(table[:, :, k], index=list(teams), columns=list(teams))
            for k, label in enumerate(system.labels)}


def correlation_frame(post: GaussianPosterior) -> pd.DataFrame:
    names = list(post.teams) + (["tau"] if post.system.has_overtime else [])
    size = len(names)
    return pd.DataFrame(post.correlation[:size, :size], index=names, columns=names)


def _print_fit(system, counts, fit, post):
    params = fit.params
    print(f" >> Model '{system.name}': {counts.n_teams} teams, {counts.total_games} games, "
          f"converged after {fit.iterations} iterations (log-likelihood {fit.log_likelihood_at_mle:.4f})\n")
    print(format_table(standings_frame(system, counts, params, post)))
    if system.has_overtime:
        print(f"\n >> tau = {params.tau:.2f} +/- {post.sd[-1]:.2f}, nu = {np.exp(params.tau):.2f}, "
              f"even-match overtime probability {even_match_overtime_prob(system, params.tau):.2f}")
    for label, frame in probability_frames(system, counts.teams, params).items():
        print(f"\n >> theta^{label} (row team vs column team)")
        print(format_table(frame))
    print("\n >> Correlations")
    print(format_table(correlation_frame(post)))
    if np.any(post.zero_variance[:-1]) or (system.has_overtime and post.zero_variance[-1]):
        print(" >> Some coordinates have zero variance; their correlations are reported as 0")


# Commands
def cmd_fit(args: argparse.Namespace) -> int:
    system = resolve_system(args.model)
    counts = load_counts(args, system)
    fit = fit_mle(system, counts, FitOptions(tol=args.tol, max_iter=args.max_iter, damping=args.damping))

    if not fit.converged:
        if args.out:
            Path(args.out).write_text(fitted_model_json(system, counts.teams, fit.params, None, False,
                                                        iterations=fit.iterations), encoding="utf-8")
        raise NotConvergedError(f"no convergence after {fit.iterations} iterations "
                                f"(largest residual {fit.max_residual:.2e})")

    post = gaussian_approximation(system, counts, fit)
    _print_fit(system, counts, fit, post)
    if args.out:
        Path(args.out).write_text(
            fitted_model_json(system, counts.teams, fit.params, post.covariance, True,
                              iterations=fit.iterations, log_likelihood=fit.log_likelihood_at_mle),
            encoding="utf-8",
        )
        logger.info("wrote %s", args.out)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    system = resolve_system(args.model)
    counts = load_counts(args, system)
    fit = fit_mle(system, counts)
    diag = None

    if args.method == "gaussian":
        if not fit.converged:
            raise NotConvergedError(f"no convergence after {fit.iterations} iterations")
        samples = sample_gaussian(gaussian_approximation(system, counts, fit), args.draws, args.seed)
    else:
        config = HmcConfig(chains=args.chains, warmup=args.warmup, draws_per_chain=args.draws,
                           leapfrog_steps=args.leapfrog_steps, target_accept=args.target_accept, seed=args.seed)
        samples, diag = hmc_sample(system, counts, config, fit=fit)

    csv_text = samples_frame(samples).to_csv(index=False, float_format="%.17g", lineterminator="\n")
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
        logger.info("wrote %d draws to %s", samples.n_draws, args.out)
    else:
        sys.stdout.write(csv_text)

    if diag is not None:
        diag_text = json.dumps(diag.to_dict(), indent=2)
        diag_path = args.diagnostics or (Path(args.out).with_suffix(".diagnostics.json") if args.out else None)
        if diag_path:
            Path(diag_path).write_text(diag_text, encoding="utf-8")
            logger.info("wrote diagnostics to %s", diag_path)
        else:
            print(diag_text, file=sys.stderr)
        if not np.any(np.isfinite(diag.rhat)):
            print(" >> Warning: R-hat needs at least 2 chains, convergence was not checked", file=sys.stderr)
        elif not diag.converged:
            print(" >> Warning: some chains disagree (R-hat > 1.05); see the diagnostics", file=sys.stderr)
    return 0


def predict_frame(system: OutcomeSystem, teams: Sequence[str], params: ModelParams,
                  pairs: List[Tuple[int, int]], playoff: bool = False,
                  samples: Optional[SampleSet] = None) -> pd.DataFrame:
    """theta^I for each requested (i, j), at the MLE or averaged over posterior draws."""
    rows = []
    for i, j in pairs:
        if samples is None:
            gamma, tau = np.array([params.lam[i] - params.lam[j]]), np.array([params.tau])
        else:
            gamma, tau = samples.lam[:, i] - samples.lam[:, j], samples.tau
        theta = probs_from_gamma(system, gamma, tau).mean(axis=0)
        row = {"team_i": teams[i], "team_j": teams[j]}
        row.update({label: theta[k] for k, label in enumerate(system.labels)})
        if playoff:
            row["playoff"] = float(np.mean(expit(gamma)))
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_predict(args: argparse.Namespace) -> int:
    system, teams, params, _ = load_fitted_model(args.fitted)
    pairs = parse_pairs(args.pairs, teams)
    samples = load_samples_csv(args.posterior, system, teams) if args.posterior else None
    frame = predict_frame(system, teams, params, pairs, playoff=args.playoff, samples=samples)

    source = f"posterior mean over {samples.n_draws} draws" if samples is not None else "maximum likelihood"
    print(f" >> Outcome probabilities ({source}), from team_i's side\n")
    print(format_table(frame.set_index(["team_i", "team_j"])))
    if args.out:
        frame.to_csv(args.out, index=False, float_format="%.17g", lineterminator="\n")
    return 0


@dataclass
class ReportBundle:
    mle: pd.DataFrame
    probabilities: Dict[str, pd.DataFrame]
    gaussian_sd: Optional[pd.Series]
    correlation: Optional[pd.DataFrame]
    summary: dict
    densities: Dict[str, pd.DataFrame] = field(default_factory=dict)
    points: Dict[str, pd.DataFrame] = field(default_factory=dict)


def _coordinate_summary(values: np.ndarray) -> dict:
    low, mid, high = np.quantile(values, QUANTILES)
    return {"mean": float(np.mean(values)), "sd": float(np.std(values, ddof=1)) if values.size > 1 else 0.0,
            "q05": float(low), "q50": float(mid), "q95": float(high)}


def _grid_1d(values, name: str, grid_points: int) -> pd.DataFrame:
    grid, density = kde_1d(values, grid_points)
    return pd.DataFrame({name: grid, "density": density})


def _grid_2d(x, y, x_name: str, y_name: str, grid_points: int) -> pd.DataFrame:
    grid_x, grid_y, density = kde_2d(x, y, grid_points)
    xx, yy = np.meshgrid(grid_x, grid_y, indexing="ij")
    return pd.DataFrame({x_name: xx.ravel(), y_name: yy.ravel(), "density": density.ravel()})


def build_report(system: OutcomeSystem, teams: Sequence[str], params: ModelParams, samples: SampleSet,
                 pairs: List[Tuple[int, int]], covariance: Optional[np.ndarray] = None,
                 grid_points: Optional[int] = None, grid_points_2d: Optional[int] = None) -> ReportBundle:
    """
    Tables at the MLE, posterior summaries and density grids for each requested pair:
    gamma_ij, and for overtime systems tau, the even-match overtime probability, (gamma_ij, tau)
    and (theta^W, theta^O). Three-outcome systems also get per-draw ternary coordinates.
    """
    grid_points = grid_points or get_setting("MOBT_GRID_POINTS", 256, int)
    grid_points_2d = grid_points_2d or get_setting("MOBT_GRID_POINTS_2D", 64, int)
    teams = list(teams)

    mle = pd.DataFrame({"lambda": params.lam, "pi": params.strengths}, index=teams)
    gaussian_sd, correlation = None, None
    if covariance is not None:
        post = GaussianPosterior(system=system, teams=tuple(teams), mean=params.as_vector(), covariance=covariance)
        names = teams + (["tau"] if system.has_overtime else [])
        gaussian_sd = pd.Series(post.sd[:len(names)], index=names)
        correlation = correlation_frame(post)

    names = coordinate_names(teams)
    if not system.has_overtime:
        names = names[:-1]
    summary = {
        "system": system.name,
        "source": samples.source,
        "draws": samples.n_draws,
        "coordinates": {name: _coordinate_summary(samples.draws[:, k]) for k, name in enumerate(names)},
        "gamma": {},
    }
    if system.has_overtime:
        summary["tau_mle"] = params.tau
        summary["overtime_probability"] = _coordinate_summary(overtime_prob_draws(system, samples.tau))

    densities, points = {}, {}
    if system.has_overtime:
        densities["tau"] = _grid_1d(samples.tau, "tau", grid_points)
        densities["overtime_probability"] = _grid_1d(overtime_prob_draws(system, samples.tau),
                                                     "overtime_probability", grid_points)

    for i, j in pairs:
        key = f"{teams[i]}_{teams[j]}"
        gamma_summary: GammaSummary = marginal_gamma(samples, i, j, density=True, grid_points=grid_points)
        summary["gamma"][f"{teams[i]}-{teams[j]}"] = gamma_summary.to_dict()
        if gamma_summary.grid is not None:
            densities[f"gamma_{key}"] = pd.DataFrame({"gamma": gamma_summary.grid, "density": gamma_summary.density})
        if not system.has_overtime:
            continue

        gamma = samples.lam[:, i] - samples.lam[:, j]
        theta = probs_from_gamma(system, gamma, samples.tau)
        theta_w, theta_o = win_and_overtime(system, theta)
        densities[f"gamma_tau_{key}"] = _grid_2d(gamma, samples.tau, "gamma", "tau", grid_points_2d)
        densities[f"win_overtime_{key}"] = _grid_2d(theta_w, theta_o, "theta_w", "theta_o", grid_points_2d)
        if len(system.outcomes) == 3:
            points[f"ternary_{key}"] = ternary_coordinates(system, theta)

    return ReportBundle(mle=mle, probabilities=probability_frames(system, teams, params), gaussian_sd=gaussian_sd,
                        correlation=correlation, summary=summary, densities=densities, points=points)


def density_mass(frame: pd.DataFrame) -> float:
    """Trapezoid mass of a 1-D (value, density) or long-format 2-D (x, y, density) grid."""
    axes = [column for column in frame.columns if column != "density"]
    if len(axes) == 1:
        return grid_mass(frame["density"].to_numpy(), frame[axes[0]].to_numpy())
    grid_x = np.unique(frame[axes[0]].to_numpy())
    grid_y = np.unique(frame[axes[1]].to_numpy())
    density = frame["density"].to_numpy().reshape(grid_x.size, grid_y.size)
    return grid_mass(density, grid_x, grid_y)


def write_report(bundle: ReportBundle, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def write_csv(frame: pd.DataFrame, name: str, index: bool = False):
        path = out_dir / f"{name}.csv"
        frame.to_csv(path, index=index, float_format="%.10g", lineterminator="\n")
        written.append(path)

    write_csv(bundle.mle, "mle", index=True)
    for label, frame in bundle.probabilities.items():
        write_csv(frame, f"theta_{label}", index=True)
    if bundle.correlation is not None:
        write_csv(bundle.gaussian_sd.rename("sd").to_frame(), "gaussian_sd", index=True)
        write_csv(bundle.correlation, "correlation", index=True)
    for name, frame in {**bundle.densities, **bundle.points}.items():
        write_csv(frame, name)

    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(bundle.summary, indent=2), encoding="utf-8")
    written.append(summary_path)
    logger.info("wrote %d report files to %s", len(written), out_dir)
    return written


def cmd_report(args: argparse.Namespace) -> int:
    system, teams, params, covariance = load_fitted_model(args.fitted)
    samples = load_samples_csv(args.samples, system, teams)
    pairs = parse_pairs(args.pairs, teams, ordered=False)
    bundle = build_report(system, teams, params, samples, pairs, covariance)
    written = write_report(bundle, args.out_dir)
    print(f" >> Wrote {len(written)} files to {args.out_dir}")
    for name, gamma in bundle.summary["gamma"].items():
        low, high = gamma["interval"]
        print(f"    gamma {name}: {gamma['mean']:.2f} +/- {gamma['sd']:.2f} (90%: {low:.2f} to {high:.2f})")
    if "overtime_probability" in bundle.summary:
        ot = bundle.summary["overtime_probability"]
        print(f"    even-match overtime probability: {ot['mean']:.2f} +/- {ot['sd']:.2f}")
    return 0
