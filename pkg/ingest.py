import io
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from base_models import CollapseMap, CountsFile, CountsMatrix, GameRecord, OutcomeSystem
from exceptions import (BadHeaderError, EmptyFileError, IncompatibleMapError, OutcomeSystemError, SchemaError,
                        SelfGameError, UnknownOutcomeError, UnknownTeamError)
from model_core import BRADLEY_TERRY, BUILTIN_SYSTEMS, DAVIDSON, FOUR_OUTCOME, get_system, validate_system

logger = logging.getLogger(__name__)

GAME_COLUMNS = ["team_i", "team_j", "outcome"]
CUSTOM_PREFIX = "custom:"


def parse_games_csv(text: str, system: OutcomeSystem) -> List[GameRecord]:
    """
    Reads `team_i,team_j,outcome[,date]` rows, the outcome taken from team_i's side.
    Rows are numbered from 1 for the first game in error messages. Repeated rows are
    separate games.
    """
    if not text.strip():
        raise EmptyFileError("games file is empty")
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise EmptyFileError("games file is empty") from None
    except pd.errors.ParserError as e:
        raise SchemaError(f"games file is not valid CSV: {e}") from None

    columns = [str(column).strip() for column in frame.columns]
    if columns[:3] != GAME_COLUMNS or columns[3:] not in ([], ["date"]):
        raise BadHeaderError(f"expected header 'team_i,team_j,outcome[,date]', found '{','.join(columns)}'")
    frame.columns = columns
    frame = frame.fillna("")

    labels = set(system.labels)
    records = []
    for row, game in enumerate(frame.to_dict("records"), start=1):
        team_i, team_j, outcome = game["team_i"].strip(), game["team_j"].strip(), game["outcome"].strip()
        if not team_i or not team_j:
            raise SchemaError(f"row {row}: both team names are required")
        if team_i == team_j:
            raise SelfGameError(row, team_i)
        if outcome not in labels:
            raise UnknownOutcomeError(row, outcome)
        date = game.get("date", "").strip() or None
        records.append(GameRecord(team_i=team_i, team_j=team_j, outcome=outcome, date=date))

    logger.info("read %d games", len(records))
    return records


def aggregate(records: Iterable[GameRecord], system: OutcomeSystem,
              teams: Optional[Sequence[str]] = None) -> CountsMatrix:
    """Counts outcomes per ordered pair, adding the mirrored result for team_j every time."""
    records = list(records)
    if teams is None:
        teams = list(dict.fromkeys(name for record in records for name in (record.team_i, record.team_j)))
    teams = list(teams)
    if len(set(teams)) != len(teams):
        raise SchemaError("team list contains duplicates")

    index = {team: k for k, team in enumerate(teams)}
    labels = {label: k for k, label in enumerate(system.labels)}
    opposite = system.opposite_index
    counts = np.zeros((len(teams), len(teams), len(labels)), dtype=np.int64)

    for row, record in enumerate(records, start=1):
        for name in (record.team_i, record.team_j):
            if name not in index:
                raise UnknownTeamError(f"row {row}: team '{name}' is not in the team list")
        if record.team_i == record.team_j:
            raise SelfGameError(row, record.team_i)
        if record.outcome not in labels:
            raise UnknownOutcomeError(row, record.outcome)
        i, j, outcome = index[record.team_i], index[record.team_j], labels[record.outcome]
        counts[i, j, outcome] += 1
        counts[j, i, opposite[outcome]] += 1

    return CountsMatrix(system=system, teams=tuple(teams), counts=counts)


def standard_collapse_map(source: OutcomeSystem, name: str) -> CollapseMap:
    """
    'wl': outcomes worth more than half the points become W, less than half L.
    'wtl': overtime outcomes become T, the rest W or L as for 'wl'.
    """
    if name not in ("wl", "wtl"):
        raise IncompatibleMapError(f"unknown collapse '{name}', expected 'wl' or 'wtl'")
    mapping = {}
    for outcome in source.outcomes:
        if name == "wtl" and outcome.o == 1:
            mapping[outcome.label] = "T"
        elif outcome.p > 0.5:
            mapping[outcome.label] = "W"
        elif outcome.p < 0.5:
            mapping[outcome.label] = "L"
        else:
            raise IncompatibleMapError(f"outcome '{outcome.label}' is neither a win nor a loss")
    return CollapseMap(name=name, mapping=mapping)


COLLAPSE_TARGETS = {"wl": BRADLEY_TERRY, "wtl": DAVIDSON}
FOUR_TO_WL = standard_collapse_map(FOUR_OUTCOME, "wl")
FOUR_TO_WTL = standard_collapse_map(FOUR_OUTCOME, "wtl")


def collapse(counts: CountsMatrix, cmap: CollapseMap, target: OutcomeSystem) -> CountsMatrix:
    """Sums source outcome counts into target outcomes; games per pair are unchanged."""
    source = counts.system
    missing = [label for label in source.labels if label not in cmap.mapping]
    if missing:
        raise IncompatibleMapError(f"map '{cmap.name}' does not cover {', '.join(missing)}")
    unknown = sorted({label for label in cmap.mapping.values() if label not in target.labels})
    if unknown:
        raise IncompatibleMapError(f"map '{cmap.name}' targets unknown outcomes {', '.join(unknown)}")

    target_opposite = {outcome.label: outcome.opposite for outcome in target.outcomes}
    for outcome in source.outcomes:
        mapped = cmap.mapping[outcome.label]
        if cmap.mapping[outcome.opposite] != target_opposite[mapped]:
            raise IncompatibleMapError(
                f"map '{cmap.name}' sends '{outcome.label}' to '{mapped}' but its opposite "
                f"'{outcome.opposite}' to '{cmap.mapping[outcome.opposite]}'"
            )

    collapsed = np.zeros(counts.counts.shape[:2] + (len(target.outcomes),), dtype=np.int64)
    for k, label in enumerate(source.labels):
        collapsed[:, :, target.index(cmap.mapping[label])] += counts.counts[:, :, k]
    return CountsMatrix(system=target, teams=counts.teams, counts=collapsed)


def _system_from_file(system) -> OutcomeSystem:
    if isinstance(system, str):
        return get_system(system)
    return validate_system(system)


def load_counts_json(text: str) -> CountsMatrix:
    """Counts file: {"system": name or outcome list, "teams": [...], "counts": {label: t x t}}."""
    try:
        raw = CountsFile.model_validate_json(text)
    except ValidationError as e:
        error = e.errors()[0]
        where = ".".join(str(part) for part in error["loc"])
        raise SchemaError(f"counts file: {where}: {error['msg']}") from None

    system = _system_from_file(raw.system)
    t = len(raw.teams)
    if len(set(raw.teams)) != t:
        raise SchemaError("counts file: team list contains duplicates")
    extra = set(raw.counts) - set(system.labels)
    if extra:
        raise SchemaError(f"counts file: outcomes {', '.join(sorted(extra))} are not in system '{system.name}'")

    counts = np.zeros((t, t, len(system.outcomes)), dtype=np.int64)
    for k, label in enumerate(system.labels):
        if label not in raw.counts:
            raise SchemaError(f"counts file: no matrix for outcome '{label}'")
        matrix = raw.counts[label]
        if len(matrix) != t or any(len(row) != t for row in matrix):
            raise SchemaError(f"counts file: matrix for '{label}' must be {t} x {t}")
        if t:
            counts[:, :, k] = matrix
    return CountsMatrix(system=system, teams=tuple(raw.teams), counts=counts)


def save_counts_json(counts: CountsMatrix) -> str:
    system = counts.system
    builtin = BUILTIN_SYSTEMS.get(system.name)
    file = CountsFile(
        system=system.name if builtin is not None and builtin.outcomes == system.outcomes else list(system.outcomes),
        teams=list(counts.teams),
        counts={label: counts.counts[:, :, k].tolist() for k, label in enumerate(system.labels)},
    )
    return file.model_dump_json(indent=2)


def load_system_json(text: str, name: str = "custom") -> OutcomeSystem:
    """Outcome-system file: [{"label", "p", "o", "opposite"}, ...]."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise OutcomeSystemError(f"outcome system file is not valid JSON: {e}") from None
    if not isinstance(raw, list) or not all(isinstance(item, dict) for item in raw):
        raise OutcomeSystemError("outcome system file must be a list of outcome objects")
    return validate_system(raw, name=name)


def resolve_system(spec: str) -> OutcomeSystem:
    """A built-in name ('bt', 'davidson', 'four-outcome', 'ccha') or 'custom:<path to JSON>'."""
    if spec.startswith(CUSTOM_PREFIX):
        path = Path(spec[len(CUSTOM_PREFIX):])
        return load_system_json(path.read_text(encoding="utf-8"), name=path.stem)
    return get_system(spec)


def read_games(path, system: OutcomeSystem, teams: Optional[Sequence[str]] = None) -> CountsMatrix:
    return aggregate(parse_games_csv(Path(path).read_text(encoding="utf-8-sig"), system), system, teams)


def read_counts(path) -> CountsMatrix:
    return load_counts_json(Path(path).read_text(encoding="utf-8-sig"))
