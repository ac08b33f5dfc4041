class RatingError(Exception):
    """Base class for every error raised by the rating engine."""


# Outcome systems
class OutcomeSystemError(RatingError, ValueError):
    """An outcome system violates the pairing or exponent constraints."""


class DuplicateLabelError(OutcomeSystemError):
    pass


class MissingOppositeError(OutcomeSystemError):
    pass


class BadExponentError(OutcomeSystemError):
    pass


class BadPairingError(OutcomeSystemError):
    pass


class SelfOppositeNotHalfError(OutcomeSystemError):
    pass


# Model evaluation
class SameTeamError(RatingError, ValueError):
    pass


class DimensionMismatchError(RatingError, ValueError):
    pass


class NotSymmetricError(RatingError, ValueError):
    pass


class TooFewChainsError(RatingError, ValueError):
    pass


class DegenerateDataError(RatingError):
    """The data admit no finite maximum-likelihood estimate (improper posterior)."""

    def __init__(self, reason: str, teams=()):
        self.reason = reason
        self.teams = list(teams)
        detail = f" ({', '.join(self.teams)})" if self.teams else ""
        super().__init__(f"{reason}{detail}")


class NotConvergedError(RatingError):
    pass


# Ingest
class IngestError(RatingError, ValueError):
    pass


class BadHeaderError(IngestError):
    pass


class EmptyFileError(IngestError):
    pass


class UnknownOutcomeError(IngestError):
    def __init__(self, row: int, outcome: str):
        self.row = row
        self.outcome = outcome
        super().__init__(f"row {row}: unknown outcome '{outcome}'")


class SelfGameError(IngestError):
    def __init__(self, row: int, team: str):
        self.row = row
        self.team = team
        super().__init__(f"row {row}: '{team}' cannot play itself")


class SchemaError(IngestError):
    pass


class InconsistentMirrorError(IngestError):
    pass


class IncompatibleMapError(IngestError):
    pass


class UnknownTeamError(IngestError):
    pass


class MissingSamplesError(IngestError):
    pass
