"""Exception types shared across the simulator."""


class RanopsError(Exception):
    """Base class for all simulator errors."""


class SchedulingInPast(RanopsError):
    """An event was scheduled before the current virtual clock."""


class DuplicateRegistration(RanopsError):
    """A service identity was registered (or deployed) twice."""


class UnknownService(RanopsError):
    """An operation referenced a service that is not registered."""


class InvalidWeights(RanopsError):
    """Route split weights are negative or do not sum to 100."""


class UnknownVersion(RanopsError):
    """A policy referenced a version that is not registered under its host."""


class NoEligibleVersion(RanopsError):
    """Every version of a host is ejected; routing has no target."""


class UnknownGnb(RanopsError):
    """A plan referenced a gNB identifier with no matching E2 node."""


class MissingBinding(RanopsError):
    """Template instantiation is missing a required placeholder value."""


class TypeMismatch(RanopsError):
    """A template binding has the wrong type for its placeholder."""


class PhaseTimeout(RanopsError):
    """A migration phase did not become healthy within its budget."""


class NotRollbackable(RanopsError):
    """Rollback was requested on a run with no active candidate."""


class ConfigError(RanopsError):
    """A scenario config failed to parse or validate.

    ``location`` carries the file path plus the dotted key path of the
    offending entry so the CLI can report it before any simulation starts.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
