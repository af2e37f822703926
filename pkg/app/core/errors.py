class TreeFedError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(TreeFedError):
    """Experiment config file missing, unreadable or invalid."""


# ─── Parameter algebra ────────────────────────────────────────────────────────

class LayoutMismatch(TreeFedError, ValueError):
    pass


class ZeroVector(TreeFedError, ValueError):
    pass


class EmptyInput(TreeFedError, ValueError):
    pass


class ZeroTotalWeight(TreeFedError, ValueError):
    pass


class PartitionMismatch(TreeFedError, ValueError):
    pass


# ─── Tree ─────────────────────────────────────────────────────────────────────

class LevelOutOfRange(TreeFedError, ValueError):
    pass


class UnknownClient(TreeFedError, KeyError):
    pass


# ─── Style mixing ─────────────────────────────────────────────────────────────

class SingleClient(TreeFedError, ValueError):
    pass


class EmptyBatch(TreeFedError, ValueError):
    pass


class ChannelMismatch(TreeFedError, ValueError):
    pass


class EmptyBuffer(TreeFedError, LookupError):
    pass


# ─── Inference / metrics / orchestration ──────────────────────────────────────

class EmptySources(TreeFedError, ValueError):
    pass


class LengthMismatch(TreeFedError, ValueError):
    pass


class ShapeMismatch(TreeFedError, ValueError):
    pass


class TooFewSites(TreeFedError, ValueError):
    pass


class TooFewDomains(TreeFedError, ValueError):
    pass
