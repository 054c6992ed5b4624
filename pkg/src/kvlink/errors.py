"""Exception hierarchy for the engine.

Every error raised on purpose derives from ``KVLinkError`` so callers (the CLI in
particular) can map families of failures onto exit codes.
"""


class KVLinkError(Exception):
    """Base class for all engine errors."""


class ShapeError(KVLinkError, ValueError):
    pass


class DegenerateRowError(KVLinkError, ValueError):
    """A softmax row has no allowed entry."""


class ConfigError(KVLinkError, ValueError):
    pass


class PositionError(KVLinkError, IndexError):
    """A position falls outside the rotary table range."""


class CausalityError(KVLinkError, ValueError):
    """A mask lets a query see a later position."""


class EmptyInputError(KVLinkError, ValueError):
    pass


class PlanError(KVLinkError, ValueError):
    pass


class RuleError(KVLinkError, ValueError):
    """Mask rule spans overlap or leave holes."""


class VocabError(KVLinkError, ValueError):
    """Ordinary tokens collide with reserved IDs, or an ID is out of vocabulary."""


class FormatError(KVLinkError):
    """A weights or cache file is malformed."""


class TruncationError(FormatError):
    pass


class StoreError(KVLinkError):
    pass


class CapacityError(StoreError):
    pass


class CompatibilityError(StoreError):
    """Cache was produced by a different model."""


class IntegrityError(StoreError):
    """CRC mismatch on a stored cache."""


class SetupError(KVLinkError):
    pass
