"""Exception types raised across the package.

Every error callers are expected to catch derives from ChronomixError, so
`except ChronomixError` at a CLI boundary catches exactly the failures this
package produces and nothing else.
"""


class ChronomixError(Exception):
    pass


class ConfigError(ChronomixError):
    """A run config, CLI flag combination, or credential is invalid."""


# --- corpus / tokenization ---

class OutOfRangeError(ChronomixError):
    """A date or year falls outside the window registry."""


class UnknownTokenError(ChronomixError):
    """Strict external-vocab tokenization hit text with no matching token."""


class FileFormatError(ChronomixError):
    """A shard, manifest, or benchmark file is malformed."""


# --- model ---

class InvalidConfigError(ChronomixError):
    pass


class ShapeMismatchError(ChronomixError):
    pass


class TokenOutOfRangeError(ChronomixError):
    """A token id >= vocab_size reached the model."""


class ChecksumMismatchError(ChronomixError):
    """Checkpoint content hash does not match (truncation or corruption)."""


class VersionMismatchError(ChronomixError):
    pass


class TokenizerMismatchError(ChronomixError):
    """Two components disagree on tokenizer identity."""


# --- temporal / mixture ---

class NoEligibleExpertError(ChronomixError):
    """The query year predates every expert's training window."""


class MissingHiddenError(ChronomixError):
    """A router strategy was invoked without hidden states."""


class DegenerateWeightsError(ChronomixError):
    """All mixture weights are zero at some position."""


# --- training ---

class EmptyBinError(ChronomixError):
    pass


class BinMismatchError(ChronomixError):
    """Training rows carry years outside the expert's window."""


# --- evaluation ---

class EmptyBenchmarkError(ChronomixError):
    pass


class EmptyOptionError(ChronomixError):
    pass


class ContextOverflowError(ChronomixError):
    """A rendered prompt exceeds the model context length."""


class EmptyTextError(ChronomixError):
    pass


class ZeroVectorError(ChronomixError):
    pass


# --- benchmark generation ---

class EmptyTimelineError(ChronomixError):
    pass


class GenValidationError(ChronomixError):
    """A timeline or generated item violates the benchmark format rules."""


class ResponseParseError(ChronomixError):
    """The completion text could not be parsed into an item."""


class InvalidTagError(GenValidationError):
    pass


class WrongOptionCountError(GenValidationError):
    pass


class MultipleCorrectError(GenValidationError):
    pass


class EndpointUnavailableError(ChronomixError):
    """The chat-completion endpoint failed after all retries."""
