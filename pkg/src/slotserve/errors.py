"""Exception hierarchy shared by all engine components."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ParseError(EngineError):
    """Malformed configuration or override document."""


class ValidationError(EngineError):
    """Well-formed document that violates a contract (non-greedy sampling, duplicate slot ids, ...)."""


class FormatError(EngineError):
    """Bad artifact container: wrong magic, truncated file, inconsistent header."""


class ShapeError(EngineError):
    """Tensor present but with the wrong shape, or a shape precondition violated."""


class ChecksumError(EngineError):
    """Artifact payload does not match its recorded checksum."""


class ArchMismatch(EngineError):
    """Two artifacts (or an artifact and a slot) disagree on architecture geometry."""


class CapacityError(EngineError):
    """Slot or manager capacity exceeded."""


class UnknownRequest(EngineError):
    """Request id does not match any configured slot."""


class SlotBusy(EngineError):
    """Slot is already held by a live request."""


class RangeError(EngineError):
    """Truncation target outside the legal [prefix_len, current_len] range."""


class DegenerateRow(EngineError):
    """Masked softmax row with every entry masked."""


class NoKernel(EngineError):
    """A dispatch entry references an impl_id missing from the kernel registry."""


class UnknownImpl(EngineError):
    """An override document names an impl_id missing from the kernel registry."""


class DuplicateImpl(EngineError):
    """Two kernel implementations registered under the same impl_id."""


class NoCandidates(EngineError):
    """Auto-tuner found no registered implementation for a context."""


class CaptureUnsupported(EngineError):
    """An operation resolved to an implementation that cannot be captured."""


class GeometryDrift(EngineError):
    """Slot geometry or storage changed between plan capture and replay."""


class TableFrozen(EngineError):
    """Mutation attempted on a dispatch table after engine initialization froze it."""


class ClosedHandle(EngineError):
    """Engine API call after shutdown."""
