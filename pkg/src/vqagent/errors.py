"""Exception hierarchy shared across the package."""

from __future__ import annotations


class VQAgentError(Exception):
    """Base class for every error raised by this package."""


# -- protocol ---------------------------------------------------------------


class ProtocolError(VQAgentError):
    """A model response could not be turned into a protocol record."""

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class MalformedMessage(ProtocolError):
    pass


class AmbiguousMessage(ProtocolError):
    pass


class MissingField(ProtocolError):
    pass


class InvalidVerdict(ProtocolError):
    pass


class MissingCriterion(ProtocolError):
    pass


# -- media ------------------------------------------------------------------


class MediaError(VQAgentError):
    pass


class BadTimestamp(MediaError, ValueError):
    pass


class OutOfRange(MediaError):
    pass


class DecodeFailure(MediaError):
    pass


class ASRFailure(MediaError):
    pass


# -- retrieval --------------------------------------------------------------


class RetrievalError(VQAgentError):
    pass


class DimensionMismatch(RetrievalError, ValueError):
    pass


class ZeroVector(RetrievalError, ValueError):
    pass


class EmptyTranscript(RetrievalError):
    pass


class EmbedderFailure(RetrievalError):
    pass


class IndexFormatError(RetrievalError):
    pass


# -- framegrid --------------------------------------------------------------


class GridError(VQAgentError):
    pass


class TooManyTimestamps(GridError, ValueError):
    pass


class FrameCountMismatch(GridError, ValueError):
    pass


class ImageComposeFailure(GridError):
    pass


# -- backends ---------------------------------------------------------------


class BackendError(VQAgentError):
    pass


class Transport(BackendError):
    """Network-level failure; retried."""


class RateLimited(BackendError):
    """Provider asked us to slow down; retried with backoff."""


class ProviderRejection(BackendError):
    """Provider refused the request; never retried."""


class ImageLimitExceeded(BackendError, ValueError):
    """Vision request carries more images than the provider accepts."""


class ScriptExhausted(BackendError):
    """Scripted backend has no entry left for a request."""


class ScriptMismatch(BackendError):
    """Strict scripted backend got a request its next entry does not match."""


# -- toolkit ----------------------------------------------------------------


class ToolError(VQAgentError):
    pass


class DuplicateTool(ToolError):
    pass


class UnknownTool(ToolError):
    pass


class BadArguments(ToolError):
    pass


class HandlerFailure(ToolError):
    pass


class MissingDependency(ToolError):
    pass


# -- session ----------------------------------------------------------------


class SessionError(VQAgentError):
    def __init__(self, message: str, chain=None):
        super().__init__(message)
        self.chain = chain


class EmptyRegistry(SessionError):
    pass


class TemplateMissing(SessionError):
    pass


class TraceCorrupt(SessionError):
    pass


class TraceIncomplete(SessionError):
    pass


# -- critic -----------------------------------------------------------------


class CriticError(VQAgentError):
    pass


class MalformedCriteria(CriticError):
    pass


class NoEvidence(CriticError):
    pass


class BackendFailure(CriticError):
    pass


# -- evaluation -------------------------------------------------------------


class EvalError(VQAgentError):
    pass


class MalformedVerdict(EvalError):
    pass


class AmbiguousSelection(EvalError):
    pass


class ManifestError(EvalError):
    pass
