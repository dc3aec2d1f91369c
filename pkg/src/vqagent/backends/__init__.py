from .base import (
    MAX_IMAGES,
    Backend,
    BackendRequest,
    BackendResponse,
    BackendSet,
    Message,
    RetryPolicy,
    Usage,
    UsageMeter,
    call_with_retry,
    chat_request,
    check_request,
    fingerprint,
)
from .http import HttpBackend, HttpToolEndpoint
from .scripted import (
    CallableBackend,
    ScriptedBackend,
    ScriptedEmbedder,
    ScriptEntry,
    hashed_image_vector,
    hashed_text_vector,
    load_script,
)

__all__ = [
    "MAX_IMAGES",
    "Backend",
    "BackendRequest",
    "BackendResponse",
    "BackendSet",
    "CallableBackend",
    "HttpBackend",
    "HttpToolEndpoint",
    "Message",
    "RetryPolicy",
    "ScriptEntry",
    "ScriptedBackend",
    "ScriptedEmbedder",
    "Usage",
    "UsageMeter",
    "call_with_retry",
    "chat_request",
    "check_request",
    "fingerprint",
    "hashed_image_vector",
    "hashed_text_vector",
    "load_script",
]
