"""Agent roles, completion backends and prompt templates."""

from .backends import (
    ROLES,
    BackendError,
    BackendResponseError,
    BackendTimeoutError,
    CompletionBackend,
    RemoteBackend,
    ScriptedBackend,
    ScriptedLookupError,
    context_digest,
)
from .core import (
    MAPPING_FAILURE,
    AgentError,
    AgentParseError,
    Agents,
    EmptyOutputError,
    PlanValidationError,
    parse_object_list,
    parse_tool_choice,
)
from .templates import PromptTemplate, TemplateError, load_templates

__all__ = [
    "ROLES",
    "AgentError",
    "AgentParseError",
    "Agents",
    "BackendError",
    "BackendResponseError",
    "BackendTimeoutError",
    "CompletionBackend",
    "EmptyOutputError",
    "MAPPING_FAILURE",
    "PlanValidationError",
    "PromptTemplate",
    "RemoteBackend",
    "ScriptedBackend",
    "ScriptedLookupError",
    "TemplateError",
    "context_digest",
    "load_templates",
    "parse_object_list",
    "parse_tool_choice",
]
