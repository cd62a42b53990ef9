"""Prompt templates shipped as editable text files."""

from __future__ import annotations

import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from .backends import ROLES


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise TemplateError(f"unknown role {self.role!r}")
        try:
            self.placeholders
        except ValueError as exc:
            raise TemplateError(f"malformed template for {self.role!r}: {exc}") from exc

    @property
    def placeholders(self) -> frozenset:
        return frozenset(f for _, f, _, _ in string.Formatter().parse(self.text) if f)

    def render(self, **values) -> str:
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"unbound placeholders in {self.role!r}: {sorted(missing)}")
        return self.text.format(**{k: values[k] for k in self.placeholders})


def load_templates(directory: Optional[Path] = None) -> dict:
    """``role -> PromptTemplate`` from ``<role>.txt`` files; defaults to the packaged set."""
    out = {}
    for role in ROLES:
        if directory is None:
            text = resources.files("tabletop.agents").joinpath("prompts", f"{role}.txt").read_text("utf-8")
        else:
            path = Path(directory) / f"{role}.txt"
            if not path.is_file():
                raise TemplateError(f"missing template file {path}")
            text = path.read_text("utf-8")
        out[role] = PromptTemplate(role, text)
    return out
