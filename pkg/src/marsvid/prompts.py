"""Versioned prompt templates.

Templates are plain text files with ``{name}`` placeholders. Only the names in
:data:`PLACEHOLDERS` may appear; JSON braces in format examples are left alone
because they never match the ``{identifier}`` pattern.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

PLACEHOLDERS = frozenset({
    "transcript", "obj", "hate_report", "nonhate_report",
    "modality", "frames_analysis", "transcript_analysis",
})

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    system: str
    objective: str
    hate_hypothesis: str
    nonhate_hypothesis: str
    meta_synthesis: str
    neutral_analysis: str
    simple: str
    cot_modality: str
    cot_integrate: str
    cot_single: str

    def __post_init__(self) -> None:
        for f in fields(self):
            unknown = set(_PLACEHOLDER.findall(getattr(self, f.name))) - PLACEHOLDERS
            if unknown:
                raise PromptError(f"template {f.name!r} uses undeclared placeholders {sorted(unknown)}")

    @property
    def version_hash(self) -> str:
        digest = hashlib.sha256()
        for f in fields(self):
            digest.update(f.name.encode())
            digest.update(b"\0")
            digest.update(getattr(self, f.name).encode())
            digest.update(b"\0")
        return digest.hexdigest()[:16]

    def render(self, name: str, **values: str) -> str:
        template = getattr(self, name)

        def substitute(match: re.Match) -> str:
            key = match.group(1)
            if key not in values:
                raise PromptError(f"template {name!r} needs a value for {{{key}}}")
            return values[key]

        return _PLACEHOLDER.sub(substitute, template)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptSet":
        """Load templates from ``directory`` (defaults to the bundled set)."""
        texts = {}
        for f in fields(cls):
            filename = f"{f.name}.txt"
            if directory is None:
                text = resources.files("marsvid").joinpath("prompts", filename).read_text(encoding="utf-8")
            else:
                path = Path(directory) / filename
                if not path.is_file():
                    raise PromptError(f"missing template file {path}")
                text = path.read_text(encoding="utf-8")
            texts[f.name] = text.strip()
        return cls(**texts)


def default_prompts() -> PromptSet:
    return PromptSet.load()
