"""Prompt template catalog.

Seven stage templates ship with the package; a manifest can override any
of them with a file path.  Placeholders are literal brace tokens
({chart code}, {generated_python_code}, {generated_question},
{question}) substituted by plain replacement, never str.format, since
template bodies contain unrelated braces.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import InvalidInputError

PROMPT_NAMES = (
    "rollout",
    "codegen",
    "coder_system",
    "qa_script",
    "qa_question",
    "qa_consistency",
    "cot_distill",
)


class PromptCatalog:
    def __init__(self, overrides: dict[str, str | Path] | None = None):
        self._overrides = {k: Path(v) for k, v in (overrides or {}).items()}
        for name in self._overrides:
            if name not in PROMPT_NAMES:
                raise InvalidInputError(f"unknown prompt override {name!r}")
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name not in PROMPT_NAMES:
            raise InvalidInputError(f"unknown prompt {name!r}")
        if name not in self._cache:
            if name in self._overrides:
                text = self._overrides[name].read_text(encoding="utf-8")
            else:
                text = (resources.files("chartforge") / "prompts" / f"{name}.txt").read_text(
                    encoding="utf-8"
                )
            self._cache[name] = text
        return self._cache[name]

    def render(self, name: str, substitutions: dict[str, str] | None = None) -> str:
        text = self.get(name)
        for key, value in (substitutions or {}).items():
            token = "{" + key + "}"
            if token not in text:
                raise InvalidInputError(f"prompt {name!r} has no {token} placeholder")
            text = text.replace(token, value)
        return text
