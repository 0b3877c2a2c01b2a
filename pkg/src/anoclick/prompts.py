"""Defect-description corpus handling and prompt templating.

The corpus file is JSON: an object keyed by object name, each value an
object keyed by defect name with an array of description phrases. The
defect key "*" declares a fallback entry for defects without their own
phrases; the object key "*" declares a global fallback.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

FALLBACK = "*"


class CorpusSchemaError(Exception):
    """Corpus file violates the schema; the message names the key path."""


def render_prompt_template(obj: str, defect: str, count: int) -> str:
    """Instruction used to collect description phrase variants."""
    if not obj or not defect:
        raise ValueError("object and defect names must be non-empty")
    return f"Give {count} phrases describing the {defect} defect on a {obj}."


@dataclass
class PromptCorpus:
    entries: dict[tuple[str, str], list[str]]

    def __post_init__(self):
        for key, phrases in self.entries.items():
            if not phrases:
                raise CorpusSchemaError(f"empty phrase list at {key[0]}.{key[1]}")

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def resolve_key(self, obj: str, defect: str) -> tuple[str, str]:
        """Exact entry, else per-object fallback, else global fallback."""
        for key in ((obj, defect), (obj, FALLBACK), (FALLBACK, FALLBACK)):
            if key in self.entries:
                return key
        raise KeyError(f"no corpus entry for ({obj}, {defect}) and no fallback")

    def phrases(self, obj: str, defect: str) -> list[str]:
        return self.entries[self.resolve_key(obj, defect)]

    def covers(self, defect_types, obj: str) -> bool:
        try:
            for d in defect_types:
                if d != "good":
                    self.resolve_key(obj, d)
        except KeyError:
            return False
        return True

    def phrase_counts(self) -> dict[tuple[str, str], int]:
        return {k: len(v) for k, v in self.entries.items()}

    def to_json(self) -> str:
        nested: dict[str, dict[str, list[str]]] = {}
        for (obj, defect), phrases in self.entries.items():
            nested.setdefault(obj, {})[defect] = phrases
        return json.dumps(nested, indent=2)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise CorpusSchemaError(f"duplicate key: {key}")
        seen[key] = value
    return seen


def load_prompt_corpus(path) -> PromptCorpus:
    path = Path(path)
    if not path.is_file():
        raise CorpusSchemaError(f"corpus file does not exist: {path}")
    try:
        raw = json.loads(path.read_text(), object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise CorpusSchemaError(f"corpus is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise CorpusSchemaError("top level must be an object keyed by object name")
    entries: dict[tuple[str, str], list[str]] = {}
    for obj, defects in raw.items():
        if not isinstance(defects, dict):
            raise CorpusSchemaError(f"{obj}: value must be an object keyed by defect")
        for defect, phrases in defects.items():
            if not isinstance(phrases, list) or not all(isinstance(p, str) for p in phrases):
                raise CorpusSchemaError(f"{obj}.{defect}: phrases must be a string array")
            if not phrases:
                raise CorpusSchemaError(f"{obj}.{defect}: empty phrase list")
            entries[(obj, defect)] = phrases
    if not entries:
        raise CorpusSchemaError("corpus has no entries")
    return PromptCorpus(entries)


def save_prompt_corpus(corpus: PromptCorpus, path) -> None:
    Path(path).write_text(corpus.to_json())
