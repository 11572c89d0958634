"""Word-for-word lexicon translation.

A deliberately tiny translator used to exercise the multi-task plugin
registry end to end: each space-separated token is replaced by its
lexicon entry (case-sensitive) and everything else passes through.
Fine-tuning merges word pairs into the lexicon, later pairs winning.
"""

from __future__ import annotations

import json
from typing import Any, Optional

from annolab.model import (
    ExecutionMode,
    InputKind,
    OutputKind,
    PluginManifest,
    TaskKind,
    TaskSpec,
)
from annolab.plugins import CancelProbe, LogFn, PluginInputError, TaskCancelled
from annolab.plugins.postcorrect import parse_text_pairs

PLUGIN_ID = "stub-translate"
TRANSLATE_TASK = "translate"
TRAIN_TASK = "train"

ARTIFACT_FORMAT = "word-lexicon"


def translate_line(line: str, lexicon: dict[str, str]) -> str:
    return " ".join(lexicon.get(token, token) for token in line.split(" "))


def translate_text(text: str, lexicon: dict[str, str]) -> str:
    return "\n".join(translate_line(line, lexicon) for line in text.split("\n"))


def lexicon_from_pairs(pairs: list[tuple[str, str]]) -> dict[str, str]:
    """Build/merge a lexicon; later pairs overwrite earlier ones."""
    return {source: target for source, target in pairs}


def lexicon_to_doc(lexicon: dict[str, str]) -> dict[str, Any]:
    return {"format": ARTIFACT_FORMAT, "format_version": 1, "lexicon": dict(lexicon)}


def lexicon_from_doc(doc: Any) -> dict[str, str]:
    if not isinstance(doc, dict) or doc.get("format") != ARTIFACT_FORMAT:
        raise PluginInputError("not a word lexicon document")
    lexicon = doc.get("lexicon")
    if not isinstance(lexicon, dict):
        raise PluginInputError("lexicon document has no lexicon map")
    return {str(k): str(v) for k, v in lexicon.items()}


MANIFEST = PluginManifest(
    plugin_id=PLUGIN_ID,
    version="1.0.0",
    execution=ExecutionMode.IN_PROCESS,
    tasks=(
        TaskSpec(
            task_name=TRANSLATE_TASK,
            kind=TaskKind.PREDICT,
            input_kind=InputKind.TEXT_LINES,
            output_kind=OutputKind.TEXT_LINES,
            queue_class="cpu-light",
            supports_finetune=True,
            languages=("*",),
        ),
        TaskSpec(
            task_name=TRAIN_TASK,
            kind=TaskKind.TRAIN,
            input_kind=InputKind.TEXT_PAIRS,
            output_kind=OutputKind.MODEL_ARTIFACT,
            queue_class="cpu-light",
            supports_finetune=False,
            languages=("*",),
        ),
    ),
)


def execute(
    task_name: str,
    artifact_doc: Optional[dict],
    input_bytes: bytes,
    params: dict[str, Any],
    log: LogFn,
    should_cancel: CancelProbe,
) -> bytes:
    try:
        text = input_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PluginInputError(f"input is not valid UTF-8: {exc}") from exc

    if task_name == TRAIN_TASK:
        pairs = parse_text_pairs(text)
        if should_cancel():
            raise TaskCancelled()
        lexicon = lexicon_from_pairs(pairs)
        if artifact_doc is not None:
            merged = lexicon_from_doc(artifact_doc)
            merged.update(lexicon)
            lexicon = merged
        log(f"lexicon has {len(lexicon)} entries from {len(pairs)} pair(s)\n")
        return json.dumps(lexicon_to_doc(lexicon)).encode("utf-8")

    if task_name != TRANSLATE_TASK:
        raise PluginInputError(f"unknown task {task_name!r}")

    lexicon = {} if artifact_doc is None else lexicon_from_doc(artifact_doc)
    lines = text.split("\n")
    out = []
    for line in lines:
        if should_cancel():
            raise TaskCancelled()
        out.append(translate_line(line, lexicon))
    log(f"translated {len(lines)} line(s) with {len(lexicon)} lexicon entries\n")
    return "\n".join(out).encode("utf-8")
