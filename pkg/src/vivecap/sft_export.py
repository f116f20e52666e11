"""Train/test splitting and finetuning-conversation export.

Targets are the alphabetized gold character list serialized as a JSON
array, so an external trainer sees a stable label per image. Training
itself is out of scope; this module only produces the hand-off files.
"""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass

from .core_model import Frame, GoldLabel, Roster
from .vlm_gateway import CharacterSheet, PromptBundle, build_detect_prompt

logger = logging.getLogger(__name__)


class TooFew(ValueError):
    pass


class UnparseableExport(ValueError):
    pass


class NonRosterChoice(ValueError):
    def __init__(self, name, task):
        super().__init__(f"annotation choice {name!r} in task {task!r} is not a roster name")
        self.name = name
        self.task = task


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass(frozen=True)
class SftExample:
    messages: PromptBundle
    target: str  # JSON array of names, ascending lexicographic


def split_dataset(ids: list[str], spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Seeded uniform shuffle, then a prefix split; the train size is
    round-half-up of train_fraction * n."""
    if len(ids) < 2:
        raise TooFew("need at least 2 ids to split")
    shuffled = list(ids)
    random.Random(spec.seed).shuffle(shuffled)
    n_train = int(spec.train_fraction * len(ids) + 0.5)
    return shuffled[:n_train], shuffled[n_train:]


def build_sft_example(
    frame: Frame, label: GoldLabel, sheet: CharacterSheet, roster: Roster
) -> SftExample:
    for name in label.characters:
        if name not in roster:
            raise NonRosterChoice(name, frame.id)
    bundle = build_detect_prompt(sheet, roster, frame)
    target = json.dumps(sorted(label.characters))
    return SftExample(messages=bundle, target=target)


def export_sft_jsonl(examples: list[SftExample], path) -> None:
    """One conversation per line; images stay path references so trainers
    can stream them."""
    if not examples:
        raise ValueError("nothing to export")
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"messages": list(ex.messages.messages), "target": ex.target}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def import_labelstudio(path, roster: Roster) -> dict[str, GoldLabel]:
    """Read a LabelStudio JSON export of choice annotations. The frame id
    is the image basename without extension; tasks lacking annotations
    are skipped with a warning."""
    with open(path, encoding="utf-8") as fh:
        try:
            tasks = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UnparseableExport(f"not valid JSON: {exc}") from exc
    if not isinstance(tasks, list):
        raise UnparseableExport("expected a top-level list of tasks")
    labels: dict[str, GoldLabel] = {}
    for task in tasks:
        try:
            image = task["data"]["image"]
            annotations = task.get("annotations", [])
        except (TypeError, KeyError) as exc:
            raise UnparseableExport(f"task missing data.image: {task!r}") from exc
        frame_id = os.path.splitext(os.path.basename(image))[0]
        if not annotations:
            logger.warning("task for %s has no annotations; skipped", frame_id)
            continue
        chosen: set[str] = set()
        for ann in annotations:
            for result in ann.get("result", []):
                if result.get("type") != "choices":
                    raise UnparseableExport(
                        f"unsupported annotation type {result.get('type')!r} in task {frame_id}"
                    )
                for choice in result.get("value", {}).get("choices", []):
                    canon = roster.canonical(choice)
                    if canon is None:
                        raise NonRosterChoice(choice, frame_id)
                    chosen.add(canon)
        labels[frame_id] = GoldLabel(frame_id=frame_id, characters=frozenset(chosen))
    return labels
