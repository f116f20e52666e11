"""Dataset data model, structured-caption parsing, and model-free checks."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

UNKNOWN_CHARACTER = "Unknown Character"

CAPTION_KEYS = ("scene", "background", "characters", "salient_objects")
ENTRY_FIELDS = ("description", "location", "expression", "pose")


class CaptionError(Exception):
    """Base for structured-caption parse failures."""

    def __init__(self, message, offset=0, raw=None):
        super().__init__(message)
        self.offset = offset
        self.raw = raw


class MalformedJson(CaptionError):
    pass


class MissingKey(CaptionError):
    def __init__(self, name, offset=0, raw=None):
        super().__init__(f"missing required key: {name!r}", offset, raw)
        self.name = name


class WrongShape(CaptionError):
    def __init__(self, path, detail="", offset=0, raw=None):
        msg = f"wrong shape at {path!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg, offset, raw)
        self.path = path


@dataclass(frozen=True)
class Roster:
    """Closed set of valid character names for a corpus."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValueError("roster must be non-empty")
        seen = set()
        for name in self.names:
            if not name.strip():
                raise ValueError("roster names must not be whitespace-only")
            folded = name.casefold()
            if folded in seen:
                raise ValueError(f"duplicate roster name (case-insensitive): {name!r}")
            seen.add(folded)

    def canonical(self, name: str) -> Optional[str]:
        """Return the roster-cased spelling of `name`, or None if absent."""
        folded = name.casefold()
        for member in self.names:
            if member.casefold() == folded:
                return member
        return None

    def __contains__(self, name: str) -> bool:
        return self.canonical(name) is not None


@dataclass(frozen=True)
class Frame:
    id: str
    image_path: str
    timestamp_s: Optional[float] = None

    def __post_init__(self):
        if not self.image_path:
            raise ValueError("image_path must be non-empty")


@dataclass(frozen=True)
class CharacterEntry:
    """Per-character description block. None marks a field absent from the
    source JSON (reported by validation); empty string is a legal value."""

    description: Optional[str] = None
    location: Optional[str] = None
    expression: Optional[str] = None
    pose: Optional[str] = None


@dataclass(frozen=True)
class StructuredCaption:
    scene: str
    background: str
    characters: dict[str, CharacterEntry] = field(default_factory=dict)
    salient_objects: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class CaptionedFrame:
    frame: Frame
    caption: StructuredCaption
    raw_model_output: Optional[str] = None


@dataclass(frozen=True)
class GoldLabel:
    frame_id: str
    characters: frozenset[str]


@dataclass
class DatasetManifest:
    frames: list[Frame]
    labels: dict[str, GoldLabel] = field(default_factory=dict)
    captions: dict[str, CaptionedFrame] = field(default_factory=dict)

    def __post_init__(self):
        ids = {f.id for f in self.frames}
        if len(ids) != len(self.frames):
            raise ValueError("frame ids must be unique within a manifest")
        for key in list(self.labels) + list(self.captions):
            if key not in ids:
                raise ValueError(f"key {key!r} does not resolve to a frame id")


@dataclass(frozen=True)
class UniversalCheckConfig:
    max_caption_tokens: int = 1024
    tokenization_rule: str = "whitespace"  # or "bytes"

    def __post_init__(self):
        if self.max_caption_tokens < 1:
            raise ValueError("max_caption_tokens must be >= 1")
        if self.tokenization_rule not in ("whitespace", "bytes"):
            raise ValueError(f"unknown tokenization_rule: {self.tokenization_rule!r}")


@dataclass(frozen=True)
class Violation:
    kind: str  # unknown_character | missing_field | duplicate_name
    subject: str
    detail: str = ""


_FENCE_RE = re.compile(r"^\s*```[a-zA-Z0-9_-]*\s*\n?(.*?)\n?\s*```\s*$", re.DOTALL)


def strip_code_fences(raw: str) -> str:
    """Remove a single markdown code fence wrapping the whole string."""
    m = _FENCE_RE.match(raw)
    return m.group(1) if m else raw


def _caption_to_obj(c: StructuredCaption) -> dict:
    chars = {}
    for name in c.characters:
        entry = c.characters[name]
        chars[name] = {
            f: getattr(entry, f)
            for f in ENTRY_FIELDS
            if getattr(entry, f) is not None
        }
    return {
        "scene": c.scene,
        "background": c.background,
        "characters": chars,
        "salient_objects": dict(c.salient_objects),
    }


def serialize_caption(c: StructuredCaption) -> str:
    """Canonical JSON rendering; stable across runs, round-trips via parse."""
    return json.dumps(_caption_to_obj(c), ensure_ascii=False, indent=2)


def parse_structured_caption(raw: str) -> StructuredCaption:
    text = strip_code_fences(raw)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc.msg}", offset=exc.pos, raw=raw) from exc
    if not isinstance(obj, dict):
        raise WrongShape("$", "top level is not a JSON object", raw=raw)
    for key in obj:
        if key not in CAPTION_KEYS:
            raise WrongShape(key, "unexpected top-level key", raw=raw)
    for key in CAPTION_KEYS:
        if key not in obj:
            raise MissingKey(key, raw=raw)
    scene, background = obj["scene"], obj["background"]
    if not isinstance(scene, str):
        raise WrongShape("scene", "expected string", raw=raw)
    if not isinstance(background, str):
        raise WrongShape("background", "expected string", raw=raw)

    characters = _parse_character_map(obj["characters"], raw)
    salient = _parse_object_map(obj["salient_objects"], raw)
    return StructuredCaption(
        scene=scene, background=background, characters=characters, salient_objects=salient
    )


def _parse_character_map(value, raw) -> dict[str, CharacterEntry]:
    # The captioning prompt sanctions an empty string when nothing is present.
    if value == "":
        return {}
    if not isinstance(value, dict):
        raise WrongShape("characters", "expected object or empty string", raw=raw)
    out = {}
    for name, entry in value.items():
        if not isinstance(entry, dict):
            raise WrongShape(f"characters.{name}", "expected object", raw=raw)
        for f in entry:
            if f not in ENTRY_FIELDS:
                raise WrongShape(f"characters.{name}.{f}", "unexpected field", raw=raw)
            if not isinstance(entry[f], str):
                raise WrongShape(f"characters.{name}.{f}", "expected string", raw=raw)
        out[name] = CharacterEntry(**{f: entry.get(f) for f in ENTRY_FIELDS})
    return out


def _parse_object_map(value, raw) -> dict[str, str]:
    if value == "":
        return {}
    if not isinstance(value, dict):
        raise WrongShape("salient_objects", "expected object or empty string", raw=raw)
    out = {}
    for name, desc in value.items():
        if not isinstance(desc, str):
            raise WrongShape(f"salient_objects.{name}", "expected string", raw=raw)
        out[name] = desc
    return out


def validate_structured_caption(c: StructuredCaption, roster: Roster) -> list[Violation]:
    """Structured-output adherence check. Empty report <=> adherent."""
    report = []
    seen_folded: dict[str, str] = {}
    for name, entry in c.characters.items():
        folded = name.casefold()
        if folded in seen_folded:
            report.append(
                Violation("duplicate_name", name, f"collides with {seen_folded[folded]!r}")
            )
        else:
            seen_folded[folded] = name
        if name != UNKNOWN_CHARACTER and name not in roster:
            report.append(Violation("unknown_character", name))
        for f in ENTRY_FIELDS:
            if getattr(entry, f) is None:
                report.append(Violation("missing_field", name, f))
    return report


def caption_token_count(
    c: StructuredCaption, cfg: UniversalCheckConfig = UniversalCheckConfig()
) -> tuple[int, bool]:
    """Token count of the serialized caption plus the too-long flag
    (inclusive at the configured maximum)."""
    text = serialize_caption(c)
    if cfg.tokenization_rule == "whitespace":
        count = len(text.split())
    else:
        count = len(text.encode("utf-8"))
    return count, count >= cfg.max_caption_tokens


def collapse_to_dense(c: StructuredCaption) -> str:
    """Deterministic single-paragraph rendering of a structured caption."""
    parts = []
    if c.scene.strip():
        parts.append(c.scene.strip())
    if c.background.strip():
        parts.append(c.background.strip())
    for name in sorted(c.characters):
        entry = c.characters[name]
        bits = [name + ":"]
        if entry.description:
            bits.append(entry.description.strip())
        details = []
        if entry.location:
            details.append(f"location: {entry.location.strip()}")
        if entry.expression:
            details.append(f"expression: {entry.expression.strip()}")
        if entry.pose:
            details.append(f"pose: {entry.pose.strip()}")
        if details:
            bits.append("(" + "; ".join(details) + ")")
        parts.append(" ".join(bits))
    for name in sorted(c.salient_objects):
        desc = c.salient_objects[name].strip()
        parts.append(f"{name}: {desc}" if desc else f"{name}:")
    return " ".join(parts).strip()


def extract_characters(c: StructuredCaption, roster: Optional[Roster] = None) -> frozenset[str]:
    """Character names a caption claims. 'Unknown Character' is an
    uncertainty marker, not an identity claim, and is excluded. With a
    roster, names normalize to roster casing and non-members drop out."""
    names = set()
    for name in c.characters:
        if name == UNKNOWN_CHARACTER:
            continue
        if roster is None:
            names.add(name)
        else:
            canon = roster.canonical(name)
            if canon is not None:
                names.add(canon)
    return frozenset(names)


# --- JSONL file interfaces -------------------------------------------------

def load_frames_jsonl(path) -> list[Frame]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            frames.append(
                Frame(id=rec["id"], image_path=rec["image_path"], timestamp_s=rec.get("timestamp_s"))
            )
    return frames


def load_labels_jsonl(path) -> dict[str, GoldLabel]:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            labels[rec["frame_id"]] = GoldLabel(
                frame_id=rec["frame_id"], characters=frozenset(rec["characters"])
            )
    return labels


def load_captions_jsonl(path, frames_by_id: dict[str, Frame]) -> dict[str, CaptionedFrame]:
    captions = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            caption = parse_structured_caption(json.dumps(rec["caption"]))
            captions[rec["frame_id"]] = CaptionedFrame(
                frame=frames_by_id[rec["frame_id"]],
                caption=caption,
                raw_model_output=rec.get("raw"),
            )
    return captions
