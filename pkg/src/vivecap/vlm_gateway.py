"""Prompt construction and chat-completions orchestration.

All three prompt families (detector, captioner, judge) interleave
reference character images with text; bundles carry image parts by path
and only inline base64 at request time. Batch runners bound in-flight
requests and never let one bad frame abort the batch.
"""

from __future__ import annotations

import base64
import json
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import requests

from .core_model import (
    CaptionedFrame,
    Frame,
    MalformedJson,
    Roster,
    StructuredCaption,
    parse_structured_caption,
    serialize_caption,
    strip_code_fences,
)

SCORE_FIELDS = ("scene_score", "background_score", "characters_score", "salient_objects_score")


class GatewayError(Exception):
    pass


class MissingImage(GatewayError):
    def __init__(self, path):
        super().__init__(f"image file not found: {path}")
        self.path = path


class TransportError(GatewayError):
    pass


class RequestTimeout(TransportError):
    pass


class HttpStatusError(GatewayError):
    def __init__(self, code, body):
        super().__init__(f"HTTP {code}: {body[:200]}")
        self.code = code
        self.body = body


class RetriesExhausted(GatewayError):
    def __init__(self, last_error):
        super().__init__(f"retries exhausted; last error: {last_error}")
        self.last_error = last_error


class NoListFound(GatewayError):
    def __init__(self, raw):
        super().__init__("no JSON list of strings found in model output")
        self.raw = raw


class MissingField(GatewayError):
    def __init__(self, name):
        super().__init__(f"scorecard missing field: {name!r}")
        self.name = name


class OutOfRange(GatewayError):
    def __init__(self, fname, value):
        super().__init__(f"score {fname} out of [1, 10]: {value}")
        self.field = fname
        self.value = value


class BatchEmpty(GatewayError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 2048
    timeout_s: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base_s: float = 1.0

    def __post_init__(self):
        if not self.base_url.startswith(("http://", "https://")):
            raise ValueError(f"base_url not a URL: {self.base_url!r}")
        if self.max_retries > 10:
            raise ValueError("max_retries must be <= 10")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be positive")


@dataclass(frozen=True)
class SheetEntry:
    name: str
    image_path: str
    description: str = ""


@dataclass(frozen=True)
class CharacterSheet:
    entries: tuple[SheetEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("character sheet names must be unique")

    def subset(self, names) -> "CharacterSheet":
        wanted = set(names)
        return CharacterSheet(tuple(e for e in self.entries if e.name in wanted))


def _text(s: str) -> dict:
    return {"type": "text", "text": s}


def _image(path: str) -> dict:
    return {"type": "image", "path": path}


@dataclass(frozen=True)
class PromptBundle:
    messages: tuple[dict, ...]  # each: {"role": ..., "parts": [...]}
    kind: str  # detect | caption | judge

    def serialize(self) -> str:
        return json.dumps({"kind": self.kind, "messages": list(self.messages)}, ensure_ascii=False)

    def image_paths(self) -> list[str]:
        return [
            part["path"]
            for msg in self.messages
            for part in msg["parts"]
            if part["type"] == "image"
        ]


def _template(name: str) -> str:
    return resources.files("vivecap.prompts").joinpath(name).read_text(encoding="utf-8")


def _check_images(paths) -> None:
    for p in paths:
        if not os.path.isfile(p):
            raise MissingImage(p)


def _context_parts(sheet: CharacterSheet) -> list[dict]:
    parts = []
    for entry in sheet.entries:
        parts.append(_image(entry.image_path))
        text = entry.name if not entry.description else f"{entry.name}: {entry.description}"
        parts.append(_text(text))
    return parts


def build_detect_prompt(sheet: CharacterSheet, roster: Roster, target: Frame) -> PromptBundle:
    if not sheet.entries:
        raise ValueError("character sheet must be non-empty for detection")
    _check_images([e.image_path for e in sheet.entries] + [target.image_path])
    roster_literal = json.dumps(list(roster.names))
    user_text = _template("detect_user.txt").replace("{{ROSTER}}", roster_literal)
    messages = (
        {"role": "system", "parts": [_text(_template("detect_system.txt").strip())]},
        {
            "role": "user",
            "parts": [_text("===POTENTIAL CHARACTERS HERE===")]
            + _context_parts(sheet)
            + [_text("===POTENTIAL CHARACTERS HERE===")],
        },
        {
            "role": "user",
            "parts": [
                _text("===TARGET IMAGE HERE==="),
                _image(target.image_path),
                _text("===TARGET IMAGE HERE==="),
            ],
        },
        {"role": "user", "parts": [_text(user_text.strip())]},
    )
    return PromptBundle(messages=messages, kind="detect")


def _filled_template_parts(template: str, target: Frame, context: CharacterSheet,
                           candidate_text: Optional[str] = None) -> list[dict]:
    """Expand a user template into interleaved text/image parts."""
    if candidate_text is not None:
        template = template.replace("{{CANDIDATE_CAPTION}}", candidate_text)
    parts: list[dict] = []
    buf = template
    while True:
        positions = [(buf.find(tok), tok) for tok in ("{{CHARACTER_CONTEXT}}", "{{TARGET_IMAGE}}")]
        positions = [(i, tok) for i, tok in positions if i >= 0]
        if not positions:
            break
        i, tok = min(positions)
        before, buf = buf[:i], buf[i + len(tok):]
        if before.strip("\n"):
            parts.append(_text(before.strip("\n")))
        if tok == "{{CHARACTER_CONTEXT}}":
            parts.extend(_context_parts(context))
        else:
            parts.append(_image(target.image_path))
    if buf.strip("\n"):
        parts.append(_text(buf.strip("\n")))
    return parts


def build_caption_prompt(sheet_subset: CharacterSheet, target: Frame) -> PromptBundle:
    _check_images([e.image_path for e in sheet_subset.entries] + [target.image_path])
    parts = _filled_template_parts(_template("caption_user.txt"), target, sheet_subset)
    messages = (
        {"role": "system", "parts": [_text(_template("caption_system.txt").strip())]},
        {"role": "user", "parts": parts},
    )
    return PromptBundle(messages=messages, kind="caption")


def build_judge_prompt(sheet: CharacterSheet, target: Frame, candidate: StructuredCaption) -> PromptBundle:
    _check_images([e.image_path for e in sheet.entries] + [target.image_path])
    parts = _filled_template_parts(
        _template("judge_user.txt"), target, sheet, candidate_text=serialize_caption(candidate)
    )
    messages = (
        {"role": "system", "parts": [_text(_template("judge_system.txt").strip())]},
        {"role": "user", "parts": parts},
    )
    return PromptBundle(messages=messages, kind="judge")


# --- transport -------------------------------------------------------------

_MIME = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp"}


def _wire_part(part: dict) -> dict:
    if part["type"] == "text":
        return {"type": "text", "text": part["text"]}
    path = part["path"]
    mime = _MIME.get(os.path.splitext(path)[1].lower(), "image/png")
    with open(path, "rb") as fh:
        b64 = base64.b64encode(fh.read()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{b64}"}}


class VlmClient:
    """Thin chat-completions client with retry/backoff and an append-only
    request log (for auditing which images each request embedded)."""

    def __init__(self, session: Optional[requests.Session] = None):
        self._session = session or requests.Session()
        self.request_log: list[dict] = []

    def complete(self, cfg: EndpointConfig, bundle: PromptBundle) -> str:
        body = {
            "model": cfg.model_name,
            "messages": [
                {"role": m["role"], "content": [_wire_part(p) for p in m["parts"]]}
                for m in bundle.messages
            ],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env:
            key = os.environ.get(cfg.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        self.request_log.append(
            {"model": cfg.model_name, "kind": bundle.kind, "image_paths": bundle.image_paths()}
        )
        last_error: Exception = TransportError("no attempt made")
        for attempt in range(cfg.max_retries + 1):
            if attempt > 0:
                delay = cfg.backoff_base_s * (2 ** (attempt - 1))
                time.sleep(delay + random.uniform(0.0, delay * 0.1))
            try:
                resp = self._session.post(
                    cfg.base_url, json=body, headers=headers, timeout=cfg.timeout_s
                )
            except requests.Timeout as exc:
                last_error = RequestTimeout(str(exc))
                continue
            except requests.RequestException as exc:
                last_error = TransportError(str(exc))
                continue
            if resp.status_code == 200:
                payload = resp.json()
                return payload["choices"][0]["message"]["content"]
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = HttpStatusError(resp.status_code, resp.text)
                continue
            raise HttpStatusError(resp.status_code, resp.text)
        raise RetriesExhausted(last_error)


_DEFAULT_CLIENT = VlmClient()


def complete(cfg: EndpointConfig, bundle: PromptBundle, client: Optional[VlmClient] = None) -> str:
    return (client or _DEFAULT_CLIENT).complete(cfg, bundle)


# --- output parsing --------------------------------------------------------

@dataclass(frozen=True)
class ParsedDetection:
    names: frozenset[str]
    dropped: tuple[str, ...] = ()


def parse_detection(raw: str, roster: Roster) -> ParsedDetection:
    """Locate the first JSON array of strings in the output (tolerating
    fences and surrounding prose), normalize names to roster casing, and
    drop anything outside the roster."""
    text = strip_code_fences(raw)
    decoder = json.JSONDecoder()
    start = 0
    found = None
    while True:
        idx = text.find("[", start)
        if idx < 0:
            break
        try:
            value, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            start = idx + 1
            continue
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            found = value
            break
        start = idx + 1
    if found is None:
        raise NoListFound(raw)
    names, dropped = set(), []
    for name in found:
        canon = roster.canonical(name)
        if canon is None:
            dropped.append(name)
        else:
            names.add(canon)
    return ParsedDetection(names=frozenset(names), dropped=tuple(dropped))


@dataclass(frozen=True)
class Scorecard:
    scene: int
    background: int
    characters: int
    salient_objects: int
    rationale: str = ""

    @property
    def overall(self) -> float:
        return (self.scene + self.background + self.characters + self.salient_objects) / 4.0

    def as_dict(self) -> dict:
        return {
            "scene": self.scene,
            "background": self.background,
            "characters": self.characters,
            "salient_objects": self.salient_objects,
            "overall": self.overall,
            "rationale": self.rationale,
        }


def parse_scorecard(raw: str) -> Scorecard:
    text = strip_code_fences(raw)
    idx = text.find("{")
    if idx < 0:
        raise MalformedJson("no JSON object in judge output", raw=raw)
    try:
        obj, _ = json.JSONDecoder().raw_decode(text[idx:])
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc.msg}", offset=exc.pos, raw=raw) from exc
    if not isinstance(obj, dict):
        raise MalformedJson("judge output is not an object", raw=raw)
    scores = {}
    for fname in SCORE_FIELDS:
        if fname not in obj:
            raise MissingField(fname)
        value = obj[fname]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise MalformedJson(f"{fname} is not an integer: {value!r}", raw=raw)
        value = int(value)
        if not (1 <= value <= 10):
            raise OutOfRange(fname, value)
        scores[fname] = value
    if "rationale" not in obj:
        raise MissingField("rationale")
    return Scorecard(
        scene=scores["scene_score"],
        background=scores["background_score"],
        characters=scores["characters_score"],
        salient_objects=scores["salient_objects_score"],
        rationale=str(obj["rationale"]),
    )


# --- batch orchestration ---------------------------------------------------

@dataclass
class PipelineResult:
    frame: Frame
    ok: bool
    detected: Optional[frozenset[str]] = None
    captioned: Optional[CaptionedFrame] = None
    stage: Optional[str] = None
    error: Optional[str] = None
    raw: Optional[str] = None

    def error_record(self) -> dict:
        rec = {"frame_id": self.frame.id, "stage": self.stage, "error": self.error}
        if self.raw is not None:
            rec["raw"] = self.raw
        return rec


def run_two_stage(
    detector_cfg: EndpointConfig,
    captioner_cfg: EndpointConfig,
    sheet: CharacterSheet,
    roster: Roster,
    frames: list[Frame],
    client: Optional[VlmClient] = None,
) -> list[PipelineResult]:
    """Detect characters, then caption with only the detected subset as
    context. Per-frame failures become error records, never batch aborts."""
    if not frames:
        raise BatchEmpty("no frames to process")
    vlm = client or _DEFAULT_CLIENT

    def one(frame: Frame) -> PipelineResult:
        raw_det = None
        try:
            raw_det = vlm.complete(detector_cfg, build_detect_prompt(sheet, roster, frame))
            detection = parse_detection(raw_det, roster)
        except Exception as exc:
            return PipelineResult(frame=frame, ok=False, stage="detect", error=str(exc), raw=raw_det)
        raw_cap = None
        try:
            subset = sheet.subset(detection.names)
            raw_cap = vlm.complete(captioner_cfg, build_caption_prompt(subset, frame))
            caption = parse_structured_caption(raw_cap)
        except Exception as exc:
            return PipelineResult(
                frame=frame, ok=False, detected=detection.names,
                stage="caption", error=str(exc), raw=raw_cap,
            )
        return PipelineResult(
            frame=frame,
            ok=True,
            detected=detection.names,
            captioned=CaptionedFrame(frame=frame, caption=caption, raw_model_output=raw_cap),
        )

    workers = max(1, min(detector_cfg.max_in_flight, captioner_cfg.max_in_flight))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, frames))


@dataclass
class JudgeResult:
    frame: Frame
    ok: bool
    scorecard: Optional[Scorecard] = None
    error: Optional[str] = None
    raw: Optional[str] = None

    def error_record(self) -> dict:
        rec = {"frame_id": self.frame.id, "stage": "judge", "error": self.error}
        if self.raw is not None:
            rec["raw"] = self.raw
        return rec


def run_judge(
    judge_cfg: EndpointConfig,
    sheet: CharacterSheet,
    pairs: list[tuple[Frame, StructuredCaption]],
    client: Optional[VlmClient] = None,
) -> list[JudgeResult]:
    if not pairs:
        raise BatchEmpty("no pairs to judge")
    vlm = client or _DEFAULT_CLIENT

    def one(pair: tuple[Frame, StructuredCaption]) -> JudgeResult:
        frame, caption = pair
        raw = None
        try:
            raw = vlm.complete(judge_cfg, build_judge_prompt(sheet, frame, caption))
            return JudgeResult(frame=frame, ok=True, scorecard=parse_scorecard(raw), raw=raw)
        except Exception as exc:
            return JudgeResult(frame=frame, ok=False, error=str(exc), raw=raw)

    with ThreadPoolExecutor(max_workers=judge_cfg.max_in_flight) as pool:
        return list(pool.map(one, pairs))
