import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from vivecap.core_model import Frame, Roster
from vivecap.vlm_gateway import CharacterSheet, SheetEntry

ROSTER_NAMES = ("Ellie", "Jay", "Phil", "Rex", "Victoria", "Sprite", "Elder_Sprite")

FIG_CAPTION_RAW = """{
    "scene": "The image shows a character named Victoria in a dark, forest-like setting. She appears to be looking forward with a concerned expression.",
    "background": "The background is dark and shadowy, with hints of foliage, suggesting a nighttime forest or cave setting.",
    "characters": {
        "Victoria": {
            "description": "Victoria has dark hair, large expressive eyes, and is wearing a blue shirt with a red scarf and purple earrings.",
            "location": "Center of the image",
            "expression": "Concerned",
            "pose": "Standing and looking forward"
        }
    },
    "salient_objects": {}
}"""


@pytest.fixture
def roster():
    return Roster(ROSTER_NAMES)


@pytest.fixture
def sheet(tmp_path, roster):
    entries = []
    for name in roster.names:
        path = tmp_path / f"ref_{name}.png"
        path.write_bytes(b"PNGDATA:" + name.encode())
        entries.append(SheetEntry(name=name, image_path=str(path), description=f"{name} reference"))
    return CharacterSheet(tuple(entries))


def make_frames(tmp_path, n, prefix="frame"):
    """Frames whose image bytes embed the frame id, so a mock endpoint can
    tell which frame a request targets."""
    frames = []
    for i in range(n):
        fid = f"{prefix}_{i:04d}"
        path = tmp_path / f"{fid}.png"
        path.write_bytes(b"IMG:" + fid.encode())
        frames.append(Frame(id=fid, image_path=str(path)))
    return frames


@pytest.fixture
def frames(tmp_path):
    return make_frames(tmp_path, 3)


def decode_images(body: dict) -> list[bytes]:
    out = []
    for message in body["messages"]:
        for part in message["content"]:
            if part.get("type") == "image_url":
                url = part["image_url"]["url"]
                out.append(base64.b64decode(url.split(",", 1)[1]))
    return out


def frame_id_of(body: dict) -> str:
    """Frame id embedded in the last image of the request."""
    images = decode_images(body)
    assert images, "request carries no images"
    last = images[-1]
    assert last.startswith(b"IMG:"), last[:20]
    return last[4:].decode()


class MockVlmServer:
    """Scriptable chat-completions endpoint. The responder is called with
    (body, attempt) where attempt counts deliveries of an identical body,
    and returns ("ok", content) or ("status", http_code)."""

    def __init__(self, responder):
        self.responder = responder
        self.requests = []
        self._attempts = {}
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                key = json.dumps(body, sort_keys=True)
                with outer._lock:
                    outer._attempts[key] = outer._attempts.get(key, 0) + 1
                    attempt = outer._attempts[key]
                    outer.requests.append(body)
                kind, value = outer.responder(body, attempt)
                if kind == "ok":
                    payload = json.dumps(
                        {"choices": [{"message": {"content": value}}]}
                    ).encode()
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                else:
                    self.send_response(value)
                    self.send_header("Content-Length", "0")
                    self.end_headers()

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    @property
    def url(self):
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def reset(self):
        with self._lock:
            self._attempts.clear()
            self.requests.clear()

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


def make_endpoint(url, **overrides):
    from vivecap.vlm_gateway import EndpointConfig

    defaults = dict(
        base_url=url,
        model_name="mock-model",
        timeout_s=10.0,
        max_retries=3,
        backoff_base_s=0.01,
    )
    defaults.update(overrides)
    return EndpointConfig(**defaults)


# --- full-pipeline workspace ------------------------------------------------

def body_kind(body: dict) -> str:
    """Classify a chat request by its system message."""
    text = body["messages"][0]["content"][0]["text"]
    if "character detection" in text:
        return "detect"
    if "structured way" in text:
        return "caption"
    return "judge"


def all_text(body: dict) -> str:
    return "\n".join(
        part["text"]
        for message in body["messages"]
        for part in message["content"]
        if part.get("type") == "text"
    )


def characters_for(index: int) -> list[str]:
    return [ROSTER_NAMES[index % len(ROSTER_NAMES)]]


def caption_payload(fid: str, names: list[str]) -> str:
    return json.dumps({
        "scene": f"Scene of {fid}.",
        "background": "A moonlit forest clearing.",
        "characters": {
            name: {
                "description": f"{name} in frame {fid}",
                "location": "center",
                "expression": "calm",
                "pose": "standing",
            }
            for name in names
        },
        "salient_objects": {"lantern": "a small lantern"},
    })


def judge_payload(fid: str, baseline: bool) -> str:
    i = int(fid.rsplit("_", 1)[1])
    base = {
        "scene_score": 4 + i % 3,
        "background_score": 5 + i % 2,
        "characters_score": 3 + i % 4,
        "salient_objects_score": 6,
    }
    if not baseline:
        bonus = 1 + i % 2
        base = {k: min(10, v + bonus) for k, v in base.items()}
    return json.dumps({**base, "rationale": f"deterministic rubric for {fid}"})


def pipeline_responder(body, attempt):
    """Content-keyed mock model covering all three prompt families."""
    kind = body_kind(body)
    fid = frame_id_of(body)
    i = int(fid.rsplit("_", 1)[1])
    if kind == "detect":
        return ("ok", json.dumps(characters_for(i)))
    if kind == "caption":
        return ("ok", caption_payload(fid, characters_for(i)))
    return ("ok", judge_payload(fid, baseline="BASELINE" in all_text(body)))


def build_pipeline_workspace(root, n_blobs=8, per_blob=6):
    """Self-contained input tree for the CLI: frames + embeddings forming
    n_blobs well-separated blobs, gold labels, roster, sheet, config."""
    import itertools as _it

    import numpy as _np

    root.mkdir(parents=True, exist_ok=True)
    corners = list(_it.product((0.0, 50.0), repeat=3))[:n_blobs]
    rng = _np.random.default_rng(0)
    frames = make_frames(root, n_blobs * per_blob)

    with open(root / "embeddings.jsonl", "w") as fh:
        for b, corner in enumerate(corners):
            for j in range(per_blob):
                idx = b * per_blob + j
                vec = _np.asarray(corner) + rng.normal(0.0, 0.5, 3)
                fh.write(json.dumps({"id": frames[idx].id, "vec": [round(v, 6) for v in vec]}) + "\n")

    with open(root / "manifest.jsonl", "w") as fh:
        for f in frames:
            fh.write(json.dumps({"id": f.id, "image_path": f.image_path}) + "\n")

    with open(root / "labels.jsonl", "w") as fh:
        for i, f in enumerate(frames):
            fh.write(json.dumps({"frame_id": f.id, "characters": characters_for(i)}) + "\n")

    with open(root / "roster.json", "w") as fh:
        json.dump({"names": list(ROSTER_NAMES)}, fh)

    entries = []
    for name in ROSTER_NAMES:
        path = root / f"ref_{name}.png"
        path.write_bytes(b"PNGDATA:" + name.encode())
        entries.append({"name": name, "image_path": str(path), "description": f"{name} reference"})
    with open(root / "sheet.json", "w") as fh:
        json.dump({"entries": entries}, fh)

    config = f"""
[paths]
manifest = "{root / 'manifest.jsonl'}"
roster = "{root / 'roster.json'}"
sheet = "{root / 'sheet.json'}"
labels = "{root / 'labels.jsonl'}"
embeddings = "{root / 'embeddings.jsonl'}"
embeddings_format = "jsonl"

[clustering]
min_cluster_size = 5
min_samples = 4
metric = "euclidean_raw"

[sampling]
seed = 7
strategy = "seeded_random"

[split]
train_fraction = 0.8
seed = 0

[endpoints.detector]
base_url = "http://127.0.0.1:9/unused"
model_name = "detector-mock"
timeout_s = 10.0
max_retries = 2
backoff_base_s = 0.01

[endpoints.captioner]
base_url = "http://127.0.0.1:9/unused"
model_name = "captioner-mock"
timeout_s = 10.0
max_retries = 2
backoff_base_s = 0.01

[endpoints.judge]
base_url = "http://127.0.0.1:9/unused"
model_name = "judge-mock"
timeout_s = 10.0
max_retries = 2
backoff_base_s = 0.01
"""
    (root / "config.toml").write_text(config)
    return root / "config.toml"


def run_pipeline(config_path, out_dir, mock_url):
    """Replay the whole CLI chain into out_dir; returns per-stage results."""
    from click.testing import CliRunner

    from vivecap.cli import main

    runner = CliRunner()
    base = ["--config", str(config_path), "--output-dir", str(out_dir),
            "--mock-endpoint", mock_url]

    def invoke(*args):
        result = runner.invoke(main, base + list(args))
        assert result.exit_code == 0, f"{args}: exit {result.exit_code}: {result.output}"
        return result

    results = [invoke("cluster"), invoke("sample"), invoke("detect"), invoke("caption")]

    # a degraded caption set standing in for an earlier run of the pipeline
    captions = (out_dir / "captions.jsonl").read_text().splitlines()
    with open(out_dir / "captions_baseline.jsonl", "w") as fh:
        for line in captions:
            rec = json.loads(line)
            rec["caption"]["scene"] = "BASELINE " + rec["caption"]["scene"]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    results += [
        invoke("judge"),
        invoke("judge", "--input", "captions_baseline.jsonl",
               "--output", "scorecards_before.jsonl"),
        invoke("metrics"),
        invoke("stats", "--before", "scorecards_before.jsonl", "--after", "scorecards.jsonl"),
        invoke("export-sft"),
        invoke("report",
               "--scorecards", "baseline=scorecards_before.jsonl",
               "--scorecards", "improved=scorecards.jsonl"),
    ]
    return results
