"""Walkthrough: detect-then-caption pipeline against an in-process mock model.

Starts a throwaway chat-completions server on localhost that answers the
detector and captioner prompts deterministically, then runs the two-stage
batch (character detection feeding the captioner's context) and prints what
came back. Useful for seeing the request/response shapes without a real VLM.

Run: python3 demos/mock_pipeline.py
"""

import base64
import json
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from vivecap.core_model import Frame, Roster
from vivecap.vlm_gateway import CharacterSheet, EndpointConfig, SheetEntry, run_two_stage

ROSTER = Roster(("Ellie", "Jay", "Phil", "Rex", "Victoria", "Sprite", "Elder_Sprite"))


def last_image_bytes(body):
    blobs = [
        base64.b64decode(part["image_url"]["url"].split(",", 1)[1])
        for msg in body["messages"]
        for part in msg["content"]
        if part.get("type") == "image_url"
    ]
    return blobs[-1], len(blobs)


def respond(body):
    """Detector requests carry all 7 reference images + target; anything
    smaller is a caption request. The target bytes embed the frame id."""
    target, n_images = last_image_bytes(body)
    fid = target.decode().removeprefix("IMG:")
    index = int(fid.rsplit("_", 1)[1])
    names = [ROSTER.names[index % len(ROSTER.names)]]
    if n_images == len(ROSTER.names) + 1:
        return json.dumps(names)
    return json.dumps({
        "scene": f"A quiet moment in {fid}.",
        "background": "Moonlit forest.",
        "characters": {
            n: {"description": f"{n} close up", "location": "center",
                "expression": "calm", "pose": "standing"}
            for n in names
        },
        "salient_objects": {"lantern": "a flickering lantern"},
    })


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        payload = json.dumps(
            {"choices": [{"message": {"content": respond(body)}}]}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        entries = []
        for name in ROSTER.names:
            p = tmp / f"ref_{name}.png"
            p.write_bytes(b"PNG:" + name.encode())
            entries.append(SheetEntry(name=name, image_path=str(p)))
        sheet = CharacterSheet(tuple(entries))

        frames = []
        for i in range(4):
            fid = f"frame_{i:04d}"
            p = tmp / f"{fid}.png"
            p.write_bytes(b"IMG:" + fid.encode())
            frames.append(Frame(id=fid, image_path=str(p)))

        server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        host, port = server.server_address
        cfg = EndpointConfig(
            base_url=f"http://{host}:{port}/v1/chat/completions",
            model_name="mock-model", timeout_s=10.0, backoff_base_s=0.01,
        )
        try:
            results = run_two_stage(cfg, cfg, sheet, ROSTER, frames)
        finally:
            server.shutdown()
            server.server_close()

        for res in results:
            assert res.ok, res.error
            names = ", ".join(sorted(res.detected)) or "(none)"
            print(f"{res.frame.id}: detected [{names}]")
            print(f"  scene: {res.captioned.caption.scene}")


if __name__ == "__main__":
    main()
