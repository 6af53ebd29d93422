"""Canonical protocol test vectors, shared on disk with any other
implementation of the wire protocol.

Each vector is a framed message in a .bin file plus a manifest describing the
decoded content. `write_vectors` is deterministic: regenerating produces
byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import guidance as g


def canonical_messages() -> list[tuple[str, object]]:
    rng = np.random.default_rng(20240813)
    img_small = (rng.random((1, 4, 6, 3), dtype=np.float64) * 2 - 1).astype(np.float32)
    img_batch = (rng.random((3, 8, 8, 3), dtype=np.float64) * 2 - 1).astype(np.float32)
    grad = (rng.standard_normal((2, 5, 5, 3)) * 0.1).astype(np.float32)
    cam = g.CameraExtension(
        rotations=np.stack([np.eye(3)] * 3),
        translations=np.array([[0.0, 0.0, 2.2], [2.2, 0.0, 0.0], [0.0, -2.2, 0.0]]),
        fovs_deg=np.array([45.0, 45.0, 30.0]),
    )
    return [
        ("hello", g.Hello()),
        ("request_minimal", g.GuidanceRequest(
            request_id=1, prompt="a sphere", images=img_small,
            t_min=20, t_max=980, seed=7, guidance_scale=100.0)),
        ("request_batched_cameras", g.GuidanceRequest(
            request_id=77, prompt="a coffee mug ☕", images=img_batch,
            t_min=1, t_max=999, seed=123456789, guidance_scale=7.5,
            extensions=[(g.EXT_CAMERAS, cam.encode())])),
        ("gradient", g.GuidanceGradient(request_id=77, gradients=grad)),
        ("error", g.ErrorMessage(request_id=9, code=2, message="model unavailable")),
    ]


def describe(msg) -> dict:
    if isinstance(msg, g.Hello):
        return {"type": "hello", "version": msg.version, "flags": msg.flags}
    if isinstance(msg, g.GuidanceRequest):
        return {"type": "request", "request_id": msg.request_id,
                "prompt": msg.prompt, "shape": list(msg.images.shape),
                "t_min": msg.t_min, "t_max": msg.t_max, "seed": msg.seed,
                "guidance_scale": round(float(msg.guidance_scale), 6),
                "image_checksum": _checksum(msg.images),
                "extensions": [[t, len(d)] for t, d in msg.extensions]}
    if isinstance(msg, g.GuidanceGradient):
        return {"type": "gradient", "request_id": msg.request_id,
                "status": msg.status, "shape": list(msg.gradients.shape),
                "gradient_checksum": _checksum(msg.gradients)}
    if isinstance(msg, g.ErrorMessage):
        return {"type": "error", "request_id": msg.request_id,
                "code": msg.code, "message": msg.message}
    raise TypeError(type(msg))


def _checksum(arr: np.ndarray) -> str:
    import hashlib
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def write_vectors(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    paths = []
    for name, msg in canonical_messages():
        data = g.encode_message(msg)
        path = directory / f"{name}.bin"
        path.write_bytes(data)
        entry = describe(msg)
        entry["file"] = path.name
        entry["bytes"] = len(data)
        manifest.append(entry)
        paths.append(path)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return paths


def vectors_dir() -> Path:
    """Repository-level vector directory (two levels above the package)."""
    return Path(__file__).resolve().parents[2] / "protocol" / "vectors"


if __name__ == "__main__":
    out = write_vectors(vectors_dir())
    print(f"wrote {len(out)} vectors to {vectors_dir()}")
