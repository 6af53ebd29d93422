import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tacshape import guidance as g
from tacshape import vectors
from tacshape.shapes import make_icosphere


def random_request(rng: np.random.Generator) -> g.GuidanceRequest:
    b = int(rng.integers(1, 4))
    h = int(rng.integers(1, 12))
    w = int(rng.integers(1, 12))
    images = (rng.random((b, h, w, 3)) * 2 - 1).astype(np.float32)
    exts = []
    if rng.random() < 0.5:
        cam = g.CameraExtension(rotations=np.stack([np.eye(3)] * b),
                                translations=rng.normal(size=(b, 3)),
                                fovs_deg=np.full(b, 45.0))
        exts.append((g.EXT_CAMERAS, cam.encode()))
    if rng.random() < 0.3:
        exts.append((99, bytes(rng.integers(0, 256, size=rng.integers(0, 40),
                                            dtype=np.uint8))))
    return g.GuidanceRequest(
        request_id=int(rng.integers(0, 2 ** 63)),
        prompt="".join(chr(c) for c in rng.integers(32, 0x24F, size=rng.integers(0, 30))),
        images=images, t_min=int(rng.integers(1, 500)),
        t_max=int(rng.integers(500, 1000)), seed=int(rng.integers(0, 2 ** 63)),
        guidance_scale=float(np.float32(rng.random() * 200)), extensions=exts)


def assert_messages_equal(a, b):
    assert type(a) is type(b)
    if isinstance(a, g.GuidanceRequest):
        assert a.request_id == b.request_id
        assert a.prompt == b.prompt
        assert np.array_equal(a.images, b.images)
        assert (a.t_min, a.t_max, a.seed) == (b.t_min, b.t_max, b.seed)
        assert np.float32(a.guidance_scale) == np.float32(b.guidance_scale)
        assert a.extensions == b.extensions
    elif isinstance(a, g.GuidanceGradient):
        assert a.request_id == b.request_id
        assert a.status == b.status
        assert np.array_equal(a.gradients, b.gradients)
    elif isinstance(a, g.ErrorMessage):
        assert (a.request_id, a.code, a.message) == (b.request_id, b.code, b.message)
    elif isinstance(a, g.Hello):
        assert (a.version, a.flags) == (b.version, b.flags)


def test_roundtrip_randomized():
    rng = np.random.default_rng(0)
    for _ in range(50):
        msg = random_request(rng)
        back = g.decode_message(g.encode_message(msg))
        assert_messages_equal(msg, back)


def test_roundtrip_other_types():
    rng = np.random.default_rng(1)
    grad = g.GuidanceGradient(request_id=5, status=0,
                              gradients=rng.standard_normal((2, 3, 4, 3)).astype(np.float32))
    assert_messages_equal(grad, g.decode_message(g.encode_message(grad)))
    err = g.ErrorMessage(request_id=2, code=7, message="boom ☠")
    assert_messages_equal(err, g.decode_message(g.encode_message(err)))
    assert_messages_equal(g.Hello(), g.decode_message(g.encode_message(g.Hello())))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), chunk=st.integers(1, 64))
def test_fragmentation_property(seed, chunk):
    rng = np.random.default_rng(seed)
    messages = [random_request(rng) for _ in range(2)]
    stream = b"".join(g.encode_message(m) for m in messages)
    decoder = g.StreamDecoder()
    out = []
    for i in range(0, len(stream), chunk):
        out.extend(decoder.feed(stream[i:i + chunk]))
    assert len(out) == 2
    for a, b in zip(messages, out):
        assert_messages_equal(a, b)


def test_fragmentation_every_boundary_small():
    msg = g.ErrorMessage(request_id=3, code=1, message="x")
    stream = g.encode_message(msg) + g.encode_message(g.Hello())
    for cut in range(1, len(stream)):
        decoder = g.StreamDecoder()
        out = decoder.feed(stream[:cut])
        out += decoder.feed(stream[cut:])
        assert len(out) == 2
        assert_messages_equal(out[0], msg)


def test_bad_magic_rejected():
    bad = b"XXXX" + b"\0" * 16
    with pytest.raises(g.ProtocolError):
        g.StreamDecoder().feed(bad)


def test_version_mismatch_names_both():
    payload = struct.pack("<II", 2, 0)
    frame = struct.pack("<4sIIQ", g.MAGIC, 2, g.MSG_HELLO, len(payload)) + payload
    with pytest.raises(g.ProtocolError) as err:
        g.StreamDecoder().feed(frame)
    assert "2" in str(err.value) and "1" in str(err.value)


def test_nonfinite_images_rejected():
    img = np.full((1, 2, 2, 3), np.nan, dtype=np.float32)
    req = g.GuidanceRequest(request_id=1, prompt="", images=img)
    with pytest.raises(g.ProtocolError):
        g.encode_message(req)


# ---------------------------------------------------------------------------
# Shared on-disk vectors
# ---------------------------------------------------------------------------


def test_vectors_regenerate_byte_identical(tmp_path):
    vectors.write_vectors(tmp_path)
    committed = vectors.vectors_dir()
    for path in sorted(tmp_path.glob("*.bin")):
        assert (committed / path.name).read_bytes() == path.read_bytes()
    assert (committed / "manifest.json").read_text() == (tmp_path / "manifest.json").read_text()


def test_vectors_decode_to_manifest():
    vdir = vectors.vectors_dir()
    manifest = json.loads((vdir / "manifest.json").read_text())
    for entry in manifest:
        data = (vdir / entry["file"]).read_bytes()
        assert len(data) == entry["bytes"]
        msg = g.decode_message(data)
        desc = vectors.describe(msg)
        desc.update({"file": entry["file"], "bytes": entry["bytes"]})
        assert desc == entry


def test_vectors_fragment_at_every_boundary():
    vdir = vectors.vectors_dir()
    stream = b"".join((vdir / f).read_bytes()
                      for f in ("hello.bin", "request_minimal.bin", "gradient.bin",
                                "error.bin"))
    for cut in range(1, len(stream), 7):  # stride keeps runtime sane
        decoder = g.StreamDecoder()
        out = decoder.feed(stream[:cut])
        out += decoder.feed(stream[cut:])
        assert len(out) == 4


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def test_zero_backend():
    backend = g.ZeroBackend()
    req = g.GuidanceRequest(request_id=4, prompt="x",
                            images=np.zeros((2, 4, 4, 3), dtype=np.float32))
    reply = backend.request_gradient(req)
    assert reply.request_id == 4
    assert reply.gradients.shape == (2, 4, 4, 3)
    assert np.all(reply.gradients == 0)


def test_template_mock_requires_camera(icosphere):
    backend = g.TemplateMockBackend(icosphere)
    req = g.GuidanceRequest(request_id=1, prompt="",
                            images=np.zeros((1, 8, 8, 3), dtype=np.float32))
    with pytest.raises(g.ProtocolError):
        backend.request_gradient(req)


def test_template_mock_gradient_definition(icosphere):
    backend = g.TemplateMockBackend(icosphere, lam=2.0)
    cam = g.CameraExtension(rotations=np.eye(3)[None],
                            translations=np.array([[0.0, 0.0, 2.2]]),
                            fovs_deg=np.array([45.0]))
    rng = np.random.default_rng(3)
    img = (rng.random((1, 16, 16, 3)) * 2 - 1).astype(np.float32)
    req = g.GuidanceRequest(request_id=1, prompt="", images=img,
                            extensions=[(g.EXT_CAMERAS, cam.encode())])
    reply = backend.request_gradient(req)
    # recover T from the definition and check linearity: G = lam (I - T)
    target = img - reply.gradients / np.float32(2.0)
    img2 = (rng.random((1, 16, 16, 3)) * 2 - 1).astype(np.float32)
    req2 = g.GuidanceRequest(request_id=2, prompt="", images=img2,
                             extensions=[(g.EXT_CAMERAS, cam.encode())])
    reply2 = backend.request_gradient(req2)
    expected = np.float32(2.0) * (img2 - target)
    assert np.abs(reply2.gradients - expected).max() < 1e-6
    # descent direction: <G, I - T> > 0 for I != T
    assert float(np.sum(reply.gradients * (img - target))) > 0


def test_template_mock_image_descent(icosphere):
    backend = g.TemplateMockBackend(icosphere, lam=1.0)
    cam = g.CameraExtension(rotations=np.eye(3)[None],
                            translations=np.array([[0.0, 0.0, 2.2]]),
                            fovs_deg=np.array([45.0]))
    rng = np.random.default_rng(4)
    img = (rng.random((1, 12, 12, 3)) * 2 - 1).astype(np.float64)
    losses = []
    for i in range(40):
        req = g.GuidanceRequest(request_id=i, prompt="",
                                images=img.astype(np.float32),
                                extensions=[(g.EXT_CAMERAS, cam.encode())])
        grad = backend.request_gradient(req).gradients.astype(np.float64)
        losses.append(float(np.sum(grad ** 2)))
        img = img - 0.4 * grad
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-3 * losses[0]


def test_repeated_request_bit_identical(icosphere):
    backend = g.TemplateMockBackend(icosphere)
    cam = g.CameraExtension(rotations=np.eye(3)[None],
                            translations=np.array([[0.0, 0.0, 2.2]]),
                            fovs_deg=np.array([45.0]))
    img = np.zeros((1, 8, 8, 3), dtype=np.float32)
    req = g.GuidanceRequest(request_id=1, prompt="", images=img, seed=9,
                            extensions=[(g.EXT_CAMERAS, cam.encode())])
    a = backend.request_gradient(req)
    b = backend.request_gradient(req)
    assert g.encode_message(a) == g.encode_message(b)


# ---------------------------------------------------------------------------
# Wire client + server
# ---------------------------------------------------------------------------


def test_tcp_loopback_roundtrip():
    with g.MockServer(g.ZeroBackend()) as server:
        backend = g.connect(f"127.0.0.1:{server.port}")
        req = g.GuidanceRequest(request_id=11, prompt="hi",
                                images=np.zeros((1, 6, 6, 3), dtype=np.float32))
        reply = backend.request_gradient(req)
        assert reply.request_id == 11
        assert np.all(reply.gradients == 0)
        backend.close()


def test_tcp_template_mock(icosphere):
    with g.MockServer(g.TemplateMockBackend(icosphere)) as server:
        backend = g.connect(f"127.0.0.1:{server.port}")
        cam = g.CameraExtension(rotations=np.eye(3)[None],
                                translations=np.array([[0.0, 0.0, 2.2]]),
                                fovs_deg=np.array([45.0]))
        img = np.zeros((1, 8, 8, 3), dtype=np.float32)
        req = g.GuidanceRequest(request_id=5, prompt="", images=img,
                                extensions=[(g.EXT_CAMERAS, cam.encode())])
        a = backend.request_gradient(req)
        b = backend.request_gradient(req)
        assert np.array_equal(a.gradients, b.gradients)
        backend.close()


def test_connect_refused():
    with pytest.raises(g.GuidanceConnectionError):
        g.connect("127.0.0.1:1", connect_timeout=0.5)


def test_server_reports_backend_errors(icosphere):
    # template mock without a camera extension -> type-3 error, connection alive
    with g.MockServer(g.TemplateMockBackend(icosphere)) as server:
        backend = g.connect(f"127.0.0.1:{server.port}")
        req = g.GuidanceRequest(request_id=8, prompt="",
                                images=np.zeros((1, 4, 4, 3), dtype=np.float32))
        with pytest.raises(g.ProtocolError):
            backend.request_gradient(req)
        # the connection still answers afterwards
        cam = g.CameraExtension(rotations=np.eye(3)[None],
                                translations=np.array([[0.0, 0.0, 2.2]]),
                                fovs_deg=np.array([45.0]))
        ok = g.GuidanceRequest(request_id=9, prompt="",
                               images=np.zeros((1, 4, 4, 3), dtype=np.float32),
                               extensions=[(g.EXT_CAMERAS, cam.encode())])
        reply = backend.request_gradient(ok)
        assert reply.request_id == 9
        backend.close()


def test_endpoint_resolution(monkeypatch):
    monkeypatch.delenv(g.ENDPOINT_ENV_VAR, raising=False)
    assert g.resolve_endpoint(None) is None
    monkeypatch.setenv(g.ENDPOINT_ENV_VAR, "example:123")
    assert g.resolve_endpoint(None) == "example:123"
    assert g.resolve_endpoint("flag:9") == "flag:9"  # flag wins


# ---------------------------------------------------------------------------
# Cross-implementation loopback (requires the built TypeScript service)
# ---------------------------------------------------------------------------


def _service_entry():
    import pathlib
    return pathlib.Path(__file__).resolve().parents[1] / "service" / "dist" / "main.js"


@pytest.mark.skipif(not _service_entry().exists(), reason="service not built")
def test_stdio_service_zero_mock_parity():
    import shutil
    if shutil.which("node") is None:
        pytest.skip("node unavailable")
    backend = g.connect(f"stdio:node {_service_entry()} serve --stdio --mock")
    try:
        req = g.GuidanceRequest(request_id=99, prompt="a mug",
                                images=np.full((2, 8, 8, 3), 0.25, dtype=np.float32),
                                seed=3)
        reply = backend.request_gradient(req)
        local = g.ZeroBackend().request_gradient(req)
        assert np.array_equal(reply.gradients, local.gradients)
        assert reply.request_id == 99
    finally:
        backend.close()


@pytest.mark.skipif(not _service_entry().exists(), reason="service not built")
def test_stdio_service_gaussian_deterministic():
    import shutil
    if shutil.which("node") is None:
        pytest.skip("node unavailable")
    backend = g.connect(
        f"stdio:node {_service_entry()} serve --stdio --backbone gaussian --deterministic")
    try:
        rng = np.random.default_rng(0)
        img = (rng.random((1, 64, 64, 3)) * 2 - 1).astype(np.float32)
        req = g.GuidanceRequest(request_id=7, prompt="a sphere", images=img,
                                seed=11, guidance_scale=2.0)
        a = backend.request_gradient(req)
        b = backend.request_gradient(req)
        assert np.array_equal(a.gradients, b.gradients)
        assert a.gradients.shape == img.shape
        assert np.isfinite(a.gradients).all()
        assert np.abs(a.gradients).max() > 0
    finally:
        backend.close()
