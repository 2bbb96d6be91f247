import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from scipy import stats

from vbiopsy.oracle import (
    CUES, BoxPrediction, EndpointConfig, OracleRequest, OracleResponseError, OracleTransportError,
    RemotePredictor, StubNoiseConfig, StubPredictor, default_prompt, parse_boxes, remote_predict,
    stub_predict, tight_box, to_u8,
)


def square_mask(h=16, w=16, rows=(4, 9), cols=(3, 11)):
    m = np.zeros((h, w), bool)
    m[rows[0]:rows[1], cols[0]:cols[1]] = True
    return m


def test_prompt_names_all_cues():
    p = default_prompt()
    assert all(c in p for c in CUES) and "boxes" in p


def test_box_validation():
    with pytest.raises(ValueError):
        BoxPrediction(0, (3, 0, 3, 4), 0.5)
    with pytest.raises(ValueError):
        BoxPrediction(0, (0, 0, 3, 4), 1.5)


def test_tight_box_half_open():
    assert tight_box(square_mask()) == (3, 4, 11, 9)
    assert tight_box(np.zeros((4, 4), bool)) is None


def test_stub_zero_noise_is_tight_box():
    m = square_mask()
    out = stub_predict(np.zeros(m.shape), m, StubNoiseConfig())
    assert len(out) == 1 and out[0].box == (3, 4, 11, 9) and out[0].confidence == 1.0
    assert stub_predict(np.zeros(m.shape), np.zeros_like(m), StubNoiseConfig()) == []


def test_stub_miss_everything():
    m = square_mask()
    cfg = StubNoiseConfig(miss_prob=1.0)
    assert all(stub_predict(np.zeros(m.shape), m, cfg, i) == [] for i in range(20))


def test_stub_deterministic_per_slice():
    m = square_mask()
    cfg = StubNoiseConfig(jitter_std=1.5, miss_prob=0.3, false_pos_prob=0.3, seed=11)
    a = [stub_predict(np.zeros(m.shape), m, cfg, i) for i in range(30)]
    b = [stub_predict(np.zeros(m.shape), m, cfg, i) for i in reversed(range(30))][::-1]
    assert a == b


def test_stub_shape_mismatch():
    with pytest.raises(ValueError):
        stub_predict(np.zeros((4, 5)), np.zeros((4, 4)), StubNoiseConfig())


def test_stub_noise_config_validation():
    with pytest.raises(ValueError):
        StubNoiseConfig(miss_prob=1.2)
    with pytest.raises(ValueError):
        StubNoiseConfig(jitter_std=-1)


def test_stub_miss_rate():
    m = square_mask()
    cfg = StubNoiseConfig(miss_prob=0.3, seed=2)
    n = 4000
    hits = sum(bool(stub_predict(np.zeros(m.shape), m, cfg, i)) for i in range(n))
    # binomial 4 sigma band
    assert abs(1 - hits / n - 0.3) < 4 * np.sqrt(0.3 * 0.7 / n)


def test_stub_jitter_is_gaussian():
    m = square_mask(64, 64, (20, 40), (20, 44))
    sigma = 1.7
    cfg = StubNoiseConfig(jitter_std=sigma, seed=5)
    x0 = np.array([stub_predict(np.zeros(m.shape), m, cfg, i)[0].box[0] for i in range(2000)])
    res = stats.kstest((x0 - 20) / sigma, "norm")
    assert res.pvalue > 0.001


def test_stub_predictor_binds_case():
    gt = np.zeros((3, 16, 16), bool)
    gt[1] = square_mask()
    p = StubPredictor(gt, StubNoiseConfig())
    assert p(np.zeros((16, 16)), 0) == [] and len(p(np.zeros((16, 16)), 1)) == 1


def test_to_u8_range():
    u = to_u8(np.array([[0.5, 1.0], [1.5, 2.5]]))
    assert u.dtype == np.uint8 and u.min() == 0 and u.max() == 255
    assert (to_u8(np.ones((2, 2))) == 0).all()


def test_request_json_roundtrip():
    px = np.arange(12, dtype=float).reshape(3, 4) * 20
    req = OracleRequest(px, "find it", 7)
    doc = req.to_json()
    back = np.frombuffer(base64.b64decode(doc["slice_b64"]), np.uint8).reshape(doc["height"], doc["width"])
    assert np.array_equal(back, px.astype(np.uint8)) and doc["slice_index"] == 7
    with pytest.raises(ValueError):
        OracleRequest(px, "", 0)
    with pytest.raises(ValueError):
        OracleRequest(np.full((2, 2), np.nan), "x", 0)


def test_parse_boxes_fixture_roundtrip():
    doc = {"boxes": [{"x0": 1, "y0": 2, "x1": 5, "y1": 6, "confidence": 0.8},
                     {"x0": -3, "y0": 0, "x1": 40, "y1": 3, "confidence": 0.1}]}
    out = parse_boxes(json.loads(json.dumps(doc)), 4, 10, 12)
    assert [b.box for b in out] == [(1, 2, 5, 6), (0, 0, 12, 3)]
    assert [b.confidence for b in out] == [0.8, 0.1] and all(b.slice_index == 4 for b in out)


def test_parse_boxes_drops_degenerate_with_warning(caplog):
    warnings = []
    doc = {"boxes": [{"x0": 5, "y0": 2, "x1": 3, "y1": 6, "confidence": 0.8}]}
    assert parse_boxes(doc, 0, 10, 10, warnings) == []
    assert len(warnings) == 1 and "degenerate" in caplog.text


@pytest.mark.parametrize("doc", [
    {}, {"boxes": "no"}, {"boxes": [{"x0": 1}]},
    {"boxes": [{"x0": 0, "y0": 0, "x1": 2, "y1": 2, "confidence": 3}]},
])
def test_parse_boxes_rejects_malformed(doc):
    with pytest.raises(OracleResponseError):
        parse_boxes(doc, 0, 8, 8)


class Server:
    """Local endpoint scripted by a list of (status, body) replies."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                outer.requests.append(json.loads(self.rfile.read(n)))
                status, body = outer.replies.pop(0) if outer.replies else (500, b"")
                self.send_response(status)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *a):
                pass

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_port}/predict"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def ok(boxes):
    return 200, json.dumps({"boxes": boxes}).encode()


def test_remote_success_sends_request():
    box = {"x0": 1, "y0": 1, "x1": 4, "y1": 3, "confidence": 0.9}
    with Server([ok([box])]) as srv:
        req = OracleRequest(np.full((6, 8), 100.0), "p", 2)
        out = remote_predict(req, EndpointConfig(srv.url, retries=0, timeout=5))
    assert out == [BoxPrediction(2, (1, 1, 4, 3), 0.9)]
    sent = srv.requests[0]
    assert sent["width"] == 8 and sent["height"] == 6 and sent["prompt"] == "p"


def test_remote_retries_then_succeeds():
    with Server([(500, b""), ok([])]) as srv:
        out = remote_predict(OracleRequest(np.zeros((4, 4)), "p", 0), EndpointConfig(srv.url, retries=1, timeout=5))
    assert out == [] and len(srv.requests) == 2


def test_remote_three_failures_mark_slice_failed():
    with Server([(500, b"")] * 3) as srv:
        with pytest.raises(OracleTransportError):
            remote_predict(OracleRequest(np.zeros((4, 4)), "p", 3), EndpointConfig(srv.url, retries=2, timeout=5))
        assert len(srv.requests) == 3
    with Server([(500, b"")] * 3 + [ok([{"x0": 0, "y0": 0, "x1": 2, "y1": 2, "confidence": 0.5}])]) as srv:
        pred = RemotePredictor(EndpointConfig(srv.url, retries=2, timeout=5))
        assert pred(np.zeros((4, 4)), 3) == []
        assert [f["slice_index"] for f in pred.failed] == [3]
        assert len(pred(np.zeros((4, 4)), 4)) == 1


def test_remote_malformed_json():
    with Server([(200, b"{not json")]) as srv:
        with pytest.raises(OracleResponseError):
            remote_predict(OracleRequest(np.zeros((4, 4)), "p", 0), EndpointConfig(srv.url, retries=0, timeout=5))


def test_remote_inverted_box_dropped():
    bad = {"x0": 3, "y0": 0, "x1": 1, "y1": 2, "confidence": 0.5}
    with Server([ok([bad])]) as srv:
        pred = RemotePredictor(EndpointConfig(srv.url, retries=0, timeout=5))
        assert pred(np.zeros((4, 4)), 0) == []
    assert len(pred.warnings) == 1 and pred.failed == []
