import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from captcha_bench import (
    ClassId,
    DetectorRequest,
    ExternalProcessDetector,
    GroundTruth,
    ImageMeta,
    OracleDetector,
    OracleNoise,
    PixelBox,
)
from captcha_bench.errors import (
    ConfigError,
    DetectorError,
    DetectorTimeoutError,
    ProtocolError,
)

STUB = Path(__file__).parent / "stub_adapter.py"


def stub_command(*extra):
    return [sys.executable, str(STUB), *extra]


def one_image_truth(width=1000, height=800, boxes=((100, 100, 180, 150),)):
    meta = ImageMeta("img", width, height)
    gts = tuple(
        GroundTruth("img", ClassId.TEXT, PixelBox(*b)) for b in boxes
    )
    return {"img": (meta, gts)}


class TestOracleDetector:
    def test_zero_noise_reproduces_ground_truth(self):
        truth = one_image_truth(boxes=((100, 100, 180, 150), (300, 400, 420, 470)))
        oracle = OracleDetector(truth, OracleNoise.zero(), seed=1)
        resp = oracle.detect(DetectorRequest("img", "unused.png"))
        assert len(resp.detections) == 2
        for det, gt in zip(resp.detections, truth["img"][1]):
            assert det.box == gt.box
            assert det.cls is gt.cls
            assert det.confidence == OracleNoise.zero().conf_hi
        assert resp.inference_ms > 0

    def test_full_drop_rate_empty(self):
        oracle = OracleDetector(one_image_truth(), OracleNoise(drop_rate=1.0), seed=1)
        resp = oracle.detect(DetectorRequest("img", "unused.png"))
        assert resp.detections == ()

    def test_downscale_arithmetic(self):
        # a 60 px object on a 3840 px page renders at 10 px for a 640 input
        truth = one_image_truth(width=3840, height=2000, boxes=((500, 500, 560, 560),))
        noise = OracleNoise(min_visible_px=12, downscale_drop=1.0)
        oracle = OracleDetector(truth, noise, input_size=640, seed=1)
        resp = oracle.detect(DetectorRequest("img", "unused.png"))
        assert resp.detections == ()

    def test_slice_restores_native_resolution(self):
        truth = one_image_truth(width=3840, height=2000, boxes=((500, 500, 560, 560),))
        noise = OracleNoise(min_visible_px=12, downscale_drop=1.0)
        oracle = OracleDetector(truth, noise, input_size=640, seed=1)
        resp = oracle.detect(
            DetectorRequest("img", "unused.png", slice_origin=(480, 480),
                            slice_size=(640, 640))
        )
        assert len(resp.detections) == 1
        assert resp.detections[0].box.as_tuple() == (20, 20, 80, 80)

    def test_downscale_drop_frequency_is_one(self):
        truth = one_image_truth(width=3840, height=2000, boxes=((500, 500, 560, 560),))
        noise = OracleNoise(min_visible_px=12, downscale_drop=1.0)
        dropped = 0
        trials = 10_000
        for seed in range(trials):
            oracle = OracleDetector(truth, noise, input_size=640, seed=seed)
            if not oracle.detect(DetectorRequest("img", "x.png")).detections:
                dropped += 1
        assert dropped / trials == 1.0

    def test_ground_truth_outside_slice_ignored(self):
        truth = one_image_truth(boxes=((100, 100, 180, 150),))
        oracle = OracleDetector(truth, OracleNoise.zero(), seed=1)
        resp = oracle.detect(
            DetectorRequest("img", "x.png", slice_origin=(500, 500), slice_size=(300, 300))
        )
        assert resp.detections == ()

    def test_false_positive_rate(self):
        truth = one_image_truth(boxes=())
        noise = OracleNoise(fp_rate=2.0, conf_lo=0.5, conf_hi=0.9)
        oracle = OracleDetector(truth, noise, seed=77)
        total = 0
        n = 400
        for k in range(n):
            resp = oracle.detect(
                DetectorRequest("img", "x.png", slice_origin=(0, k), slice_size=(1000, 799))
            )
            total += len(resp.detections)
            for det in resp.detections:
                assert 0 <= det.box.x1 < det.box.x2 <= 1000
                assert 0.5 <= det.confidence <= 0.9
        assert total / n == pytest.approx(2.0, abs=0.25)

    def test_jitter_stays_in_window(self):
        truth = one_image_truth(boxes=((0, 0, 80, 50),))
        noise = OracleNoise(jitter_px=30.0, conf_lo=0.5, conf_hi=0.9)
        for seed in range(100):
            oracle = OracleDetector(truth, noise, seed=seed)
            resp = oracle.detect(DetectorRequest("img", "x.png"))
            b = resp.detections[0].box
            assert 0 <= b.x1 < b.x2 <= 1000
            assert 0 <= b.y1 < b.y2 <= 800

    def test_same_seed_same_answer(self):
        truth = one_image_truth()
        noise = OracleNoise(jitter_px=3, drop_rate=0.3, fp_rate=1.0,
                            conf_lo=0.4, conf_hi=0.95)
        r1 = OracleDetector(truth, noise, seed=5).detect(DetectorRequest("img", "x.png"))
        r2 = OracleDetector(truth, noise, seed=5).detect(DetectorRequest("img", "x.png"))
        assert r1.detections == r2.detections

    def test_noise_validation(self):
        with pytest.raises(ConfigError):
            OracleNoise(drop_rate=1.5)
        with pytest.raises(ConfigError):
            OracleNoise(conf_lo=0.9, conf_hi=0.5)


@pytest.fixture
def fixture_image(tmp_path):
    path = tmp_path / "img.png"
    Image.fromarray(np.zeros((80, 120, 3), dtype=np.uint8)).save(path)
    return path


class TestExternalDetector:
    def test_round_trip_fixture_boxes(self, tmp_path, fixture_image):
        boxes = {
            "img": [
                {"cls": "button", "conf": 0.75, "x1": 10, "y1": 12, "x2": 40, "y2": 30},
                {"cls": "text", "conf": 0.5, "x1": 50, "y1": 5, "x2": 90, "y2": 25},
            ]
        }
        boxes_file = tmp_path / "boxes.json"
        boxes_file.write_text(json.dumps(boxes))
        det = ExternalProcessDetector(stub_command("--boxes", str(boxes_file)))
        try:
            resp = det.detect(
                DetectorRequest("img", str(fixture_image), image_size=(120, 80))
            )
        finally:
            det.close()
        assert len(resp.detections) == 2
        assert resp.detections[0].cls is ClassId.BUTTON
        assert resp.detections[0].box.as_tuple() == (10, 12, 40, 30)
        assert resp.detections[1].cls is ClassId.TEXT
        assert resp.inference_ms == 0.25

    def test_unknown_class_is_schema_violation(self, fixture_image):
        det = ExternalProcessDetector(stub_command("--bad-class"))
        try:
            with pytest.raises(ProtocolError, match="banana"):
                det.detect(DetectorRequest("img", str(fixture_image), image_size=(120, 80)))
        finally:
            det.close()

    def test_timeout_raises(self, fixture_image):
        det = ExternalProcessDetector(stub_command("--sleep", "5"), timeout_s=0.3)
        try:
            with pytest.raises(DetectorTimeoutError):
                det.detect(DetectorRequest("img", str(fixture_image), image_size=(120, 80)))
        finally:
            det.close()

    def test_crash_once_recovers_via_restart(self, tmp_path, fixture_image):
        sentinel = tmp_path / "crashed.flag"
        det = ExternalProcessDetector(stub_command("--crash-once", str(sentinel)))
        try:
            resp = det.detect(
                DetectorRequest("img", str(fixture_image), image_size=(120, 80))
            )
        finally:
            det.close()
        assert sentinel.exists()
        assert resp.detections == ()

    def test_adapter_error_message_is_detector_error(self, fixture_image):
        det = ExternalProcessDetector(stub_command("--error-ids", "img"))
        try:
            with pytest.raises(DetectorError, match="simulated failure"):
                det.detect(DetectorRequest("img", str(fixture_image), image_size=(120, 80)))
        finally:
            det.close()

    def test_missing_image_path_rejected(self):
        det = ExternalProcessDetector(stub_command())
        with pytest.raises(Exception, match="does not exist"):
            det.detect(DetectorRequest("img", "/nonexistent/img.png"))
        det.close()

    def test_box_outside_window_rejected(self, tmp_path, fixture_image):
        boxes = {"img": [{"cls": "text", "conf": 0.5, "x1": 0, "y1": 0, "x2": 500, "y2": 50}]}
        boxes_file = tmp_path / "boxes.json"
        boxes_file.write_text(json.dumps(boxes))
        det = ExternalProcessDetector(stub_command("--boxes", str(boxes_file)))
        try:
            with pytest.raises(ProtocolError, match="window"):
                det.detect(DetectorRequest("img", str(fixture_image), image_size=(120, 80)))
        finally:
            det.close()
