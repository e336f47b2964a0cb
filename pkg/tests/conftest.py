import numpy as np
import pytest

from dualmil.domain import RegionBag, WeakLabel, build_grid
from dualmil.model import ForwardTrace, Variant, softmax


def make_trace(p_cls, p_det=None, det_logits=None, mask=None, variant=Variant.CLS_DET_RS):
    """A trace with hand-chosen probabilities (hidden layer left empty)."""
    p_cls = np.asarray(p_cls, dtype=float)
    m = p_cls.shape[0]
    if det_logits is None:
        det_logits = np.zeros((m, 2))
    det_logits = np.asarray(det_logits, dtype=float)
    if mask is None:
        mask = np.ones((m, 2), dtype=np.int8)
    if p_det is None:
        p_det = np.stack([softmax(det_logits[:, j]) for j in range(2)], axis=1)
    p_det = np.asarray(p_det, dtype=float)
    p_image = np.array([p_det[:, 0] @ p_cls[:, 1], p_det[:, 1] @ p_cls[:, 2]])
    return ForwardTrace(features=np.zeros((m, 1)), pre=np.zeros((m, 1)), dropout=np.ones((m, 1)),
                        hidden=np.zeros((m, 1)), cls_logits=np.log(np.clip(p_cls, 1e-300, None)),
                        p_cls=p_cls, det_logits=det_logits, mask=np.asarray(mask, dtype=np.int8),
                        p_det=p_det, p_image=p_image, d_scores=p_cls[:, 1:] * p_det,
                        variant=variant)


def make_bag(features, label=(0, 0), annotations=(), supervision="weak", image_id="t0",
             side=224, stride=112):
    features = np.atleast_2d(np.asarray(features, dtype=float))
    m = features.shape[0]
    geometry = build_grid(side + stride * (m - 1), side, side, stride)
    return RegionBag(image_id, features, geometry, WeakLabel(*label), list(annotations), supervision)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
