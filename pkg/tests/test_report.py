import json

import numpy as np
import pytest

from icaps.evaluation import ExplanationRecord, MIEstimate, SwapResult, TraversalGrid
from icaps.report import ReportInputs, emit_report, read_ppm, tile, write_ppm


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((1, 5, 7))
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    back = read_ppm(tmp_path / "a.ppm")
    np.testing.assert_array_equal(back[:, :, 0], np.round(img[0] * 255).astype(np.uint8))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "b.ppm", np.zeros((2, 3, 4, 5)))


def test_tile_layout():
    imgs = np.zeros((2, 3, 1, 4, 4))
    canvas = tile(imgs)
    assert canvas.shape == (1, 2 * 5 + 1, 3 * 5 + 1)
    assert canvas[0, 0, 0] == 1.0 and canvas[0, 1, 1] == 0.0


def test_emit_report(tmp_path):
    rng = np.random.default_rng(0)
    grid = TraversalGrid(rng.random((4, 8, 1, 16, 16)), np.arange(4), np.linspace(-1, 1, 8))
    quad = [rng.random((1, 1, 16, 16)) for _ in range(4)]
    res = ReportInputs(
        accuracy=0.95,
        probe_accuracy=0.52,
        chance=0.5,
        mi=MIEstimate(np.full(4, 0.3), np.full(8, 0.01), 20),
        traversals={7: grid},
        swaps={"1_2": SwapResult(*quad)},
        explanations=[ExplanationRecord(7, 1, 0.8, [0.1, 0.2, 0.3, 0.4])],
        distinctness=0.4,
    )
    written = emit_report(res, tmp_path / "out")
    names = {p.name for p in written}
    assert {"mi.csv", "mi.png", "traverse_7.ppm", "traverse_7.png", "swap_1_2.ppm", "explanations.json", "summary.md"} <= names
    assert json.loads((tmp_path / "out" / "explanations.json").read_text())[0]["predicted_class"] == 1
    assert "0.9500" in (tmp_path / "out" / "summary.md").read_text()


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(ReportInputs(accuracy=1.0), blocker / "sub")
