import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import pytest

from compression import CompressOptions
from evaluation import EvaluationOptions, rd_evaluate
from restoration.diffusion import ZeroVelocity
from splatrestore.errors import InputError


def _options(**kwargs) -> EvaluationOptions:
    return EvaluationOptions(c_min=24, levels=3, compress=CompressOptions(finetune_iters=1), **kwargs)


def test_rd_evaluate_degraded_only(small_scene):
    report = rd_evaluate([small_scene], options=_options())
    frame = report.frame
    assert frame["level"].tolist() == ["full", 0, 1, 2]
    rows = {row["level"]: row for row in report.rows}
    assert rows[0]["primitives"] == 24 and rows[2]["primitives"] == 96
    assert rows[0]["bytes"] < rows[1]["bytes"] < rows[2]["bytes"]
    assert rows[0]["psnr_degraded"] < rows[2]["psnr_degraded"]
    assert not report.has_restored
    assert all("perc-proxy_degraded" in rows[level] for level in (0, 1, 2))


def test_rd_evaluate_with_restorer_variants(small_scene):
    report = rd_evaluate([small_scene], ZeroVelocity(), levels=[2], options=_options(img2img_steps=2))
    row = report.rows[-1]
    assert row["level"] == 2
    for name in ("restored", "restored_no_t0", "img2img"):
        assert math.isfinite(row[f"psnr_{name}"])
        assert f"ssim_{name}" in row
    assert report.has_restored


def test_rd_evaluate_needs_test_views(small_scene):
    with pytest.raises(InputError):
        rd_evaluate([replace(small_scene, test_views=())], options=_options())


def test_core_package_does_not_import_upper_layers():
    code = ("import sys, splatrestore.metrics, splatrestore.raster; "
            "print(sorted(m for m in sys.modules if m.split('.')[0] in ('compression', 'restoration')))")
    result = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                            cwd=Path(__file__).parent)
    assert result.stdout.strip() == "[]"
