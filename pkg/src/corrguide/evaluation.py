"""Metrics on target-half latents and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .domain import CorrespondenceField, GuidanceConfig, Status
from .toydiff import TIMING_KEYS, Mode, run_inpaint

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SCHEMA_VERSION = 1

DEFAULT_MODES = (
    Mode.NO_GUIDE,
    Mode.MASK_ONLY,
    Mode.MASK_FILTER,
    Mode.MASK_FILTER_SMOOTH,
    Mode.FULL,
    Mode.NO_ACC,
    Mode.NO_CYC,
)

CSV_FIELDS = (
    "mode",
    "n_runs",
    "n_failed",
    "psnr_mask",
    "ssim",
    "lpips",
    "final_correct",
    "correct_total",
    "step_time",
    *(f"time_{k}" for k in TIMING_KEYS),
    "correct_curve",
)


def rescale(values: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    """Affine map of latent values to [0, 1] using recorded extrema."""
    lo, hi = value_range
    span = hi - lo
    if span <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return (np.asarray(values, dtype=np.float64) - lo) / span


def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """PSNR in dB of values already in [0, 1].

    ``region`` is an (h, w) selector over the token grid; ``None`` means all
    tokens. A perfect match is reported as the 99 dB cap.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if region is not None:
        sel = np.asarray(region).astype(bool)
        if sel.shape != a.shape[: sel.ndim]:
            raise ValueError("region does not match the token grid")
        diff = diff[sel]
    if diff.size == 0:
        raise ValueError("empty PSNR region")
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: int) -> float:
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    if x.shape[0] < window or x.shape[1] < window:
        xs, ys = x[None, None], y[None, None]
    else:
        xs = sliding_window_view(x, (window, window))
        ys = sliding_window_view(y, (window, window))
    mx = xs.mean(axis=(-2, -1))
    my = ys.mean(axis=(-2, -1))
    vx = xs.var(axis=(-2, -1))
    vy = ys.var(axis=(-2, -1))
    cov = ((xs - mx[..., None, None]) * (ys - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM with a uniform square window on [0, 1] data.

    Inputs are (h, w) or (h, w, channels); channels are averaged. Grids smaller
    than the window fall back to one global window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], window) for c in range(a.shape[-1])]))


def count_correct(p: CorrespondenceField, scene) -> tuple[int, int]:
    """Inliers within one token (Chebyshev) of ground truth, over overlap tokens."""
    if p.shape != scene.shape:
        raise ValueError("field and scene grids differ")
    overlap = scene.overlap_mask == 1
    near = np.abs(p.coords - scene.gt_coords).max(axis=-1) <= 1
    ok = (p.status == Status.INLIER) & near & overlap
    return int(ok.sum()), int(overlap.sum())


def scene_metrics(restored: np.ndarray, scene) -> dict:
    """Mask-region PSNR and whole-half SSIM after rescaling to the scene range."""
    a = rescale(restored, scene.value_range)
    b = rescale(scene.target_latent, scene.value_range)
    return {
        "psnr_mask": psnr(a, b, scene.inpaint_mask == 1),
        "ssim": ssim(a, b),
    }


def _run_one(seed: int, cfg_dict: dict, mode: str) -> dict:
    from .synthdata import generate_scene, random_params

    try:
        scene = generate_scene(seed, random_params(seed))
        result = run_inpaint(scene, GuidanceConfig(**cfg_dict), mode, keep_attention=False)
    except Exception as exc:  # recorded, the suite carries on
        return {"seed": seed, "mode": mode, "error": f"{type(exc).__name__}: {exc}"}
    curve = [count_correct(tr.field, scene)[0] for tr in result.traces]
    timing = {k: float(np.mean([tr.timing[k] for tr in result.traces])) for k in TIMING_KEYS}
    return {
        "seed": seed,
        "mode": mode,
        "curve": curve,
        "total": count_correct(result.field, scene)[1],
        "timing": timing,
        **scene_metrics(result.restored, scene),
    }


def _summarise(mode: str, runs: list[dict], steps: int) -> dict:
    ok = [r for r in runs if "error" not in r]
    row = {
        "mode": mode,
        "n_runs": len(runs),
        "n_failed": len(runs) - len(ok),
        "lpips": None,
    }
    if not ok:
        row.update(
            psnr_mask=None,
            ssim=None,
            final_correct=None,
            correct_total=None,
            step_time=None,
            timing={k: None for k in TIMING_KEYS},
            correct_curve=[None] * steps,
        )
        return row
    curve = np.mean([r["curve"] for r in ok], axis=0)
    timing = {k: float(np.mean([r["timing"][k] for r in ok])) for k in TIMING_KEYS}
    row.update(
        psnr_mask=float(np.mean([r["psnr_mask"] for r in ok])),
        ssim=float(np.mean([r["ssim"] for r in ok])),
        final_correct=float(curve[-1]),
        correct_total=float(np.mean([r["total"] for r in ok])),
        step_time=float(sum(timing.values())),
        timing=timing,
        correct_curve=[float(v) for v in curve],
    )
    return row


def ablation_suite(
    seeds,
    cfg: GuidanceConfig | None = None,
    modes=DEFAULT_MODES,
    jobs: int = 1,
) -> dict:
    """Run every (seed, mode) pair and summarise each mode.

    Per-seed failures are recorded in ``failures`` and excluded from the means.
    ``runs`` keeps the per-seed numbers for paired comparisons.
    """
    cfg = cfg or GuidanceConfig()
    seeds = [int(s) for s in seeds]
    modes = [Mode(m).value for m in modes]
    if len(seeds) < 10:
        log.warning("ablation over %d seeds; means will be noisy", len(seeds))
    cfg_dict = asdict(cfg)
    tasks = [(s, cfg_dict, m) for m in modes for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, *zip(*tasks)))
    else:
        results = [_run_one(*task) for task in tasks]

    rows = []
    for m in modes:
        runs = [r for r in results if r["mode"] == m]
        rows.append(_summarise(m, runs, cfg.steps_total))
        log.info("mode %s: psnr %s", m, rows[-1]["psnr_mask"])
    failures = [r for r in results if "error" in r]
    per_seed = [
        {k: r[k] for k in ("seed", "mode", "psnr_mask", "ssim", "total")} | {"final_correct": r["curve"][-1]}
        for r in results
        if "error" not in r
    ]
    return {
        "schema_version": SCHEMA_VERSION,
        "steps_total": cfg.steps_total,
        "config": cfg_dict,
        "seeds": seeds,
        "rows": rows,
        "runs": per_seed,
        "failures": failures,
    }


def empty_report(cfg: GuidanceConfig | None = None) -> dict:
    cfg = cfg or GuidanceConfig()
    return {
        "schema_version": SCHEMA_VERSION,
        "steps_total": cfg.steps_total,
        "config": asdict(cfg),
        "seeds": [],
        "rows": [],
        "runs": [],
        "failures": [],
    }


def _csv_row(row: dict) -> dict:
    out = {k: row.get(k) for k in CSV_FIELDS if not k.startswith("time_") and k != "correct_curve"}
    for k in TIMING_KEYS:
        out[f"time_{k}"] = row.get("timing", {}).get(k)
    out["correct_curve"] = row.get("correct_curve", [])
    # json gives shortest round-trip float text and "null" for missing values
    return {k: v if k == "mode" else json.dumps(v) for k, v in out.items()}


def emit_report(report: dict, path, fmt: str = "json") -> Path:
    """Write the report as sorted-key JSON, or as CSV with one row per mode."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema_version={report['schema_version']}\n")
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in report["rows"]:
                writer.writerow(_csv_row(row))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report_csv(path) -> list[dict]:
    """Parse a CSV report back into per-mode rows (timing re-nested)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for raw in csv.DictReader(lines):
        vals = {k: v if k == "mode" else json.loads(v) for k, v in raw.items()}
        vals["timing"] = {k: vals.pop(f"time_{k}") for k in TIMING_KEYS}
        rows.append(vals)
    return rows
