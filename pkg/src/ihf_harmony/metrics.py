"""Image-quality and distribution metrics plus the paired evaluation report.

All image metrics expect intensities on the unit range [0, 1].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from . import _kernels
from .data import read_manifest, read_volume, to_unit_range, volume_slices
from .encoder import FixedEncoder
from .tensor import no_tape

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
KDE_GRID = np.linspace(0.0, 1.0, 256)
KDE_MIN_SAMPLES = 100
KDE_FALLBACK_BW = 1e-3
METRICS = ("rmse", "psnr", "ms_ssim", "perceptual")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio on unit range, capped at 99 dB."""
    e = rmse(a, b)
    if e < 1e-5:
        return PSNR_CAP
    return float(-20.0 * np.log10(e))


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM
# ---------------------------------------------------------------------------


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, g.size, axis=-1) @ g
    return sliding_window_view(x, g.size, axis=-2) @ g


def _ssim_components(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over the valid window positions."""
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * sab + SSIM_C2) / (saa + sbb + SSIM_C2)
    lum = (2 * mu_a * mu_b + SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + SSIM_C1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a, b) -> float:
    """Single-scale SSIM of two 2-D images."""
    a, b = _pair(a, b)
    return _ssim_components(a, b)[0]


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(height: int, width: int) -> int:
    side = min(height, width)
    s = 1
    while s < len(MS_SSIM_WEIGHTS) and side >= SSIM_WINDOW * 2 ** s:
        s += 1
    return s


def _ms_ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    scales = ms_ssim_scales(*a.shape)
    if scales < 2:
        raise ValueError(f"image {a.shape} too small for two MS-SSIM scales (need >= {2 * SSIM_WINDOW})")
    w = np.asarray(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    value = 1.0
    for j in range(scales):
        s, cs = _ssim_components(a, b)
        if j == scales - 1:
            value *= max(s, 0.0) ** w[j]
        else:
            value *= max(cs, 0.0) ** w[j]
            a, b = _downsample(a), _downsample(b)
    return float(value)


def ms_ssim(a, b) -> float:
    """Multi-scale SSIM; stacks (..., H, W) are averaged over their 2-D images."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return _ms_ssim_2d(a, b)
    flat_a = a.reshape((-1,) + a.shape[-2:])
    flat_b = b.reshape((-1,) + b.shape[-2:])
    return float(np.mean([_ms_ssim_2d(x, y) for x, y in zip(flat_a, flat_b)]))


# ---------------------------------------------------------------------------
# perceptual feature distance
# ---------------------------------------------------------------------------


def perceptual_distance(a, b, encoder: FixedEncoder, chunk: int = 32) -> float:
    """Mean over encoder stages of the mean squared distance between unit-normalized
    per-position feature vectors.  Inputs are (3, H, W) or (N, 3, H, W) on [0, 1].

    Stands in for LPIPS; it is not LPIPS.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    totals = np.zeros(len(encoder.widths))
    for i in range(0, len(a), chunk):
        xa = (2.0 * a[i:i + chunk] - 1.0).astype(np.float32)
        xb = (2.0 * b[i:i + chunk] - 1.0).astype(np.float32)
        with no_tape():
            fa, fb = encoder.stages(xa), encoder.stages(xb)
        for s, (u, v) in enumerate(zip(fa, fb)):
            u = u.data.astype(np.float64)
            v = v.data.astype(np.float64)
            u = u / np.sqrt((u * u).sum(axis=1, keepdims=True) + 1e-10)
            v = v / np.sqrt((v * v).sum(axis=1, keepdims=True) + 1e-10)
            totals[s] += ((u - v) ** 2).sum(axis=1).mean(axis=(1, 2)).sum()
    return float(np.mean(totals / len(a)))


# ---------------------------------------------------------------------------
# KDE
# ---------------------------------------------------------------------------


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(np.std(x), (q75 - q25) / 1.34)
    h = 0.9 * spread * x.size ** (-0.2)
    return float(h) if h > 0 else KDE_FALLBACK_BW


def _subsample(x: np.ndarray, limit: int) -> np.ndarray:
    if x.size <= limit:
        return x
    idx = np.random.default_rng(0).choice(x.size, size=limit, replace=False)
    return x[np.sort(idx)]


def kde_density(samples, grid: np.ndarray = KDE_GRID, max_samples: int = 20000) -> np.ndarray:
    """Gaussian KDE (Silverman bandwidth) on ``grid``, renormalized to unit mass."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < KDE_MIN_SAMPLES:
        raise ValueError(f"KDE needs at least {KDE_MIN_SAMPLES} samples, got {x.size}")
    x = _subsample(x, max_samples)
    dens = _kernels.kde_grid(x, grid, silverman_bandwidth(x))
    mass = np.trapezoid(dens, grid)
    return dens / mass if mass > 0 else dens


def kde_distance(samples_a, samples_b, grid: np.ndarray = KDE_GRID) -> float:
    """L1 distance between the two normalized KDE curves (0 ... 2)."""
    pa, pb = kde_density(samples_a, grid), kde_density(samples_b, grid)
    return float(np.trapezoid(np.abs(pa - pb), grid))


# ---------------------------------------------------------------------------
# significance
# ---------------------------------------------------------------------------


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_ttest(values_a, values_b) -> TTestResult:
    """Paired two-sided t-test; zero-variance differences give p=1 flagged degenerate."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_ttest needs two equal-length 1-D samples of size >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        return TTestResult(0.0, 1.0, True)
    t = d.mean() / (sd / math.sqrt(d.size))
    p = 2.0 * stats.t.sf(abs(t), df=d.size - 1)
    return TTestResult(float(t), float(p))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def volume_metrics(pred: np.ndarray, ref: np.ndarray, encoder: FixedEncoder) -> dict:
    """All per-image metrics between two (D, H, W) volumes after unit rescaling."""
    a, b = to_unit_range(pred), to_unit_range(ref)
    return {
        "rmse": rmse(a, b),
        "psnr": psnr(a, b),
        "ms_ssim": ms_ssim(a, b),
        "perceptual": perceptual_distance(volume_slices(a), volume_slices(b), encoder),
    }


@dataclass
class MetricReport:
    label: str
    rows: list = field(default_factory=list)      # dicts: subject + METRICS
    kde: float | None = None
    pvalues: dict = field(default_factory=dict)

    def column(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.column(metric).mean())

    def se(self, metric: str) -> float:
        col = self.column(metric)
        return float(col.std(ddof=1) / math.sqrt(col.size)) if col.size > 1 else 0.0

    def aggregate(self) -> dict:
        return {m: (self.mean(m), self.se(m)) for m in METRICS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["subject", *METRICS, *(f"{m}_se" for m in METRICS)]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r.get(k, "") for k in fields if not k.endswith("_se")})
        agg = {"subject": "aggregate"}
        for m in METRICS:
            agg[m], agg[f"{m}_se"] = self.aggregate()[m]
        w.writerow(agg)
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"method: {self.label}", f"{'subject':<16}" + "".join(f"{m:>14}" for m in METRICS)]
        for r in self.rows:
            lines.append(f"{r['subject']:<16}" + "".join(f"{r[m]:>14.4f}" for m in METRICS))
        agg = self.aggregate()
        lines.append(f"{'mean±se':<16}" + "".join(f"{agg[m][0]:>8.4f}±{agg[m][1]:<5.4f}" for m in METRICS))
        if self.kde is not None:
            lines.append(f"KDE L1 distance to reference pool: {self.kde:.4f}")
        for m, p in self.pvalues.items():
            lines.append(f"paired t-test {m}: p = {p:.3g}")
        return "\n".join(lines)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_table() + "\n")
        return csv_path, txt_path

    @classmethod
    def from_csv(cls, path, label: str | None = None) -> "MetricReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["subject"] == "aggregate":
                    continue
                rows.append({"subject": rec["subject"], **{m: float(rec[m]) for m in METRICS}})
        return cls(label or Path(path).stem, rows)


def evaluate_pairs(preds: dict, refs: dict, encoder: FixedEncoder, label: str = "method",
                   with_kde: bool = True) -> MetricReport:
    """Per-subject metrics for {subject: volume} dicts paired by key."""
    if not refs:
        raise ValueError("no reference subjects to evaluate")
    missing = sorted(set(refs) - set(preds))
    if missing:
        raise KeyError(f"no prediction for subject {missing[0]}")
    extra = sorted(set(preds) - set(refs))
    if extra:
        raise KeyError(f"no reference for subject {extra[0]}")
    report = MetricReport(label)
    for subject in sorted(refs):
        report.rows.append({"subject": subject, **volume_metrics(preds[subject], refs[subject], encoder)})
    if with_kde:
        report.kde = kde_distance(np.concatenate([to_unit_range(preds[s]).ravel() for s in sorted(refs)]),
                                  np.concatenate([to_unit_range(refs[s]).ravel() for s in sorted(refs)]))
    return report


def _select(records: list[dict], split: str | None, sites) -> list[dict]:
    if split is not None:
        records = [r for r in records if r.get("split", split) == split]
    if sites is not None:
        records = [r for r in records if r.get("source_site", r.get("site")) in sites]
    return records


def evaluate_run(pred_manifest, ref_manifest, encoder: FixedEncoder | None = None,
                 label: str | None = None, split: str | None = None, sites=None) -> MetricReport:
    """Pair prediction and reference manifests by ``subject`` and score every pair.

    ``split`` and ``sites`` restrict both manifests before pairing; a
    reference record's site is its ``source_site`` when present.
    """
    encoder = encoder or FixedEncoder()
    preds = {r["subject"]: read_volume(r["abspath"]).data
             for r in _select(read_manifest(pred_manifest), split, sites)}
    refs = {r["subject"]: read_volume(r["abspath"]).data
            for r in _select(read_manifest(ref_manifest), split, sites)}
    return evaluate_pairs(preds, refs, encoder, label or Path(pred_manifest).stem)


def compare_reports(a: MetricReport, b: MetricReport) -> dict[str, TTestResult]:
    """Paired t-tests per metric between two reports over the same subjects."""
    sa = {r["subject"]: r for r in a.rows}
    sb = {r["subject"]: r for r in b.rows}
    common = sorted(set(sa) & set(sb))
    if len(common) < 2:
        raise ValueError("reports share fewer than two subjects")
    return {m: paired_ttest([sa[s][m] for s in common], [sb[s][m] for s in common]) for m in METRICS}
