"""Synthetic multi-site phantoms, the IHV volume format and 2.5D slicing.

An anatomy phantom is a smooth nested-ellipsoid head with three tissue
classes (0.2 / 0.5 / 0.8) and a seeded deformation.  A site renders it as::

    clamp(gain * phantom**gamma + offset + bias(x, y) + noise, 0, 1)

Rendering one phantom under two sites yields a traveling-subject pair with
identical anatomy, which is what the evaluation uses as ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TISSUE_LEVELS = (0.2, 0.5, 0.8)
DEFAULT_SHAPE = (16, 64, 64)
SPLIT_FRACTIONS = (("train", 0.7), ("val", 0.1), ("test", 0.2))

IHV_MAGIC = b"IHV1"
IHV_FLOAT32 = 1


class VolumeFormatError(ValueError):
    """Base class for malformed IHV files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class DtypeMismatchError(VolumeFormatError):
    pass


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------


@dataclass
class AnatomyPhantom:
    data: np.ndarray      # (D, H, W) float32 in [0, 1]
    labels: np.ndarray    # (D, H, W) uint8 tissue class, 0 = background
    seed: int


def _soft_inside(r: np.ndarray, width: float) -> np.ndarray:
    # 1 inside (r < 1), 0 outside, smooth over ~width
    return 0.5 * (1.0 - np.tanh((r - 1.0) / width))


def generate_phantom(seed: int, shape: tuple = DEFAULT_SHAPE) -> AnatomyPhantom:
    """Deterministic head-like phantom for subject ``seed``."""
    rng = np.random.default_rng([int(seed), 7])
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w),
                             indexing="ij")
    theta = rng.uniform(-0.3, 0.3)
    cy, cx = rng.uniform(-0.06, 0.06, size=2)
    yr = np.cos(theta) * (yy - cy) - np.sin(theta) * (xx - cx)
    xr = np.sin(theta) * (yy - cy) + np.cos(theta) * (xx - cx)

    # smooth seeded deformation: a few low-frequency sinusoids
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.01, 0.04)
        yr, xr = (yr + amp * np.sin(np.pi * fx * xr + px),
                  xr + amp * np.sin(np.pi * fy * yr + py))

    angle = np.arctan2(yr, xr)
    radius_scale = rng.uniform(0.9, 1.05)
    ry, rx, rz = 0.9 * radius_scale, 0.76 * radius_scale, rng.uniform(1.15, 1.3)
    r_head = np.sqrt((yr / ry) ** 2 + (xr / rx) ** 2 + (zz / rz) ** 2)

    # cortical folding: angular harmonics modulate the inner boundaries
    folds = np.zeros_like(angle)
    for m in (5, 7, 11):
        folds += rng.uniform(0.02, 0.05) * np.cos(m * angle + rng.uniform(0, 2 * np.pi))
    r_gm = r_head / (0.86 + folds * 0.6)
    r_wm = r_head / (0.62 + folds)

    shell = _soft_inside(r_head, 0.03)
    gm = _soft_inside(r_gm, 0.04)
    wm = _soft_inside(r_wm, 0.05)
    vol = TISSUE_LEVELS[0] * shell + (TISSUE_LEVELS[1] - TISSUE_LEVELS[0]) * gm \
        + (TISSUE_LEVELS[2] - TISSUE_LEVELS[1]) * wm

    # ventricles: two small ellipsoids carved back to the lowest tissue level
    vent = np.zeros_like(vol)
    spread = rng.uniform(0.08, 0.14)
    for side in (-1.0, 1.0):
        vy, vx = rng.uniform(-0.05, 0.05), side * spread
        r_v = np.sqrt(((yr - vy) / rng.uniform(0.18, 0.26)) ** 2 + ((xr - vx) / rng.uniform(0.05, 0.08)) ** 2
                      + (zz / rng.uniform(0.4, 0.6)) ** 2)
        vent = np.maximum(vent, _soft_inside(r_v, 0.08))
    vol = vol - vent * np.clip(vol - TISSUE_LEVELS[0], 0.0, None)

    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    labels = np.zeros(shape, dtype=np.uint8)
    for cls, level in enumerate(TISSUE_LEVELS, start=1):
        lo = (level + (TISSUE_LEVELS[cls - 2] if cls > 1 else 0.0)) / 2
        labels[vol >= lo] = cls
    return AnatomyPhantom(vol, labels, int(seed))


# ---------------------------------------------------------------------------
# site rendering
# ---------------------------------------------------------------------------


@dataclass
class SiteProfile:
    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> "SiteProfile":
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.gain <= 0:
            raise ValueError(f"gain must be > 0, got {self.gain}")
        if self.bias_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("bias amplitude and noise sigma must be >= 0")
        return self


DEFAULT_SITES = (
    SiteProfile(gamma=1.0, gain=1.0, offset=0.0, bias_amplitude=0.02, noise_sigma=0.01, seed=101),
    SiteProfile(gamma=0.6, gain=0.85, offset=0.05, bias_amplitude=0.04, noise_sigma=0.015, seed=202),
    SiteProfile(gamma=1.6, gain=1.1, offset=0.02, bias_amplitude=0.03, noise_sigma=0.01, seed=303),
)


@dataclass
class Volume:
    data: np.ndarray              # (D, H, W) float32
    subject_seed: int = -1
    site: int = -1

    @property
    def shape(self):
        return self.data.shape


def bias_field(profile: SiteProfile, height: int, width: int) -> np.ndarray:
    """Site-specific quadratic field scaled so its peak magnitude is the amplitude."""
    if profile.bias_amplitude == 0:
        return np.zeros((height, width))
    rng = np.random.default_rng([int(profile.seed), 11])
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    c = rng.uniform(-1, 1, size=5)
    poly = c[0] * xx + c[1] * yy + c[2] * xx * yy + c[3] * xx ** 2 + c[4] * yy ** 2
    return profile.bias_amplitude * poly / np.abs(poly).max()


def render_site(phantom: AnatomyPhantom, profile: SiteProfile, site: int = -1) -> Volume:
    """Apply one site's intensity response, bias field and noise to a phantom."""
    profile.validate()
    p = phantom.data.astype(np.float64)
    v = profile.gain * p ** profile.gamma + profile.offset
    v = v + bias_field(profile, *p.shape[1:])[None]
    if profile.noise_sigma > 0:
        rng = np.random.default_rng([int(profile.seed), int(phantom.seed), 13])
        v = v + rng.normal(0.0, profile.noise_sigma, size=p.shape)
    v = np.clip(v, 0.0, 1.0).astype(np.float32)
    return Volume(v, phantom.seed, site)


# ---------------------------------------------------------------------------
# normalization and slicing
# ---------------------------------------------------------------------------


def normalize_intensity(image) -> np.ndarray:
    """Per-volume linear map of [min, max] onto [-1, 1]."""
    a = np.asarray(image, dtype=np.float32)
    lo, hi = float(a.min()), float(a.max())
    if not hi > lo:
        raise ValueError("cannot normalize a constant volume")
    out = (a - lo) * np.float32(2.0 / (hi - lo)) - np.float32(1.0)
    out[a == lo] = -1.0
    out[a == hi] = 1.0
    return out


def to_unit_range(image) -> np.ndarray:
    """Per-volume min-max rescale to [0, 1] (the metric convention)."""
    return (normalize_intensity(image) + np.float32(1.0)) * np.float32(0.5)


def slice_25d(volume, index: int) -> np.ndarray:
    """(3, H, W) stack of slices index-1, index, index+1 with edge replication."""
    v = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    d = v.shape[0]
    if not 0 <= index < d:
        raise IndexError(f"slice index {index} out of range for depth {d}")
    ids = [max(index - 1, 0), index, min(index + 1, d - 1)]
    return np.ascontiguousarray(v[ids])


def volume_slices(volume) -> np.ndarray:
    """All 2.5D stacks of a volume: (D, 3, H, W)."""
    v = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return np.stack([slice_25d(v, i) for i in range(v.shape[0])])


# ---------------------------------------------------------------------------
# IHV format
# ---------------------------------------------------------------------------


def write_volume(path, volume) -> Path:
    path = Path(path)
    data = np.ascontiguousarray(volume.data if isinstance(volume, Volume) else volume, dtype="<f4")
    header = IHV_MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape) \
        + struct.pack("<I", IHV_FLOAT32)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc.strerror}") from exc
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != IHV_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {IHV_MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedVolumeError(f"{path}: header truncated")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    head = 8 + 4 * ndim + 4
    if len(raw) < head:
        raise TruncatedVolumeError(f"{path}: header truncated")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    (dtype,) = struct.unpack_from("<I", raw, 8 + 4 * ndim)
    if dtype != IHV_FLOAT32:
        raise DtypeMismatchError(f"{path}: dtype code {dtype}, only 1 (float32) is supported")
    expected = int(np.prod(shape)) * 4
    if len(raw) - head != expected:
        raise TruncatedVolumeError(
            f"{path}: header dims {shape} need {expected} payload bytes, found {len(raw) - head}")
    data = np.frombuffer(raw, dtype="<f4", offset=head).reshape(shape).astype(np.float32)
    return Volume(data)


def write_pgm(path, image) -> Path:
    """8-bit binary PGM of a 2-D slice; values rescaled from their own range."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    out_dir: str = "data"
    subjects_per_site: int = 20
    seed: int = 0
    shape: tuple = DEFAULT_SHAPE
    sites: list = field(default_factory=lambda: [asdict(s) for s in DEFAULT_SITES])

    def profiles(self) -> list[SiteProfile]:
        return [SiteProfile(**s).validate() for s in self.sites]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d


def subject_seed(base: int, site: int, index: int) -> int:
    return int(base) * 100_000 + site * 1000 + index


def split_of(index: int, count: int) -> str:
    n_train = int(round(count * SPLIT_FRACTIONS[0][1]))
    n_val = int(round(count * SPLIT_FRACTIONS[1][1]))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def make_dataset(config: DatasetConfig) -> Path:
    """Render every (site, subject) volume and write ``manifest.jsonl``.

    Returns the manifest path.  Output is a pure function of the config.
    """
    out = Path(config.out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    profiles = config.profiles()
    records = []
    for site, profile in enumerate(profiles):
        for i in range(config.subjects_per_site):
            seed = subject_seed(config.seed, site, i)
            vol = render_site(generate_phantom(seed, tuple(config.shape)), profile, site)
            rel = f"volumes/site{site}_sub{seed}.ihv"
            write_volume(out / rel, vol)
            records.append({"path": rel, "site": site, "seed": seed, "subject": f"{site}-{seed}",
                            "split": split_of(i, config.subjects_per_site)})
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(_dump_json(r) + "\n" for r in records))
    meta = config.to_dict()
    del meta["out_dir"]  # keep the directory relocatable and byte-identical across locations
    (out / "dataset.json").write_text(_dump_json(meta) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    """Records of a JSON-lines manifest with ``path`` resolved against its directory."""
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        rec["abspath"] = str((path.parent / rec["path"]).resolve())
        records.append(rec)
    return records


def write_manifest(path, records) -> Path:
    path = Path(path)
    clean = [{k: v for k, v in r.items() if k != "abspath"} for r in records]
    path.write_text("".join(_dump_json(r) + "\n" for r in clean))
    return path


def load_dataset_config(manifest_path) -> DatasetConfig:
    meta = json.loads((Path(manifest_path).parent / "dataset.json").read_text())
    meta["shape"] = tuple(meta["shape"])
    meta["out_dir"] = str(Path(manifest_path).parent)
    return DatasetConfig(**meta)


def render_reference(manifest_path, target_site: int, split: str = "test",
                     out_dir=None) -> list[dict]:
    """Ground-truth renders of ``split`` subjects under ``target_site``.

    Returns records carrying the rendered ``volume`` in memory; when
    ``out_dir`` is given the volumes are also written with a manifest
    ``reference_site{t}.jsonl`` keyed by the same ``subject`` ids.
    """
    cfg = load_dataset_config(manifest_path)
    profiles = cfg.profiles()
    if not 0 <= target_site < len(profiles):
        raise ValueError(f"unknown site {target_site}; known sites: {list(range(len(profiles)))}")
    out = []
    for rec in read_manifest(manifest_path):
        if rec["split"] != split:
            continue
        vol = render_site(generate_phantom(rec["seed"], tuple(cfg.shape)), profiles[target_site], target_site)
        out.append({"subject": rec["subject"], "seed": rec["seed"], "site": target_site,
                    "source_site": rec["site"], "volume": vol,
                    "path": f"reference_site{target_site}/{rec['subject']}.ihv"})
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / f"reference_site{target_site}").mkdir(parents=True, exist_ok=True)
        for r in out:
            write_volume(out_dir / r["path"], r["volume"])
        write_manifest(out_dir / f"reference_site{target_site}.jsonl",
                       [{k: v for k, v in r.items() if k != "volume"} for r in out])
    return out
