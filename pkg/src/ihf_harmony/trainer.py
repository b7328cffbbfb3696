"""Unpaired training loop and the IHFCKPT1 checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import normalize_intensity, read_manifest, read_volume, volume_slices
from .encoder import DEFAULT_SEED, DEFAULT_WIDTHS, FixedEncoder, artefact_embedding, template_embedding
from .flow import FlowConfig, FlowParams, harmonize, init_params
from .losses import AC_STAGE, LossWeights, sample_patch_locations, total_loss
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import NonFiniteError, Tape, Tensor, backward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"IHFCKPT1"
CKPT_VERSION = 1
GRAD_CLIP = 5.0


class CheckpointError(ValueError):
    pass


class BadCheckpointMagic(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss; ``last_good`` holds the last finite checkpoint."""

    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    manifest: str = "data/manifest.jsonl"
    out_dir: str = "runs/default"
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    steps_per_epoch: int | None = None
    checkpoint_interval: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    flow: FlowConfig = field(default_factory=FlowConfig)
    encoder_seed: int = DEFAULT_SEED
    encoder_widths: tuple = DEFAULT_WIDTHS

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")
        self.weights.validate()
        self.flow.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["flow"] = FlowConfig(**d.get("flow", {}))
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


@dataclass
class Checkpoint:
    flow: FlowConfig
    params: FlowParams
    encoder_seed: int = DEFAULT_SEED
    encoder_widths: tuple = DEFAULT_WIDTHS
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    train_config: dict = field(default_factory=dict)
    templates: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def encoder(self) -> FixedEncoder:
        return FixedEncoder(self.encoder_seed, self.encoder_widths)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """magic | u32 header length | JSON header | little-endian float32 blobs."""
    blobs, table, offset = [], [], 0

    def add(kind, name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"kind": kind, "name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name, t in ckpt.params.items():
        add("param", name, t.data)
    for name in ckpt.params:
        if name in ckpt.adam.m:
            add("adam_m", name, ckpt.adam.m[name])
            add("adam_v", name, ckpt.adam.v[name])
    for site, emb in sorted(ckpt.templates.items()):
        add("template", str(site), emb)
    header = {
        "version": ckpt.version,
        "flow": ckpt.flow.to_dict(),
        "encoder": {"seed": ckpt.encoder_seed, "widths": list(ckpt.encoder_widths)},
        "adam": {"beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "step": ckpt.adam.step},
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "train_config": ckpt.train_config,
        "tensors": table,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise BadCheckpointMagic(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise ShapeTableError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeTableError(f"{path}: unreadable header ({exc})") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {header.get('version')} != {CKPT_VERSION}")
    payload = raw[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ShapeTableError(
            f"{path}: shape table needs {header['payload_bytes']} payload bytes, found {len(payload)}")
    params, m, v, templates = {}, {}, {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise ShapeTableError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        arr = arr.astype(np.float32)
        kind, name = entry["kind"], entry["name"]
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif kind == "adam_m":
            m[name] = arr
        elif kind == "adam_v":
            v[name] = arr
        elif kind == "template":
            templates[int(name)] = arr
    flow = FlowConfig(**header["flow"])
    expected = init_params(flow, dtype=np.float32)
    for name, t in expected.items():
        if name not in params or params[name].shape != t.shape:
            raise ShapeTableError(f"{path}: parameter {name} missing or mis-shaped for the stored config")
    a = header["adam"]
    adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"], m=m, v=v)
    enc = header["encoder"]
    return Checkpoint(flow=flow, params=FlowParams(params), encoder_seed=enc["seed"],
                      encoder_widths=tuple(enc["widths"]), adam=adam, step=header["step"],
                      epoch=header["epoch"], history=header["history"],
                      train_config=header["train_config"], templates=templates,
                      version=header["version"])


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------


class SliceBank:
    """Normalized 2.5D stacks of one split, grouped by site."""

    def __init__(self, manifest, split: str = "train"):
        records = read_manifest(manifest) if not isinstance(manifest, list) else manifest
        records = [r for r in records if r["split"] == split]
        if not records:
            raise ValueError(f"manifest has no {split!r} records")
        by_site: dict[int, list[np.ndarray]] = {}
        for r in records:
            vol = normalize_intensity(read_volume(r["abspath"]).data)
            by_site.setdefault(int(r["site"]), []).append(volume_slices(vol))
        self.sites = sorted(by_site)
        self.stacks = {s: np.stack(v) for s, v in by_site.items()}   # (V, D, 3, H, W)

    @property
    def n_slices(self) -> int:
        return int(sum(a.shape[0] * a.shape[1] for a in self.stacks.values()))

    def site_images(self, site: int) -> np.ndarray:
        a = self.stacks[site]
        return a.reshape((-1,) + a.shape[2:])

    @property
    def depth(self) -> int:
        return next(iter(self.stacks.values())).shape[1]

    def draw(self, rng: np.random.Generator, site: int, index: int | None = None) -> np.ndarray:
        a = self.stacks[site]
        index = rng.integers(a.shape[1]) if index is None else index
        return a[rng.integers(a.shape[0]), index]


def sample_unpaired_batch(bank: SliceBank, rng: np.random.Generator, batch_size: int,
                          match_depth: bool = True):
    """Independent uniform source and target sites per element (same-site allowed).

    Source and target subjects are drawn independently (unpaired); with
    ``match_depth`` the target slice comes from the same slice position.
    """
    if len(bank.sites) < 2:
        raise ValueError(f"unpaired sampling needs >= 2 sites, manifest has {len(bank.sites)}")
    src = rng.integers(len(bank.sites), size=batch_size)
    tgt = rng.integers(len(bank.sites), size=batch_size)
    xs, ys = [], []
    for s, t in zip(src, tgt):
        depth = int(rng.integers(bank.depth))
        xs.append(bank.draw(rng, bank.sites[s], depth))
        ys.append(bank.draw(rng, bank.sites[t], depth if match_depth else None))
    labels = np.stack([np.asarray(bank.sites)[src], np.asarray(bank.sites)[tgt]], axis=1)
    return np.stack(xs), np.stack(ys), labels


def site_templates(bank: SliceBank, encoder: FixedEncoder) -> dict[int, np.ndarray]:
    """Per-site, per-slice-position templates: (D, embedding) arrays."""
    return {s: np.stack([template_embedding(bank.stacks[s][:, d], encoder) for d in range(bank.depth)])
            for s in bank.sites}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def clone_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    adam = AdamState(ckpt.adam.beta1, ckpt.adam.beta2, ckpt.adam.eps, ckpt.adam.step,
                     {k: v.copy() for k, v in ckpt.adam.m.items()},
                     {k: v.copy() for k, v in ckpt.adam.v.items()})
    return Checkpoint(flow=ckpt.flow, params=ckpt.params.copy(), encoder_seed=ckpt.encoder_seed,
                      encoder_widths=ckpt.encoder_widths, adam=adam, step=ckpt.step, epoch=ckpt.epoch,
                      history=[dict(h) for h in ckpt.history], train_config=dict(ckpt.train_config),
                      templates={k: v.copy() for k, v in ckpt.templates.items()}, version=ckpt.version)


def new_checkpoint(config: TrainConfig) -> Checkpoint:
    return Checkpoint(flow=config.flow, params=init_params(config.flow, seed=config.seed),
                      encoder_seed=config.encoder_seed, encoder_widths=tuple(config.encoder_widths),
                      train_config=config.to_dict())


def train_step(ckpt: Checkpoint, encoder: FixedEncoder, x: np.ndarray, y: np.ndarray,
               weights: LossWeights, lr: float, rng: np.random.Generator) -> dict:
    """One ADAM step on a batch; returns the loss breakdown."""
    z_s = artefact_embedding(y, encoder)
    feat_hw = (x.shape[-2] // 4, x.shape[-1] // 4)
    locations = sample_patch_locations(rng, *feat_hw)
    for t in ckpt.params.values():
        t.grad = None
    with Tape() as tape:
        x_hat = harmonize(x, z_s, ckpt.params, ckpt.flow)
        loss, parts = total_loss(x, x_hat, y, encoder, weights, locations=locations)
    if not math.isfinite(parts["total"]):
        raise NonFiniteError("non-finite loss")
    grads = backward(tape, loss)
    named = {t.name: g for t, g in grads.items()}
    parts["grad_norm"] = clip_grad_norm(named, GRAD_CLIP)
    adam_step(ckpt.params.tensors, named, ckpt.adam, lr)
    ckpt.step += 1
    return parts


def train(config: TrainConfig, resume: Checkpoint | None = None, bank: SliceBank | None = None,
          log_path=None, save: bool = True) -> Checkpoint:
    """Train until ``config.epochs`` total epochs; resumes from ``resume`` if given.

    Batches of epoch ``e`` are drawn from ``default_rng([seed, e])`` so a
    resumed run follows the same trajectory as an uninterrupted one.
    """
    config.validate()
    ckpt = resume if resume is not None else new_checkpoint(config)
    encoder = ckpt.encoder()
    bank = bank if bank is not None else SliceBank(config.manifest, "train")
    steps = config.steps_per_epoch or math.ceil(bank.n_slices / config.batch_size)
    out = Path(config.out_dir)
    if save:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path or out / "train_log.jsonl", "a") if save else None
    last_good = clone_checkpoint(ckpt)
    try:
        for epoch in range(ckpt.epoch, config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            t0 = time.perf_counter()
            sums = {"ac": 0.0, "art": 0.0, "total": 0.0}
            for _ in range(steps):
                x, y, _ = sample_unpaired_batch(bank, rng, config.batch_size)
                try:
                    parts = train_step(ckpt, encoder, x, y, config.weights, config.lr, rng)
                except NonFiniteError as exc:
                    raise TrainingAborted(f"epoch {epoch}: {exc}", last_good) from exc
                for k in sums:
                    sums[k] += parts[k]
            ckpt.epoch = epoch + 1
            entry = {"epoch": ckpt.epoch, "step": ckpt.step,
                     **{k: v / steps for k, v in sums.items()},
                     "wall_time": round(time.perf_counter() - t0, 3)}
            ckpt.history.append(entry)
            log.info("epoch %d  L_ac %.5f  L_art %.5f  total %.5f  (%.1fs)", entry["epoch"],
                     entry["ac"], entry["art"], entry["total"], entry["wall_time"])
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if save and config.checkpoint_interval and ckpt.epoch % config.checkpoint_interval == 0:
                save_checkpoint(out / f"checkpoint_e{ckpt.epoch:04d}.ihfc", ckpt)
                last_good = clone_checkpoint(ckpt)
    finally:
        if log_fh:
            log_fh.close()
    ckpt.templates = site_templates(bank, encoder)
    ckpt.train_config = config.to_dict()
    if save:
        save_checkpoint(out / "checkpoint.ihfc", ckpt)
    return ckpt
