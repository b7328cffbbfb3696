"""Command-line entry point: ``ihf-harmony {gen-data,train,harmonize,evaluate,verify}``.

Configuration comes from an optional YAML file with sections ``data``,
``train``, ``loss`` and ``flow``; explicit flags (and ``--set
section.key=value``) override it.  Exit codes: 0 success, 1 usage or
configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from .data import (
    DatasetConfig,
    make_dataset,
    read_manifest,
    read_volume,
    render_reference,
    write_manifest,
    write_volume,
)
from .flow import FlowConfig
from .losses import LossWeights
from .metrics import MetricReport, compare_reports, evaluate_run
from .pipeline import UnknownSiteError, harmonize_volume, site_embeddings, volume_embeddings
from .trainer import CheckpointError, TrainConfig, TrainingAborted, load_checkpoint, train
from .verify import format_results, run_suite

log = logging.getLogger("ihf_harmony")

TRAIN_KEYS = ("manifest", "out_dir", "epochs", "batch_size", "lr", "seed", "steps_per_epoch",
              "checkpoint_interval", "encoder_seed", "encoder_widths")


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    train = TrainConfig()
    return {
        "data": DatasetConfig().to_dict(),
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in train.to_dict().items() if k in TRAIN_KEYS},
        "loss": asdict(LossWeights()),
        "flow": FlowConfig().to_dict(),
    }


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    for key, value in override.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in out:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(out[key], dict) and key != "sites":
            out[key] = merge_config(out[key], value, path)
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return doc or {}


def parse_set(items) -> dict:
    """``["train.lr=1e-3", ...]`` -> nested override dict."""
    out: dict = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve_config(args, flag_overrides: dict) -> dict:
    cfg = merge_config(default_config(), load_config_file(args.config))
    cfg = merge_config(cfg, parse_set(args.set))
    return merge_config(cfg, {s: {k: v for k, v in d.items() if v is not None}
                              for s, d in flag_overrides.items()})


def dataset_config(cfg: dict) -> DatasetConfig:
    d = dict(cfg["data"])
    d["shape"] = tuple(d["shape"])
    dc = DatasetConfig(**d)
    try:
        dc.profiles()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid site profile: {exc}") from exc
    if dc.subjects_per_site < 1:
        raise ConfigError("data.subjects_per_site must be positive")
    return dc


def train_config(cfg: dict) -> TrainConfig:
    d = {k: cfg["train"][k] for k in TRAIN_KEYS}
    d["weights"] = cfg["loss"]
    d["flow"] = cfg["flow"]
    try:
        return TrainConfig.from_dict(d).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def echo_config(cfg: dict, out_dir, name: str = "config.yaml") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    print(f"effective config: {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, {"data": {"out_dir": args.out, "subjects_per_site": args.subjects,
                                         "seed": args.seed}})
    dc = dataset_config(cfg)
    out = Path(dc.out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist: {out.parent}")
    manifest = make_dataset(dc)
    echo_config(cfg, out)
    records = read_manifest(manifest)
    counts = {s: sum(r["site"] == s for r in records) for s in range(len(dc.sites))}
    print(f"manifest: {manifest}")
    print("volumes per site: " + ", ".join(f"site{s}={n}" for s, n in counts.items()))
    if args.paired_target is not None:
        refs = render_reference(manifest, args.paired_target, split="test", out_dir=out)
        print(f"reference renders: {out / f'reference_site{args.paired_target}.jsonl'} ({len(refs)} volumes)")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, {
        "train": {"manifest": args.manifest, "out_dir": args.out, "epochs": args.epochs,
                  "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed,
                  "steps_per_epoch": args.steps_per_epoch,
                  "checkpoint_interval": args.checkpoint_interval},
        "loss": {"lambda_ac": args.lambda_ac, "lambda_art": args.lambda_art},
        "flow": {"levels": args.levels, "splits": args.splits},
    })
    tc = train_config(cfg)
    if not Path(tc.manifest).exists():
        raise FileNotFoundError(f"manifest not found: {tc.manifest}")
    resume = load_checkpoint(args.resume) if args.resume else None
    echo_config(cfg, tc.out_dir)
    try:
        ckpt = train(tc, resume=resume)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    print(f"checkpoint: {Path(tc.out_dir) / 'checkpoint.ihfc'} (epoch {ckpt.epoch}, step {ckpt.step})")
    return 0


def _harmonize_one(vol, ckpt, encoder, args, target=None):
    depth = vol.data.shape[0]
    if args.target_image is not None:
        if target is None:
            target = read_volume(args.target_image)
        emb = volume_embeddings(target, encoder, depth)
    else:
        emb = site_embeddings(ckpt.templates, args.target_site, depth)
    return harmonize_volume(vol, emb, ckpt.params, ckpt.flow, bypass_aan=args.bypass_aan,
                            alpha_override=1.0 if args.force_alpha_one else None)


def cmd_harmonize(args) -> int:
    if (args.target_site is None) == (args.target_image is None):
        raise UsageError("exactly one of --target-site or --target-image is required")
    if (args.input is None) == (args.input_manifest is None):
        raise UsageError("exactly one of --input or --input-manifest is required")
    ckpt = load_checkpoint(args.checkpoint)
    if args.target_site is not None and args.target_site not in ckpt.templates:
        known = ", ".join(str(s) for s in sorted(ckpt.templates))
        raise UsageError(f"unknown site {args.target_site}; known sites: {known}")
    encoder = ckpt.encoder()
    effective = {k: v for k, v in vars(args).items() if k not in ("func", "set", "config")}
    if args.input is not None:
        vol = read_volume(args.input)
        out = _harmonize_one(vol, ckpt, encoder, args)
        write_volume(args.output, out)
        echo_config(effective, Path(args.output).parent, Path(args.output).stem + ".config.yaml")
        print(f"harmonized volume: {args.output} shape {out.shape}")
        return 0
    out_dir = Path(args.output)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    sites = set(args.sites) if args.sites else None
    target = read_volume(args.target_image) if args.target_image is not None else None
    records = []
    for rec in read_manifest(args.input_manifest):
        if args.split and rec.get("split") != args.split:
            continue
        if sites is not None and rec["site"] not in sites:
            continue
        out = _harmonize_one(read_volume(rec["abspath"]), ckpt, encoder, args, target)
        rel = f"volumes/{rec['subject']}.ihv"
        write_volume(out_dir / rel, out)
        records.append({"path": rel, "subject": rec["subject"], "site": rec["site"],
                        "seed": rec.get("seed"), "split": rec.get("split")})
    manifest = write_manifest(out_dir / "manifest.jsonl", records)
    echo_config(effective, out_dir)
    print(f"harmonized {len(records)} volumes; manifest: {manifest}")
    return 0


def cmd_evaluate(args) -> int:
    if args.compare:
        a, b = (MetricReport.from_csv(p) for p in args.compare)
        print(f"paired two-sided t-tests: {a.label} vs {b.label}")
        for metric, res in compare_reports(a, b).items():
            note = " (degenerate: zero-variance differences)" if res.degenerate else ""
            print(f"{metric:<12} t = {res.t:+.4f}  p = {res.p:.4g}{note}")
        return 0
    if args.pred is None or args.ref is None:
        raise UsageError("evaluate needs --pred and --ref (or --compare A.csv B.csv)")
    report = evaluate_run(args.pred, args.ref, label=args.label, split=args.split,
                          sites=set(args.sites) if args.sites else None)
    out = Path(args.out)
    csv_path, _ = report.write(out, args.label or "report")
    effective = {k: v for k, v in vars(args).items() if k not in ("func", "set", "config")}
    echo_config(effective, out, f"{args.label or 'report'}.config.yaml")
    agg = report.aggregate()
    print("aggregate " + "  ".join(f"{m}={v[0]:.4f}±{v[1]:.4f}" for m, v in agg.items()))
    if report.kde is not None:
        print(f"kde_distance={report.kde:.4f}")
    print(f"report: {csv_path}")
    return 0


def cmd_verify(args) -> int:
    alpha = None
    if args.inject_fault:
        key, _, value = args.inject_fault.partition("=")
        if key != "alpha" or not value:
            raise UsageError(f"unsupported fault {args.inject_fault!r}; expected alpha=<value>")
        try:
            alpha = float(value)
        except ValueError as exc:
            raise UsageError(f"bad alpha value {value!r}") from exc
    print(f"verify: precision={args.precision} inject_fault={args.inject_fault or 'none'} quick={args.quick}")
    results = run_suite(args.precision, alpha_override=alpha, quick=args.quick)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return 2
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _site_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated site ids, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file (sections data/train/loss/flow)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config field; repeatable")

    p = _Parser(prog="ihf-harmony", description="Invertible hierarchy-flow image harmonization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic multi-site dataset")
    g.add_argument("--out", help="output directory (its parent must exist)")
    g.add_argument("--subjects", type=int, help="subjects per site")
    g.add_argument("--seed", type=int)
    g.add_argument("--paired-target", type=int, metavar="SITE",
                   help="also render test subjects under SITE as evaluation references")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a harmonization model")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--lambda-ac", type=float)
    t.add_argument("--lambda-art", type=float)
    t.add_argument("--levels", type=int)
    t.add_argument("--splits", type=int)
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    h = sub.add_parser("harmonize", parents=[common], help="harmonize volumes toward a target")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--input", help="input IHV volume")
    h.add_argument("--input-manifest", help="harmonize every record of a manifest")
    h.add_argument("--output", required=True, help="output volume, or directory with --input-manifest")
    tgt = h.add_mutually_exclusive_group()
    tgt.add_argument("--target-site", type=int)
    tgt.add_argument("--target-image", help="IHV volume providing target artefact statistics")
    h.add_argument("--split", help="with --input-manifest: only records of this split")
    h.add_argument("--sites", type=_site_list, help="with --input-manifest: only these source sites")
    h.add_argument("--bypass-aan", action="store_true")
    h.add_argument("--force-alpha-one", action="store_true")
    h.set_defaults(func=cmd_harmonize)

    e = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    e.add_argument("--pred", help="prediction manifest")
    e.add_argument("--ref", help="reference manifest")
    e.add_argument("--out", default=".", help="report directory")
    e.add_argument("--label")
    e.add_argument("--split", help="restrict both manifests to this split")
    e.add_argument("--sites", type=_site_list, help="restrict to these source sites")
    e.add_argument("--compare", nargs=2, metavar=("A.csv", "B.csv"),
                   help="paired t-tests between two report CSVs")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--precision", choices=("f32", "f64"), default="f32")
    v.add_argument("--inject-fault", metavar="alpha=VALUE",
                   help="reverse with a wrong alpha (negative control)")
    v.add_argument("--quick", action="store_true", help="fewer random cases")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                            format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except UnknownSiteError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError, KeyError, ValueError, RuntimeError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
