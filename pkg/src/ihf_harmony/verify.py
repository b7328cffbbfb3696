"""Self-contained invariant suite behind ``ihf-harmony verify``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .encoder import FixedEncoder, artefact_embedding
from .flow import (
    FlowConfig,
    FlowParams,
    aan,
    harmonize,
    init_params,
    model_forward,
    model_reverse,
    squeeze,
    unsqueeze,
)
from .losses import LossWeights, artefact_consistency, anatomical_consistency, total_loss
from .optim import grad_check
from .tensor import Tensor, channel_stats, conv2d, leaky_relu, linear, no_tape, tanh


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_params(config: FlowConfig, seed: int, scale: float = 0.05, dtype=np.float32) -> FlowParams:
    """Initialized parameters with every zero-initialized tensor filled with noise,
    so couplings and AGA heads are non-trivial."""
    params = init_params(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.items():
        if name.endswith("rho"):
            continue
        if not t.data.any() or name.startswith("aan.sigma") or name.startswith("aan.mu"):
            t.data[...] = rng.normal(0.0, scale, t.shape).astype(dtype)
    return params


def check_squeeze(count: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(count):
        c = int(rng.integers(1, 5))
        r = int(rng.choice([1, 2, 4]))
        h, w = r * int(rng.integers(1, 6)), r * int(rng.integers(1, 6))
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        if not np.array_equal(unsqueeze(squeeze(x, r), r).data, x):
            return CheckResult("squeeze bijection", False, f"mismatch for shape {x.shape}, r={r}")
    return CheckResult("squeeze bijection", True, f"{count} random tensors bit-identical")


def reconstruction_error(config: FlowConfig, params: FlowParams, x: np.ndarray,
                         alpha_override=None) -> float:
    with no_tape():
        z, cache = model_forward(x, params, config)
        z = aan(z, None, params, config, bypass=True)
        back = model_reverse(z, cache, params, config, alpha_override=alpha_override)
    return float(np.abs(back.data - x).max())


def check_invertibility(precision: str = "f32", inputs: int = 4, size: int = 32,
                        alpha_override=None, seed: int = 0) -> CheckResult:
    dtype = np.float64 if precision == "f64" else np.float32
    tol = 1e-10 if precision == "f64" else 1e-4
    rng = np.random.default_rng(seed)
    worst, worst_cfg = 0.0, None
    for levels, splits in itertools.product((1, 2), (2, 3, 4)):
        cfg = FlowConfig(levels=levels, splits=splits, alpha_mode="forced_one")
        params = random_params(cfg, seed=levels * 10 + splits, dtype=dtype)
        for _ in range(inputs):
            x = rng.uniform(-1, 1, (3, size, size)).astype(dtype)
            err = reconstruction_error(cfg, params, x, alpha_override)
            if err > worst:
                worst, worst_cfg = err, (levels, splits)
    name = f"IHF invertibility ({precision})"
    detail = f"max abs err {worst:.2e} (tol {tol:g}) over L in {{1,2}} x n in {{2,3,4}}"
    if worst > tol:
        detail += f"; worst at L={worst_cfg[0]}, n={worst_cfg[1]}"
        if alpha_override is not None:
            detail += f", alpha={alpha_override}"
    return CheckResult(name, worst <= tol, detail)


def check_aan_identities(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cfg = FlowConfig(levels=1, splits=2)
    z = Tensor(rng.normal(0.5, 0.8, (2, cfg.latent_channels, 8, 8)).astype(np.float32))
    z_s = rng.normal(size=(2, cfg.embedding_size)).astype(np.float32)
    params = init_params(cfg, seed=seed)
    out_bypass = aan(z, z_s, params, cfg, bypass=True)
    bypass_ok = out_bypass.data is z.data or np.array_equal(out_bypass.data, z.data)
    with no_tape():
        out = aan(z, z_s, params, cfg).data
    rel = float(np.abs(out - z.data).max() / np.abs(z.data).max())
    return [CheckResult("AAN bypass identity", bool(bypass_ok), "exact"),
            CheckResult("AAN zero-init near identity", rel <= 1e-3, f"rel err {rel:.2e} (tol 1e-3)")]


def check_loss_identities(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    enc = FixedEncoder()
    x = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    y = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    with no_tape():
        l_ac = anatomical_consistency(x, x, enc).item()
        l_art = artefact_consistency(y, y, enc).item()
        zero, _ = total_loss(x, rng.uniform(-1, 1, x.shape).astype(np.float32), y, enc,
                             LossWeights(0.0, 0.0))
    ok = l_ac == 0.0 and l_art == 0.0 and zero.item() == 0.0
    return CheckResult("loss zero identities", ok,
                       f"L_ac(x,x)={l_ac:g}, L_art(y,y)={l_art:g}, total(w=0)={zero.item():g}")


def check_primitive_gradients(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True, name="x")
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True, name="w")
    b = Tensor(rng.normal(size=4), requires_grad=True, name="b")
    lw = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="lw")

    def f():
        h = leaky_relu(conv2d(x, w, b, stride=2, padding=1))
        mu, sd = channel_stats(h)
        return tanh(linear(mu * sd, lw)).sum()

    rep = grad_check(f, [x, w, b, lw], tol=1e-4, max_coords=None)
    return CheckResult("primitive gradients (f64)", rep.passed, str(rep))


def full_loss_closure(seed: int, size: int = 32, levels: int = 2, splits: int = 3):
    """float64 params and a closure evaluating total_loss(harmonize(...)) with
    frozen patch locations and channel selection."""
    cfg = FlowConfig(levels=levels, splits=splits)
    params = random_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    enc = FixedEncoder()
    x = rng.uniform(-0.9, 0.9, (1, 3, size, size))
    y = rng.uniform(-0.9, 0.9, (1, 3, size, size))
    z_s = artefact_embedding(y, enc).astype(np.float64)
    locs = (np.zeros(4, dtype=int), np.zeros(4, dtype=int)) if size // 4 <= 8 else None
    if locs is None:
        from .losses import sample_patch_locations
        locs = sample_patch_locations(np.random.default_rng(seed), size // 4, size // 4)
    with no_tape():
        x_hat = harmonize(x, z_s, params, cfg)
        _, sel = artefact_consistency(x_hat, y, enc, return_selection=True)

    def fn():
        xh = harmonize(x, z_s, params, cfg)
        loss, _ = total_loss(x, xh, y, enc, LossWeights(), locations=locs, selection=sel)
        return loss

    return fn, list(params.values())


def check_full_gradient(seed: int = 0, size: int = 32, tol: float = 1e-3,
                        max_coords: int = 3) -> CheckResult:
    fn, params = full_loss_closure(seed, size)
    rep = grad_check(fn, params, tol=tol, max_coords=max_coords, seed=seed)
    return CheckResult("total_loss gradient (f64)", rep.passed, str(rep))


def run_suite(precision: str = "f32", alpha_override=None, quick: bool = False) -> list[CheckResult]:
    results = [check_squeeze(50 if quick else 200)]
    results.append(check_invertibility(precision, inputs=2 if quick else 4,
                                       alpha_override=alpha_override))
    results.extend(check_aan_identities())
    results.append(check_loss_identities())
    results.append(check_primitive_gradients())
    results.append(check_full_gradient(size=32))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
