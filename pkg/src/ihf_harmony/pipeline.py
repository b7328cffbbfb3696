"""Volume-level harmonization: 2.5D slicing, target embeddings and reassembly."""

from __future__ import annotations

import numpy as np

from .data import Volume, normalize_intensity, volume_slices
from .encoder import FixedEncoder, artefact_embedding
from .flow import FlowConfig, FlowParams, harmonize
from .tensor import no_tape


class UnknownSiteError(KeyError):
    pass


def site_embeddings(templates: dict, site: int, depth: int) -> np.ndarray:
    """(depth, E) target embeddings from a site's per-slice-position template.

    A template recorded for a different depth collapses to its mean.
    """
    if site not in templates:
        known = ", ".join(str(s) for s in sorted(templates))
        raise UnknownSiteError(f"unknown site {site}; known sites: {known}")
    tpl = np.asarray(templates[site])
    if tpl.ndim == 1:
        return np.broadcast_to(tpl, (depth, tpl.size)).copy()
    if tpl.shape[0] != depth:
        return np.broadcast_to(tpl.mean(axis=0), (depth, tpl.shape[1])).copy()
    return tpl


def volume_embeddings(target, encoder: FixedEncoder, depth: int) -> np.ndarray:
    """Per-slice embeddings of a target volume, resampled to ``depth`` positions."""
    v = target.data if isinstance(target, Volume) else np.asarray(target)
    emb = artefact_embedding(volume_slices(normalize_intensity(v)), encoder)
    if emb.shape[0] == depth:
        return emb
    idx = np.round(np.linspace(0, emb.shape[0] - 1, depth)).astype(int)
    return emb[idx]


def harmonize_slices(slices: np.ndarray, embeddings: np.ndarray, params: FlowParams,
                     config: FlowConfig, bypass_aan: bool = False, alpha_override=None,
                     chunk: int = 16) -> np.ndarray:
    """Harmonize (N, 3, H, W) stacks in [-1, 1]; returns (N, 3, H, W)."""
    out = np.empty_like(slices, dtype=np.float32)
    with no_tape():
        for i in range(0, len(slices), chunk):
            out[i:i + chunk] = harmonize(slices[i:i + chunk], embeddings[i:i + chunk], params, config,
                                         bypass_aan=bypass_aan, alpha_override=alpha_override).data
    return out


def harmonize_volume(volume, embeddings: np.ndarray, params: FlowParams, config: FlowConfig,
                     bypass_aan: bool = False, alpha_override=None,
                     restore_range: bool = True) -> np.ndarray:
    """Harmonize every slice of a (D, H, W) volume and keep the centre channels.

    With ``restore_range`` the result is mapped back onto the input's
    [min, max]; otherwise it stays on [-1, 1].
    """
    v = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    lo, hi = float(v.min()), float(v.max())
    stacks = volume_slices(normalize_intensity(v))
    out = harmonize_slices(stacks, embeddings, params, config, bypass_aan, alpha_override)[:, 1]
    if restore_range:
        out = lo + (out + 1.0) * 0.5 * (hi - lo)
    return out.astype(np.float32)
