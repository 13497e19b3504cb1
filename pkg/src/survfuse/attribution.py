"""Shapley-value attribution over the model's token interfaces.

Players are whole tokens: encoder rows in unimodal mode (one per prototype,
one per pathway), post-fusion rows in multimodal mode (each unimodal feature
owning one modality-specific and one modality-shared token), or the four
pooled stream vectors. Masking a player replaces its row with a background
mean row at the same interface and reruns the rest of the network, so the
value function is interventional. Small games are enumerated exactly;
larger ones use per-feature permutation sampling with antithetic reversals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import STREAM_ORDER, forward_batch, fuse, pool_streams, risk_from_pooled
from .numerics import Rng, constant, no_grad
from .serialize import dump_json, write_csv

MAX_EXACT_FEATURES = 14
_CHUNK = 512


# -- backgrounds ------------------------------------------------------------

@dataclass(frozen=True)
class Background:
    """Mean activations of a background sample set at each maskable layer."""

    z_h: np.ndarray        # (N_h, D)
    z_g: np.ndarray        # (N_g, D)
    contextual: dict       # stream -> (rows, D_z)
    pooled: dict           # stream -> (D_z,)


def compute_background(features, params, chunk=64):
    """Average encoder outputs, post-fusion tokens, and pooled vectors over
    a background sample set (typically the active fold's training split)."""
    if not features:
        raise DataError("background set must be non-empty")
    sums = None
    with no_grad():
        for start in range(0, len(features), chunk):
            out = forward_batch(features[start:start + chunk], params)
            piece = {
                "z_h": out.z_h.data.sum(axis=0),
                "z_g": out.z_g.data.sum(axis=0),
                **{f"ctx_{s}": out.contextual[s].data.sum(axis=0) for s in STREAM_ORDER},
                **{f"pool_{s}": out.pooled[s].data.sum(axis=0) for s in STREAM_ORDER},
            }
            if sums is None:
                sums = piece
            else:
                for key in sums:
                    sums[key] = sums[key] + piece[key]
    n = float(len(features))
    return Background(
        z_h=sums["z_h"] / n,
        z_g=sums["z_g"] / n,
        contextual={s: sums[f"ctx_{s}"] / n for s in STREAM_ORDER},
        pooled={s: sums[f"pool_{s}"] / n for s in STREAM_ORDER})


# -- masked value functions ---------------------------------------------------

def _sample_activations(sample, params):
    with no_grad():
        out = forward_batch([sample], params)
        return (out.z_h.data[0], out.z_g.data[0],
                {s: out.contextual[s].data[0] for s in STREAM_ORDER},
                {s: out.pooled[s].data[0] for s in STREAM_ORDER},
                float(out.risks.data[0]))


def _replace_rows(base, bg, row_masks):
    """base (rows, d), row_masks (M, rows) -> (M, rows, d) with masked rows
    swapped for background rows."""
    out = np.broadcast_to(base, (row_masks.shape[0],) + base.shape).copy()
    out[row_masks] = np.broadcast_to(bg, out.shape)[row_masks]
    return out


def _risks_from_unimodal(params, z_h, z_g, masks, background):
    n_h = z_h.shape[0]
    z_h_batch = _replace_rows(z_h, background.z_h, masks[:, :n_h])
    z_g_batch = _replace_rows(z_g, background.z_g, masks[:, n_h:])
    with no_grad():
        contextual, _ = fuse(constant(z_h_batch), constant(z_g_batch), params)
        pooled, _ = pool_streams(contextual, params)
        return risk_from_pooled(pooled, params).data.copy()


def _risks_from_multimodal(params, contextual, masks, background):
    """Masks index [specific-h, specific-g, shared-h, shared-g] token blocks."""
    n_h = contextual["hh"].shape[0]
    n_g = contextual["gg"].shape[0]
    blocks = {
        "hh": masks[:, :n_h],
        "gg": masks[:, n_h:n_h + n_g],
        "gh": masks[:, n_h + n_g:2 * n_h + n_g],
        "hg": masks[:, 2 * n_h + n_g:],
    }
    with no_grad():
        ctx_batch = {s: constant(_replace_rows(contextual[s],
                                               background.contextual[s],
                                               blocks[s]))
                     for s in STREAM_ORDER}
        pooled, _ = pool_streams(ctx_batch, params)
        return risk_from_pooled(pooled, params).data.copy()


def _risks_from_pooled(params, pooled, masks, background):
    with no_grad():
        pooled_batch = {}
        for j, s in enumerate(STREAM_ORDER):
            stack = np.broadcast_to(pooled[s], (masks.shape[0],) + pooled[s].shape).copy()
            stack[masks[:, j]] = background.pooled[s]
            pooled_batch[s] = constant(stack)
        return risk_from_pooled(pooled_batch, params).data.copy()


def masked_forward(params, sample, mask, background, mode="unimodal"):
    """Risk with the masked features replaced by background rows.

    `mode` selects the interface: encoder rows ("unimodal"), post-fusion
    token rows ("multimodal"), or pooled stream vectors ("streams").
    """
    z_h, z_g, contextual, pooled, _ = _sample_activations(sample, params)
    mask = np.asarray(mask, dtype=bool).reshape(1, -1)
    if mode == "unimodal":
        expected = z_h.shape[0] + z_g.shape[0]
        fn = lambda m: _risks_from_unimodal(params, z_h, z_g, m, background)
    elif mode == "multimodal":
        expected = 2 * (z_h.shape[0] + z_g.shape[0])
        fn = lambda m: _risks_from_multimodal(params, contextual, m, background)
    elif mode == "streams":
        expected = 4
        fn = lambda m: _risks_from_pooled(params, pooled, m, background)
    else:
        raise DataError(f"unknown masking mode {mode!r}")
    if mask.shape[1] != expected:
        raise DataError(f"mask length {mask.shape[1]} does not match "
                        f"{expected} features for mode {mode!r}")
    return float(fn(mask)[0])


# -- Shapley estimators ---------------------------------------------------------

def _chunked(value_fn, masks):
    pieces = [value_fn(masks[s:s + _CHUNK]) for s in range(0, masks.shape[0], _CHUNK)]
    return np.concatenate(pieces)


def shapley_exact(value_fn, n_features):
    """Exact Shapley values by full coalition enumeration (n_features <= 14).

    `value_fn` maps a (m, F) boolean mask matrix to m values.
    """
    f = n_features
    if f > MAX_EXACT_FEATURES:
        raise DataError(f"exact enumeration supports at most "
                        f"{MAX_EXACT_FEATURES} features, got {f}")
    codes = np.arange(2 ** f, dtype=np.int64)
    masks = (codes[:, None] >> np.arange(f)[None, :]) & 1
    values = _chunked(value_fn, masks.astype(bool))
    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(f + 1)]
    weights = np.array([fact[s] * fact[f - s - 1] / fact[f] for s in range(f)])

    shap = np.zeros(f)
    for i in range(f):
        without = (codes >> i) & 1 == 0
        base_codes = codes[without]
        gain = values[base_codes | (1 << i)] - values[base_codes]
        shap[i] = float((weights[sizes[base_codes]] * gain).sum())
    return shap


def shapley_sampling(value_fn, n_features, n_permutations, seed):
    """Permutation-sampling Shapley estimate with antithetic reversals.

    Each feature draws its own permutations (so the per-feature estimates
    are independent rather than telescoping); every permutation contributes
    the marginal from its predecessor set and, reversed, from its successor
    set. The additivity residual |sum + base - prediction| is reported and
    then folded back into the values proportionally to |shap|, making local
    accuracy exact on the returned values.

    Returns (shap, residual).
    """
    f = n_features
    if n_permutations < 1:
        raise DataError("need at least one permutation")
    rng = Rng(seed)
    endpoints = _chunked(value_fn, np.array([[False] * f, [True] * f]))
    base, full = float(endpoints[0]), float(endpoints[1])

    shap = np.zeros(f)
    for i in range(f):
        stream = rng.child(f"feature/{i}")
        masks = np.zeros((4 * n_permutations, f), dtype=bool)
        for m in range(n_permutations):
            perm = stream.permutation(f)
            pos = int(np.nonzero(perm == i)[0][0])
            row = 4 * m
            masks[row, perm[:pos]] = True                   # predecessors
            masks[row + 1] = masks[row]
            masks[row + 1, i] = True
            masks[row + 2, perm[pos + 1:]] = True           # successors
            masks[row + 3] = masks[row + 2]
            masks[row + 3, i] = True
        values = _chunked(value_fn, masks)
        gains = values[1::2] - values[0::2]
        shap[i] = float(gains.mean())

    residual = float(abs(shap.sum() + base - full))
    gap = full - base - shap.sum()
    magnitude = np.abs(shap).sum()
    if magnitude > 0.0:
        shap = shap + gap * np.abs(shap) / magnitude
    elif gap != 0.0:
        shap = shap + gap / f
    return shap, residual


# -- reports ------------------------------------------------------------------------

@dataclass(frozen=True)
class AttributionReport:
    sample_id: str
    mode: str
    feature_names: tuple
    shap: np.ndarray
    base_value: float
    prediction: float
    normalized: np.ndarray
    permutations: int
    residual: float


def _normalize(shap):
    total = np.abs(shap).sum()
    if total == 0.0:
        return np.zeros_like(shap)
    return np.abs(shap) / total


def unimodal_feature_names(n_prototypes, pathway_names):
    return tuple([f"prototype_{k:02d}" for k in range(n_prototypes)]
                 + list(pathway_names))


def multimodal_feature_names(n_prototypes, pathway_names):
    base = unimodal_feature_names(n_prototypes, pathway_names)
    return tuple([f"specific:{name}" for name in base]
                 + [f"shared:{name}" for name in base])


def unimodal_attribution(params, sample, background, n_permutations, seed,
                         pathway_names=None):
    """Shapley report over encoder-level features (prototypes + pathways)."""
    z_h, z_g, _, _, prediction = _sample_activations(sample, params)
    n_h, n_g = z_h.shape[0], z_g.shape[0]
    if pathway_names is None:
        pathway_names = [f"pathway_{i:02d}" for i in range(n_g)]
    value_fn = lambda m: _risks_from_unimodal(params, z_h, z_g, m, background)
    shap, residual = shapley_sampling(value_fn, n_h + n_g, n_permutations, seed)
    base = float(value_fn(np.ones((1, n_h + n_g), dtype=bool))[0])
    return AttributionReport(
        sample_id=sample.sample_id, mode="unimodal",
        feature_names=unimodal_feature_names(n_h, pathway_names),
        shap=shap, base_value=base, prediction=prediction,
        normalized=_normalize(shap), permutations=n_permutations,
        residual=residual)


def multimodal_attribution(params, sample, background, n_permutations, seed,
                           pathway_names=None):
    """Shapley report over post-fusion tokens: each unimodal feature's
    modality-specific and modality-shared rows are separate players."""
    z_h, z_g, contextual, _, prediction = _sample_activations(sample, params)
    n_h, n_g = z_h.shape[0], z_g.shape[0]
    if pathway_names is None:
        pathway_names = [f"pathway_{i:02d}" for i in range(n_g)]
    value_fn = lambda m: _risks_from_multimodal(params, contextual, m, background)
    f = 2 * (n_h + n_g)
    shap, residual = shapley_sampling(value_fn, f, n_permutations, seed)
    base = float(value_fn(np.ones((1, f), dtype=bool))[0])
    return AttributionReport(
        sample_id=sample.sample_id, mode="multimodal",
        feature_names=multimodal_feature_names(n_h, pathway_names),
        shap=shap, base_value=base, prediction=prediction,
        normalized=_normalize(shap), permutations=n_permutations,
        residual=residual)


def representation_contribution(params, test_features, background):
    """Normalized mean |Shapley| share of each pooled stream (exact, F=4),
    plus the specific (gg+hh) and shared (gh+hg) totals."""
    if not test_features:
        raise DataError("need at least one test sample")
    totals = np.zeros(4)
    for sample in test_features:
        _, _, _, pooled, _ = _sample_activations(sample, params)
        value_fn = lambda m: _risks_from_pooled(params, pooled, m, background)
        totals += np.abs(shapley_exact(value_fn, 4))
    mean_abs = totals / len(test_features)
    denom = mean_abs.sum()
    shares = mean_abs / denom if denom > 0 else np.full(4, 0.25)
    by_stream = {s: float(shares[j]) for j, s in enumerate(STREAM_ORDER)}
    by_stream["specific"] = by_stream["gg"] + by_stream["hh"]
    by_stream["shared"] = by_stream["gh"] + by_stream["hg"]
    return by_stream


# -- attention summaries ----------------------------------------------------------------

@dataclass(frozen=True)
class AttentionSummary:
    mean_attention: dict   # stream -> (n, m)
    top_attended: dict     # stream -> list per query of [(source index, weight)]


def attention_summary(params, features, k):
    """Mean attention matrices over a sample set and, per query row, the
    top-k attended source features (ties to the lower index)."""
    if not features:
        raise DataError("attention summary needs at least one sample")
    sums = {s: None for s in STREAM_ORDER}
    with no_grad():
        for start in range(0, len(features), 64):
            out = forward_batch(features[start:start + 64], params)
            for s in STREAM_ORDER:
                piece = out.attn[s].data.sum(axis=0)
                sums[s] = piece if sums[s] is None else sums[s] + piece
    mean_attention = {s: sums[s] / len(features) for s in STREAM_ORDER}
    top = {}
    for s, matrix in mean_attention.items():
        kk = min(k, matrix.shape[1])
        rows = []
        for row in matrix:
            order = np.lexsort((np.arange(row.size), -row))[:kk]
            rows.append([(int(j), float(row[j])) for j in order])
        top[s] = rows
    return AttentionSummary(mean_attention=mean_attention, top_attended=top)


# -- exports -------------------------------------------------------------------------------

def report_to_dict(report):
    return {
        "sample_id": report.sample_id,
        "mode": report.mode,
        "base_value": report.base_value,
        "prediction": report.prediction,
        "permutations": report.permutations,
        "residual": report.residual,
        "features": [{"feature": name, "shap": float(v), "shap_normalized": float(n)}
                     for name, v, n in zip(report.feature_names, report.shap,
                                           report.normalized)],
    }


def export_reports_json(reports, path):
    dump_json([report_to_dict(r) for r in reports], path)


def export_reports_csv(reports, path):
    rows = []
    for r in reports:
        for name, v, n in zip(r.feature_names, r.shap, r.normalized):
            rows.append([r.sample_id, name, r.mode, float(v), float(n)])
    write_csv(path, ["sample_id", "feature", "mode", "shap", "shap_normalized"], rows)


def export_specific_shared_scatter(reports, n_prototypes, path):
    """One row per unimodal feature comparing the mean normalized |shap| of
    its modality-specific and modality-shared tokens (multimodal reports)."""
    if not reports:
        raise DataError("no multimodal reports to export")
    f2 = len(reports[0].feature_names)
    half = f2 // 2
    specific = np.mean([r.normalized[:half] for r in reports], axis=0)
    shared = np.mean([r.normalized[half:] for r in reports], axis=0)
    rows = []
    for i in range(half):
        name = reports[0].feature_names[i].split(":", 1)[1]
        modality = "wsi" if i < n_prototypes else "pathway"
        rows.append([name, modality, float(specific[i]), float(shared[i])])
    write_csv(path, ["feature", "modality", "shap_specific", "shap_shared"], rows)
