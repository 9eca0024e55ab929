"""Anomaly scores and reporting: likelihood-ratio and per-scale scores,
log-likelihood clipping, noise-free preprocessing, AUROC and rank
correlation. Score polarity is fixed package-wide: higher = more
inlier-like.
"""

import csv
import math

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError

CLIP_LOGP = -3_000_000.0


def clip_logp(value):
    """Replace non-finite log-likelihoods by the clipping constant."""
    v = float(value)
    return v if math.isfinite(v) else CLIP_LOGP


def ratio_score(logp_in, logp_g):
    """Log-likelihood difference log p_in(x) - log p_g(x); low means outlier.

    Clipping applies to each operand before the subtraction.
    """
    return clip_logp(logp_in) - clip_logp(logp_g)


def last_scale_score(latent):
    """Final-scale contribution c_S; low means outlier."""
    if len(latent.contributions) < 2:
        raise ContractError("last-scale score needs a multi-scale model")
    return clip_logp(latent.contributions[-1])


def noise_free_eval(pixels):
    """Evaluation preprocessing: pixel/256 - 0.5 + half a quantization cell."""
    arr = np.asarray(pixels)
    if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.floor(arr)):
        raise DomainError("pixels must be integers in 0..255")
    return arr.astype(np.float64) / 256.0 - 0.5 + 1.0 / 512.0


def preprocess_train(pixels):
    """Training preprocessing: pixel/256 - 0.5, the [-0.5, 0.5 - 1/256] range."""
    arr = np.asarray(pixels)
    if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.floor(arr)):
        raise DomainError("pixels must be integers in 0..255")
    return arr.astype(np.float64) / 256.0 - 0.5


def _tied_ranks(values):
    """Fractional ranks (1-based, ties get the average rank)."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(inlier_scores, outlier_scores):
    """Probability a random inlier outscores a random outlier (ties count 1/2).

    Rank-based Mann-Whitney computation; exactly equals the pairwise
    definition for every tie pattern.
    """
    ins = list(inlier_scores)
    outs = list(outlier_scores)
    if not ins or not outs:
        raise ContractError("auroc needs nonempty score lists")
    ranks = _tied_ranks(ins + outs)
    r_in = ranks[: len(ins)].sum()
    u = r_in - len(ins) * (len(ins) + 1) / 2.0
    return u / (len(ins) * len(outs))


def auroc_pairwise(inlier_scores, outlier_scores):
    """O(n*m) oracle for :func:`auroc` (same tie convention)."""
    ins = list(inlier_scores)
    outs = list(outlier_scores)
    if not ins or not outs:
        raise ContractError("auroc needs nonempty score lists")
    wins = 0.0
    for a in ins:
        for b in outs:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(ins) * len(outs))


def spearman(a, b):
    """Rank correlation: Pearson correlation of the fractional ranks."""
    xs = list(a)
    ys = list(b)
    if len(xs) != len(ys):
        raise ContractError("spearman needs equal-length sequences")
    if len(xs) < 3:
        raise ContractError("spearman needs at least 3 points")
    ra = _tied_ranks(xs)
    rb = _tied_ranks(ys)
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        raise DegenerateInputError("constant input has no rank correlation")
    return float(da @ db) / denom


class ScoreTable:
    """Per-example anomaly scores, one row per example, one column per score."""

    def __init__(self, fieldnames, rows=None):
        self.fieldnames = list(fieldnames)
        self.rows = list(rows) if rows else []

    def append(self, **values):
        self.rows.append({k: values.get(k) for k in self.fieldnames})

    def column(self, name):
        if name not in self.fieldnames:
            raise ContractError(f"no column {name!r} in score table")
        return [float(r[name]) for r in self.rows]

    def write(self, path, header_lines=()):
        with open(path, "w", encoding="utf-8", newline="") as f:
            for line in header_lines:
                f.write(f"# {line}\n")
            writer = csv.DictWriter(f, fieldnames=self.fieldnames)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _format_cell(v) for k, v in row.items()})

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8", newline="") as f:
            lines = [l for l in f if not l.startswith("#")]
        reader = csv.DictReader(lines)
        rows = [dict(r) for r in reader]
        return cls(reader.fieldnames, rows)


def _format_cell(v):
    if isinstance(v, float):  # includes numpy float subclasses
        return repr(float(v))
    return v


def score_examples(model, pixel_images, methods, general_model=None, baselines=None):
    """ScoreTable over raw 0..255 images for the requested score methods.

    methods is a subset of {raw, ratio, last_scale, last_scale_ratio,
    pseudo, compressed_ratio}; clipping and noise-free preprocessing follow
    the evaluation conventions. ``baselines`` supplies the fitted
    pixel-difference histogram for the pseudo method.
    """
    known = {"raw", "ratio", "last_scale", "last_scale_ratio", "pseudo", "compressed_ratio"}
    methods = list(methods)
    unknown = set(methods) - known
    if unknown:
        raise ContractError(f"unknown score methods: {sorted(unknown)}")
    if ("ratio" in methods or "last_scale_ratio" in methods) and general_model is None:
        raise ContractError("ratio scoring requires a general model")
    if ("last_scale" in methods or "last_scale_ratio" in methods) and model.num_scales < 2:
        raise ContractError("last-scale scores need a multi-scale model")
    if "pseudo" in methods and baselines is None:
        raise ContractError("pseudo scoring requires a fitted histogram")

    from .data import compressed_size_bits, pseudo_loglik

    table = ScoreTable(["id"] + methods)
    x = noise_free_eval(pixel_images)
    out = model.log_prob_graph(_as_tensor(x))
    totals = out.total.data
    cs_last = out.contributions[-1].data
    g_totals = g_last = None
    if general_model is not None:
        gout = general_model.log_prob_graph(_as_tensor(x))
        g_totals = gout.total.data
        g_last = gout.contributions[-1].data

    for i in range(len(pixel_images)):
        row = {"id": str(i)}
        if "raw" in methods:
            row["raw"] = clip_logp(totals[i])
        if "ratio" in methods:
            row["ratio"] = ratio_score(totals[i], g_totals[i])
        if "last_scale" in methods:
            row["last_scale"] = clip_logp(cs_last[i])
        if "last_scale_ratio" in methods:
            row["last_scale_ratio"] = clip_logp(cs_last[i]) - clip_logp(g_last[i])
        if "pseudo" in methods:
            row["pseudo"] = pseudo_loglik(baselines, pixel_images[i])
        if "compressed_ratio" in methods:
            row["compressed_ratio"] = clip_logp(totals[i]) + compressed_size_bits(
                pixel_images[i]
            ) * math.log(2.0)
        table.append(**row)
    return table


def _as_tensor(x):
    from .tensor import Tensor

    return Tensor(x)
