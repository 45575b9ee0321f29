"""Distribution-similarity evaluation: embeddings, FID / K-S / K-L, 2-D
projection with 3x3 grid local-similarity analysis, and K-means taxonomy.

The default embedder is a fixed-seed untrained conv net (64-d features); the
identity-of-distributions property FID tests is preserved under random
features, and no pretrained weights are needed. A pretrained embedder can be
plugged in through the ``external`` extractor.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .masks import BinaryMask, read_mask_png, tissue_fraction
from .nets import mask_to_tensor
from .training import infer_fine

__all__ = [
    "EmbeddingSet",
    "MetricRow",
    "MetricReport",
    "GridAnalysis",
    "embed",
    "fid",
    "fid_from_moments",
    "ks",
    "kl",
    "tsne_project",
    "grid_similarity",
    "kmeans_cluster",
    "compare_models",
]

_DEFAULT_EXTRACTOR_SEED = 90210
_DEFAULT_DIM = 64


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # n x d
    extractor_id: str
    labels: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix contains non-finite values")
        if len(self.labels) != self.matrix.shape[0]:
            raise ValueError("one label per embedding row required")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


class _ConvEmbedder(nn.Module):
    def __init__(self, seed: int, dim: int = _DEFAULT_DIM):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, dim, 4, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        g = torch.Generator().manual_seed(seed)
        for m in self.net.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.data.normal_(0.0, 0.2, generator=g)
                m.bias.data.normal_(0.0, 0.2, generator=g)

    def forward(self, x):
        return self.net(x).flatten(1)


_EMBEDDER_CACHE: dict[int, _ConvEmbedder] = {}


def _default_embedder(seed: int = _DEFAULT_EXTRACTOR_SEED) -> _ConvEmbedder:
    if seed not in _EMBEDDER_CACHE:
        net = _ConvEmbedder(seed)
        net.eval()
        _EMBEDDER_CACHE[seed] = net
    return _EMBEDDER_CACHE[seed]


def embed(masks: list[BinaryMask], extractor: str = "default_conv",
          labels: list[str] | None = None, extractor_fn=None,
          extractor_id: str | None = None, seed: int = _DEFAULT_EXTRACTOR_SEED,
          ) -> EmbeddingSet:
    """Feature rows for a mask population, deterministic per extractor."""
    if labels is None:
        labels = ["unlabeled"] * len(masks)
    if extractor == "external":
        if extractor_fn is None or extractor_id is None:
            raise ValueError("external extractor needs extractor_fn and extractor_id")
        rows = [np.asarray(extractor_fn(m), dtype=np.float64) for m in masks]
        return EmbeddingSet(np.stack(rows) if rows else np.zeros((0, 1)),
                            extractor_id, labels)
    if extractor != "default_conv":
        raise ValueError(f"unknown extractor {extractor!r}")
    torch.set_num_threads(1)
    net = _default_embedder(seed)
    rows = []
    with torch.no_grad():
        by_shape: dict[tuple, list[int]] = {}
        for i, m in enumerate(masks):
            by_shape.setdefault(m.shape, []).append(i)
        out = [None] * len(masks)
        for shape, idxs in by_shape.items():
            for start in range(0, len(idxs), 128):
                chunk = idxs[start:start + 128]
                batch = torch.cat([mask_to_tensor(masks[i]) for i in chunk], dim=0)
                feats = net(batch).numpy().astype(np.float64)
                for row, i in zip(feats, chunk):
                    out[i] = row
        rows = out
    matrix = np.stack(rows) if rows else np.zeros((0, _DEFAULT_DIM))
    return EmbeddingSet(matrix, f"default_conv-{seed}-d{_DEFAULT_DIM}", labels)


# ---------------------------------------------------------------- fid

def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray,
                     cov_b: np.ndarray, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^1/2), sqrt via eigh of
    Ca^1/2 Cb Ca^1/2 with negative eigenvalues clipped to zero."""
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    d = mu_a.shape[0]
    cov_a = np.asarray(cov_a, dtype=np.float64) + eps * np.eye(d)
    cov_b = np.asarray(cov_b, dtype=np.float64) + eps * np.eye(d)
    sqrt_a = _sqrt_psd(cov_a)
    sqrt_b = _sqrt_psd(cov_b)
    # Tr (Ca^1/2 Cb Ca^1/2)^1/2 equals the nuclear norm of Ca^1/2 Cb^1/2:
    # the eigenvalues of that PSD matrix are the squared singular values of
    # X = Ca^1/2 Cb^1/2, and summing sigma(X) directly avoids squaring the
    # near-eps eigenvalues out of double precision.
    tr_sqrt = np.linalg.svd(sqrt_a @ sqrt_b, compute_uv=False).sum()
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(val, 0.0)  # the distance is >= 0; negatives are roundoff residue


def _moments(e: EmbeddingSet):
    return e.matrix.mean(axis=0), np.cov(e.matrix, rowvar=False)


def fid(a: EmbeddingSet, b: EmbeddingSet) -> float:
    if a.dim != b.dim:
        raise ValueError(f"embedding dims differ: {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise ValueError("each embedding set needs n >= 2 for covariance")
    mu_a, cov_a = _moments(a)
    mu_b, cov_b = _moments(b)
    return fid_from_moments(mu_a, cov_a, mu_b, cov_b)


# ---------------------------------------------------------------- ks / kl

def ks(a, b) -> float:
    """Sup distance between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("ks needs non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def kl(a, b, bins: int = 64, eps: float = 1e-10) -> float:
    """Discrete KL over shared-range histograms, both smoothed by +eps per bin."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("kl needs non-empty samples")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0
    pa, _ = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = pa / pa.sum() + eps
    q = pb / pb.sum() + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


# ---------------------------------------------------------------- t-SNE

def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, None)


def _calibrate_rows(dists: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-row precision search so each conditional distribution has the
    target perplexity."""
    n = dists.shape[0]
    target = np.log(perplexity)
    p = np.zeros_like(dists)
    for i in range(n):
        row = np.delete(dists[i], i)
        beta_lo, beta_hi = 0.0, np.inf
        beta = 1.0
        for _ in range(64):
            w = np.exp(-row * beta)
            total = w.sum()
            if total <= 0:
                entropy = 0.0
                probs = np.zeros_like(row)
            else:
                probs = w / total
                nz = probs > 0
                entropy = -np.sum(probs[nz] * np.log(probs[nz]))
            if abs(entropy - target) < 1e-6:
                break
            if entropy > target:
                beta_lo = beta
                beta = beta * 2 if beta_hi == np.inf else (beta + beta_hi) / 2
            else:
                beta_hi = beta
                beta = (beta_lo + beta) / 2
        p[i, np.arange(n) != i] = probs
    return p


def _tsne_kl(p: np.ndarray, y: np.ndarray):
    num = 1.0 / (1.0 + _pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    q = np.maximum(q, 1e-12)
    mask = p > 0
    kl_val = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return kl_val, num, q


def tsne_project(e: EmbeddingSet, seed: int, perplexity: float = 30.0,
                 iterations: int = 1000, return_history: bool = False):
    """Exact 2-D t-SNE with a backtracking step so the KL objective never rises."""
    x = e.matrix
    n = x.shape[0]
    if n < 2:
        raise ValueError("t-SNE needs at least 2 rows")
    max_perp = max(1.0, (n - 1) / 3.0)
    if perplexity > max_perp:
        warnings.warn(f"perplexity {perplexity} too large for n={n}; "
                      f"reduced to {max_perp:.2f}")
        perplexity = max_perp
    dists = _pairwise_sq_dists(x)
    cond = _calibrate_rows(dists, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 0.0)
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=1e-4, size=(n, 2))
    step = 10.0
    kl_val, num, q = _tsne_kl(p, y)
    history = [kl_val]
    for _ in range(iterations):
        coeff = (p - q) * num
        grad = 4.0 * ((np.diag(coeff.sum(axis=1)) - coeff) @ y)
        accepted = False
        for _ in range(30):
            y_new = y - step * grad
            kl_new, num_new, q_new = _tsne_kl(p, y_new)
            if kl_new <= kl_val:
                y, kl_val, num, q = y_new, kl_new, num_new, q_new
                step *= 1.1
                accepted = True
                break
            step *= 0.5
        history.append(kl_val)
        if not accepted or step < 1e-14:
            break
    if return_history:
        return y.copy(), history
    return y.copy()


# ---------------------------------------------------------------- grid

@dataclass
class GridAnalysis:
    projection: np.ndarray          # (n_real + n_synth) x 2
    x_edges: np.ndarray             # grid_cols + 1 boundaries
    y_edges: np.ndarray
    cell_fid: np.ndarray            # rows x cols, NaN where absent
    real_counts: np.ndarray
    synth_counts: np.ndarray
    global_avg: float               # FID over all masks, no gridding
    cell_avg: float                 # unweighted mean over populated cells
    cell_avg_weighted: float        # weighted by per-cell mask counts
    min_count: int

    def to_dict(self) -> dict:
        def cell_list(arr):
            return [[None if np.isnan(v) else float(v) for v in row]
                    if arr.dtype.kind == "f" else [int(v) for v in row]
                    for row in arr]
        return {
            "x_edges": [float(v) for v in self.x_edges],
            "y_edges": [float(v) for v in self.y_edges],
            "cell_fid": cell_list(self.cell_fid),
            "real_counts": cell_list(self.real_counts),
            "synth_counts": cell_list(self.synth_counts),
            "global_avg": float(self.global_avg),
            "cell_avg": None if np.isnan(self.cell_avg) else float(self.cell_avg),
            "cell_avg_weighted": None if np.isnan(self.cell_avg_weighted)
                else float(self.cell_avg_weighted),
            "min_count": self.min_count,
        }


def _cell_index(values: np.ndarray, lo: float, hi: float, cells: int) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.zeros(values.shape, dtype=int)
    idx = np.floor((values - lo) / span * cells).astype(int)
    return np.clip(idx, 0, cells - 1)


def grid_similarity(real_e: EmbeddingSet, synth_e: EmbeddingSet,
                    coords: np.ndarray, grid: tuple[int, int] = (3, 3),
                    min_count: int = 5) -> GridAnalysis:
    """Per-cell FID over a grid covering the joint projection bounding box.

    `coords` holds one 2-D projection row per mask: the real population's rows
    first, then the synthetic population's.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (real_e.n + synth_e.n, 2):
        raise ValueError(f"coords must be ({real_e.n + synth_e.n}, 2), "
                         f"got {coords.shape}")
    rows, cols = grid
    x_lo, x_hi = coords[:, 0].min(), coords[:, 0].max()
    y_lo, y_hi = coords[:, 1].min(), coords[:, 1].max()
    x_edges = np.linspace(x_lo, x_hi, cols + 1)
    y_edges = np.linspace(y_lo, y_hi, rows + 1)
    col_idx = _cell_index(coords[:, 0], x_lo, x_hi, cols)
    row_idx = _cell_index(coords[:, 1], y_lo, y_hi, rows)
    real_rows, real_cols = row_idx[:real_e.n], col_idx[:real_e.n]
    synth_rows, synth_cols = row_idx[real_e.n:], col_idx[real_e.n:]

    cell_fid = np.full((rows, cols), np.nan)
    real_counts = np.zeros((rows, cols), dtype=int)
    synth_counts = np.zeros((rows, cols), dtype=int)
    for r in range(rows):
        for c in range(cols):
            r_sel = (real_rows == r) & (real_cols == c)
            s_sel = (synth_rows == r) & (synth_cols == c)
            real_counts[r, c] = int(r_sel.sum())
            synth_counts[r, c] = int(s_sel.sum())
            if real_counts[r, c] >= min_count and synth_counts[r, c] >= min_count:
                sub_r = EmbeddingSet(real_e.matrix[r_sel], real_e.extractor_id,
                                     [l for l, m in zip(real_e.labels, r_sel) if m])
                sub_s = EmbeddingSet(synth_e.matrix[s_sel], synth_e.extractor_id,
                                     [l for l, m in zip(synth_e.labels, s_sel) if m])
                cell_fid[r, c] = fid(sub_r, sub_s)
    populated = ~np.isnan(cell_fid)
    if populated.any():
        cell_avg = float(cell_fid[populated].mean())
        weights = (real_counts + synth_counts)[populated].astype(np.float64)
        cell_avg_weighted = float((cell_fid[populated] * weights).sum() / weights.sum())
    else:
        cell_avg = cell_avg_weighted = float("nan")
    return GridAnalysis(
        projection=coords, x_edges=x_edges, y_edges=y_edges, cell_fid=cell_fid,
        real_counts=real_counts, synth_counts=synth_counts,
        global_avg=fid(real_e, synth_e), cell_avg=cell_avg,
        cell_avg_weighted=cell_avg_weighted, min_count=min_count)


# ---------------------------------------------------------------- k-means

def kmeans_cluster(e: EmbeddingSet, k: int, seed: int,
                   max_iter: int = 300) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k random distinct rows until assignments fix."""
    x = e.matrix
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    assignments = np.full(n, -1)
    for _ in range(max_iter):
        d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d.argmin(axis=1)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            members = x[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return assignments, centroids


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class MetricRow:
    method: str
    dataset: str
    ks: float
    kl: float
    fid: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def to_table(self) -> str:
        header = ("Method", "Dataset", "KS", "KL", "FID")
        body = [(r.method, r.dataset, f"{r.ks:.6f}", f"{r.kl:.6f}", f"{r.fid:.6f}")
                for r in self.rows]
        widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
                  for i, h in enumerate(header)]
        def fmt(row):
            return "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()
        lines = [fmt(header), fmt(tuple("-" * w for w in widths))]
        lines.extend(fmt(row) for row in body)
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps([row.__dict__ for row in self.rows], indent=2)


def _load_test_masks(manifest, limit=None):
    records = manifest.split_records("test")
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ValueError(f"dataset {manifest.name!r} has an empty test split")
    coarse = [read_mask_png(manifest.resolve(r.coarse_mask_path)) for r in records]
    fine = [read_mask_png(manifest.resolve(r.fine_mask_path)) for r in records]
    return coarse, fine


def compare_models(manifests, checkpoints, method_names=None, seed: int = 0,
                   limit: int | None = None) -> MetricReport:
    """Generate fine masks from each checkpoint on every test split and score
    them against the real fine masks (KS and KL on tissue fractions, FID on
    embeddings). The string ``"identity"`` in place of a checkpoint scores the
    real masks against themselves.
    """
    if method_names is None:
        method_names = [c if isinstance(c, str) else c.kind for c in checkpoints]
    report = MetricReport()
    for manifest in manifests:
        coarse, fine = _load_test_masks(manifest, limit)
        real_fracs = [tissue_fraction(m) for m in fine]
        real_emb = embed(fine, labels=["real"] * len(fine))
        for ckpt, method in zip(checkpoints, method_names):
            if isinstance(ckpt, str):
                if ckpt != "identity":
                    raise ValueError(f"unknown pseudo-model {ckpt!r}")
                generated = fine
            else:
                generated = [infer_fine(ckpt, c, seed=seed + i)
                             for i, c in enumerate(coarse)]
            gen_fracs = [tissue_fraction(m) for m in generated]
            gen_emb = embed(generated, labels=[method] * len(generated))
            report.rows.append(MetricRow(
                method=method, dataset=manifest.name,
                ks=ks(real_fracs, gen_fracs), kl=kl(real_fracs, gen_fracs),
                fid=fid(real_emb, gen_emb)))
    return report


def plot_grid_analysis(analysis: GridAnalysis, n_real: int, out_path: Path | str):
    """Projection scatter with the grid overlay, written as a PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    pr = analysis.projection[:n_real]
    ps = analysis.projection[n_real:]
    ax.scatter(pr[:, 0], pr[:, 1], s=8, c="black", label="real")
    ax.scatter(ps[:, 0], ps[:, 1], s=8, c="red", alpha=0.6, label="synthetic")
    for x in analysis.x_edges:
        ax.axvline(x, color="gold", lw=1)
    for y in analysis.y_edges:
        ax.axhline(y, color="gold", lw=1)
    ax.legend()
    ax.set_title(f"global FID {analysis.global_avg:.3f} / "
                 f"cell avg {analysis.cell_avg:.3f}")
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
