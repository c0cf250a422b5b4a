"""FID and SSIM, and the comparison reports built from them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

COVARIANCE_CONVENTION = "unbiased (N-1)"

log = logging.getLogger(__name__)


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ShapeError(f"covariance shape {self.covariance.shape} does not match mean dimension {d}")
        if self.sample_count < 2:
            raise ValidationError("FeatureStats needs at least 2 samples")

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass
class MetricsReport:
    fid: float
    ssim_mean: float
    ssim_values: list
    label: str = "model"
    extractor: str = ""
    covariance: str = COVARIANCE_CONVENTION
    meta: dict = field(default_factory=dict)


def extract_features(images: Sequence, extractor, batch_size=16) -> np.ndarray:
    """Row i is the pooled feature vector of ``images[i]`` (each an H x W array in [-1, 1])."""
    if len(images) < 2:
        raise ValidationError(f"need at least 2 images for feature statistics, got {len(images)}")
    param = next(extractor.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = [torch.as_tensor(np.asarray(im), dtype=dtype) for im in images[start:start + batch_size]]
            batch = torch.stack(chunk)[:, None]
            rows.append(extractor.pooled(batch).double().cpu().numpy())
    return np.concatenate(rows, axis=0)


def gaussian_stats(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValidationError(f"need an N x d feature matrix with N >= 2, got shape {features.shape}")
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = 0.5 * (np.atleast_2d(cov) + np.atleast_2d(cov).T)
    return FeatureStats(features.mean(axis=0), cov, features.shape[0])


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(stats_real: FeatureStats, stats_gen: FeatureStats) -> float:
    """Fréchet distance between two Gaussians.

    trace((S_r S_g)^(1/2)) is evaluated as the sum of square roots of the
    eigenvalues of the symmetric matrix S_r^(1/2) S_g S_r^(1/2), with negative
    round-off eigenvalues clipped to zero.
    """
    if stats_real.dim != stats_gen.dim:
        raise ShapeError(f"feature dimensions differ: {stats_real.dim} vs {stats_gen.dim}")
    diff = stats_real.mean - stats_gen.mean
    root_r = _psd_sqrt(stats_real.covariance)
    middle = root_r @ stats_gen.covariance @ root_r
    eig = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    value = diff @ diff + np.trace(stats_real.covariance) + np.trace(stats_gen.covariance) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, window_size=11, k1=0.01, k2=0.03, data_range=2.0, sigma=1.5):
    """Local SSIM over every fully contained window position.

    Images smaller than the window use the largest odd window that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D images, got {a.shape} and {b.shape}")
    size = min(window_size, *a.shape)
    size -= 1 - size % 2
    win = torch.from_numpy(gaussian_window(size, sigma))[None, None]
    x = torch.from_numpy(np.stack([a, b, a * a, b * b, a * b]))[:, None]
    mu_a, mu_b, e_aa, e_bb, e_ab = F.conv2d(x, win)[:, 0].numpy()
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, window_size=11, k1=0.01, k2=0.03, data_range=2.0) -> float:
    return float(ssim_map(a, b, window_size, k1, k2, data_range).mean())


# ---------------------------------------------------------------------------

def _as_generate_fn(generator) -> Callable:
    if isinstance(generator, torch.nn.Module):
        from .generation import generate

        return lambda pair, seed: generate(pair.mask, generator, seed=seed)
    return generator


def evaluate_model(test: Sequence, generator, seed: int, extractor, label="model", ssim_window=11,
                   meta: Optional[dict] = None) -> MetricsReport:
    """Generate one image per test mask and score it against the paired real image.

    ``generator`` is a :class:`StyleUNet` or any callable ``(pair, seed) -> image``.
    Sample ``i`` is rendered with seed ``seed + i``. FID needs two or more
    pairs; with a single pair it is reported as NaN.
    """
    if not test:
        raise ValidationError("evaluate_model needs a nonempty test set")
    gen_fn = _as_generate_fn(generator)
    fakes = [np.asarray(gen_fn(pair, seed + i), dtype=np.float32) for i, pair in enumerate(test)]
    reals = [pair.image for pair in test]
    ssims = [ssim(f, r, window_size=ssim_window) for f, r in zip(fakes, reals)]
    if len(test) >= 2:
        fid_value = fid(gaussian_stats(extract_features(reals, extractor)),
                        gaussian_stats(extract_features(fakes, extractor)))
    else:
        log.warning("FID undefined for a single test pair; reporting NaN")
        fid_value = float("nan")
    return MetricsReport(fid=fid_value, ssim_mean=float(np.mean(ssims)), ssim_values=ssims, label=label,
                         extractor=getattr(extractor, "name", type(extractor).__name__), meta=dict(meta or {}))


def format_table(reports: Sequence[MetricsReport], title="Loss Configuration") -> str:
    """Plain-text table: one row per report, FID and SSIM columns."""
    width = max([len(title)] + [len(r.label) for r in reports])
    lines = [f"{title:<{width}} | {'FID SCORE':>10} | {'SSIM SCORE':>10}", "-" * (width + 27)]
    for r in reports:
        lines.append(f"{r.label:<{width}} | {r.fid:>10.2f} | {r.ssim_mean:>10.3f}")
    extractors = sorted({r.extractor for r in reports})
    lines.append(f"extractor: {', '.join(extractors)}; covariance: {COVARIANCE_CONVENTION}")
    return "\n".join(lines)


def write_report_tsv(reports: Sequence[MetricsReport], path):
    extractors = sorted({r.extractor for r in reports})
    lines = [f"# extractor: {', '.join(extractors)}", f"# covariance: {COVARIANCE_CONVENTION}",
             "label\tfid\tssim_mean\tn_pairs"]
    for r in reports:
        lines.append(f"{r.label}\t{r.fid!r}\t{r.ssim_mean!r}\t{len(r.ssim_values)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report_tsv(path):
    meta, rows = {}, []
    header = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            meta[key] = value
        elif header is None:
            header = line.split("\t")
        elif line:
            rows.append(dict(zip(header, line.split("\t"))))
    return meta, rows
