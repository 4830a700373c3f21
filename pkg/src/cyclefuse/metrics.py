"""Distribution and pixel metrics, the aligned round-trip score, reports.

The aligned score (afid) runs the generator twice: pass 1 transfers each test
subject's expression onto another identity; pass 2 transfers it back, using
the pass-1 output as the style source and the original image as the identity
source. The result is the Frechet distance between the pass-2 outputs and the
real test images, so a perfect generator scores 0.

Frechet distance between Gaussian moments (m_a, C_a), (m_b, C_b):

    |m_a - m_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2})

with the matrix square root's trace computed from the eigendecomposition of
the symmetrized product; negative eigenvalues are clipped at 0.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .conditioners import EvalBackbone
from .data import DatasetManifest, load_image

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# feature statistics and Frechet distance


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least 2 samples for covariance")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise ValueError("covariance shape does not match mean")
        if np.abs(self.cov - self.cov.T).max() > 1e-8:
            raise ValueError("covariance must be symmetric within 1e-8")


def feature_stats(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("features must be [n >= 2, m]")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean=mean, cov=cov, n=features.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two feature Gaussians; nonnegative."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def embed_images(images: Tensor, backbone, batch_size: int = 64) -> np.ndarray:
    """Row-per-image features from any deterministic image->vector function."""
    fn = backbone.embed if hasattr(backbone, "embed") else backbone
    rows = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            rows.append(fn(images[i : i + batch_size]).double().numpy())
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# pixel metrics


def psnr(a: Tensor, b: Tensor, peak: float = 2.0) -> float:
    """10 log10(peak^2 / MSE); returns the documented cap 99.0 when MSE = 0."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(a: Tensor, b: Tensor, window: int = 7, *, peak: float = 2.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local structural similarity with a uniform window.

    Stabilizers are the standard c1 = (k1*peak)^2, c2 = (k2*peak)^2 derived
    from the dynamic range. Window must fit inside the image.
    """
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if window > min(a.shape[-1], a.shape[-2]):
        raise ValueError(f"window {window} exceeds image size {tuple(a.shape[-2:])}")
    a = a.double()
    b = b.double()

    def win_mean(x):
        flat = x.reshape(-1, 1, x.shape[-2], x.shape[-1])
        return F.avg_pool2d(flat, window, stride=1)

    mu_a, mu_b = win_mean(a), win_mean(b)
    var_a = (win_mean(a * a) - mu_a * mu_a).clamp_min(0.0)
    var_b = (win_mean(b * b) - mu_b * mu_b).clamp_min(0.0)
    cov = win_mean(a * b) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def perceptual_distance(
    a: Tensor,
    b: Tensor,
    backbone,
    layer_weights: Sequence[float],
    *,
    channel_normalize: bool = True,
) -> float:
    """Weighted sum of per-layer normalized feature MSEs.

    With `channel_normalize` each activation is unit-normalized along the
    channel axis first (patch-similarity style); without it the raw feature
    maps are compared (content-loss style).
    """
    with torch.no_grad():
        la = backbone.layers(a)
        lb = backbone.layers(b)
        if len(layer_weights) != len(la):
            raise ValueError(
                f"{len(layer_weights)} layer weights for {len(la)} layers"
            )
        total = 0.0
        for w, fa, fb in zip(layer_weights, la, lb):
            fa, fb = fa.double(), fb.double()
            if channel_normalize:
                fa = fa / fa.norm(dim=1, keepdim=True).clamp_min(1e-8)
                fb = fb / fb.norm(dim=1, keepdim=True).clamp_min(1e-8)
            total += w * float(torch.mean((fa - fb) ** 2))
    return total


# ---------------------------------------------------------------------------
# aligned round-trip protocol


def _round_robin_pairs(manifest: DatasetManifest, pairing_seed: int):
    """Deterministic identity partners: for each test entry, an entry of a
    different person chosen round-robin with a seed-dependent offset."""
    entries = sorted(
        manifest.entries, key=lambda e: (e.person_id, e.expression_id, e.image_path)
    )
    if not entries:
        raise ValueError("empty manifest")
    persons = sorted({e.person_id for e in entries})
    if len(persons) < 2:
        raise ValueError("identity pool must contain at least 2 persons")
    by_person = {p: [e for e in entries if e.person_id == p] for p in persons}
    offset = pairing_seed % max(len(persons) - 1, 1)
    pairs = []
    for i, e in enumerate(entries):
        others = [p for p in persons if p != e.person_id]
        partner = others[(i + offset) % len(others)]
        partner_entries = by_person[partner]
        pairs.append((e, partner_entries[(i + offset) % len(partner_entries)]))
    return pairs


def _load_batch(manifest: DatasetManifest, entries) -> Tensor:
    return torch.stack([load_image(manifest.root / e.image_path) for e in entries])


GeneratorFn = Callable[[Tensor, Tensor, int], Tensor]


def aligned_round_trip(
    test_manifest: DatasetManifest,
    generator: GeneratorFn,
    pairing_seed: int,
    *,
    batch_size: int = 16,
) -> dict[str, Tensor]:
    """Run both generation passes; returns real / id-source / pass1 / pass2."""
    pairs = _round_robin_pairs(test_manifest, pairing_seed)
    style_entries = [p[0] for p in pairs]
    id_entries = [p[1] for p in pairs]
    real = _load_batch(test_manifest, style_entries)
    id_images = _load_batch(test_manifest, id_entries)

    def run(ids: Tensor, styles: Tensor, pass_index: int) -> Tensor:
        outs = []
        for i in range(0, ids.shape[0], batch_size):
            seed = pairing_seed * 1_000_003 + pass_index * 1_009 + i
            outs.append(generator(ids[i : i + batch_size],
                                  styles[i : i + batch_size], seed))
        return torch.cat(outs, dim=0)

    pass1 = run(id_images, real, 1)
    pass2 = run(real, pass1, 2)
    return {"real": real, "id_sources": id_images, "pass1": pass1, "pass2": pass2}


def afid(
    test_manifest: DatasetManifest,
    generator: GeneratorFn,
    backbone,
    pairing_seed: int,
    *,
    batch_size: int = 16,
) -> float:
    """Frechet distance after the two-pass round trip; 0 is a perfect score."""
    sets = aligned_round_trip(
        test_manifest, generator, pairing_seed, batch_size=batch_size
    )
    real_stats = feature_stats(embed_images(sets["real"], backbone))
    fake_stats = feature_stats(embed_images(sets["pass2"], backbone))
    return fid(real_stats, fake_stats)


# ---------------------------------------------------------------------------
# full evaluation


@dataclass(frozen=True)
class MetricReport:
    """All scalar metrics of one evaluation, plus the pairing description.

    `_id` columns compare generated images with their identity-source images,
    `_style` columns with their expression(style)-source images.
    """

    afid: float
    fid: float
    psnr_id: float
    psnr_style: float
    ssim_id: float
    ssim_style: float
    lpips_like_id: float
    lpips_like_style: float
    pl_like_id: float
    pl_like_style: float
    pairing: str

    def validate(self) -> None:
        values = dataclasses.asdict(self)
        pairing = values.pop("pairing")
        for key, v in values.items():
            if not np.isfinite(v):
                raise ValueError(f"non-finite metric {key}={v}")
        for key in ("psnr_id", "psnr_style"):
            if values[key] < 0:
                raise ValueError(f"{key} must be nonnegative")
        if not pairing:
            raise ValueError("pairing description is empty")

    def metric_columns(self) -> dict[str, float]:
        d = dataclasses.asdict(self)
        d.pop("pairing")
        d.pop("fid")
        return d


PERCEPTUAL_WEIGHTS = (1.0, 1.0, 1.0)


def _pairwise_mean(fn, gen: Tensor, ref: Tensor) -> float:
    return float(np.mean([fn(gen[i], ref[i]) for i in range(gen.shape[0])]))


def compute_report(
    sets: dict[str, Tensor], backbone, pairing: str
) -> MetricReport:
    gen, ids, real = sets["pass1"], sets["id_sources"], sets["real"]
    real_stats = feature_stats(embed_images(real, backbone))
    gen_stats = feature_stats(embed_images(gen, backbone))
    rt_stats = feature_stats(embed_images(sets["pass2"], backbone))

    def lpips_like(a, b):
        return perceptual_distance(
            a.unsqueeze(0), b.unsqueeze(0), backbone, PERCEPTUAL_WEIGHTS,
            channel_normalize=True,
        )

    def pl_like(a, b):
        return perceptual_distance(
            a.unsqueeze(0), b.unsqueeze(0), backbone, PERCEPTUAL_WEIGHTS,
            channel_normalize=False,
        )

    return MetricReport(
        afid=fid(real_stats, rt_stats),
        fid=fid(real_stats, gen_stats),
        psnr_id=_pairwise_mean(psnr, gen, ids),
        psnr_style=_pairwise_mean(psnr, gen, real),
        ssim_id=_pairwise_mean(ssim, gen, ids),
        ssim_style=_pairwise_mean(ssim, gen, real),
        lpips_like_id=_pairwise_mean(lpips_like, gen, ids),
        lpips_like_style=_pairwise_mean(lpips_like, gen, real),
        pl_like_id=_pairwise_mean(pl_like, gen, ids),
        pl_like_style=_pairwise_mean(pl_like, gen, real),
        pairing=pairing,
    )


def evaluate(
    checkpoint_dir: Path,
    test_manifest: DatasetManifest,
    *,
    pairing_seed: int = 0,
    batch_size: int = 16,
    report_path: Path | None = None,
) -> MetricReport:
    """Generate one image per test pairing and fill every report field.

    Deterministic given (checkpoint, manifest, pairing seed). When
    `report_path` is set, writes the JSON report with a config hash and the
    checkpoint id.
    """
    from .pipeline import Synthesizer

    checkpoint_dir = Path(checkpoint_dir)
    synth = Synthesizer.from_checkpoint(checkpoint_dir)
    sets = aligned_round_trip(
        test_manifest, synth.generate, pairing_seed, batch_size=batch_size
    )
    pairing = (
        f"round-robin identity partners over {len(test_manifest.persons())} "
        f"test persons, pairing_seed={pairing_seed}; style source = each test "
        f"image, identity source = partner person's image"
    )
    report = compute_report(sets, synth.components.eval_backbone, pairing)
    report.validate()
    if report_path is not None:
        write_report(report, report_path, checkpoint_dir)
    return report


def write_report(report: MetricReport, path: Path, checkpoint_dir: Path) -> None:
    from .checkpoint import read_manifest

    manifest = read_manifest(checkpoint_dir)
    config_blob = json.dumps(manifest["config"], sort_keys=True).encode()
    payload = dict(dataclasses.asdict(report))
    payload["config_hash"] = hashlib.sha256(config_blob).hexdigest()
    payload["checkpoint"] = str(checkpoint_dir)
    payload["step"] = manifest["step"]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_report(path: Path) -> dict:
    return json.loads(Path(path).read_text())
