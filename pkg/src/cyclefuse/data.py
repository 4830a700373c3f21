"""Synthetic paired-face dataset: procedural renderer, manifests, pair sampling.

Faces are smooth parametric shapes (head ellipse, eyes, brows, nose, mouth
spline). Identity factors stay constant within a person; expression factors
and a per-side palsy attenuation vary per image. Landmarks are computed
analytically from the same parameters the renderer uses, so every image
carries exact ground truth.

On disk a dataset is:

    out_dir/
      images/pNNN_eMM.png      8-bit lossless frames
      landmarks/pNNN_eMM.txt   one "x y" pair per line, normalized coords
      manifest.jsonl           one entry per image (see ManifestEntry)
      specs.json               generator parameters for on-the-fly rendering

Pixels are stored as uint8 and mapped to [-1, 1] floats in memory via
v / 127.5 - 1, so a write/read round trip is exact.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

# Neutral (expressionless) baselines that palsy attenuation pulls toward.
NEUTRAL_EYE_OPEN = 0.7
DROOP = 0.035

BG = np.array([0.08, 0.09, 0.11])
SCLERA = np.array([0.93, 0.93, 0.90])
IRIS = np.array([0.16, 0.13, 0.11])
LIP = np.array([0.55, 0.22, 0.22])

LAYOUTS = {
    20: dict(jaw=5, brow=2, eye=3, nose_col=0, nose_base=1, mouth="corners"),
    68: dict(jaw=17, brow=5, eye=6, nose_col=4, nose_base=5, mouth="full"),
}


@dataclass(frozen=True)
class IdentityFactors:
    """Per-person geometry proportions and base colors."""

    face_rx: float
    face_ry: float
    eye_dx: float
    eye_y: float
    eye_r: float
    brow_gap: float
    mouth_y: float
    mouth_w: float
    nose_len: float
    skin: tuple[float, float, float]


@dataclass(frozen=True)
class ExpressionFactors:
    """Bilateral expression controls before any palsy attenuation."""

    mouth_curve: float
    mouth_open: float
    eye_open: float
    brow_raise: float


@dataclass(frozen=True)
class SynthFaceSpec:
    """Full parameterization of one rendered face.

    `attenuation` damps the expression's deviation from neutral per side
    (index 0 = image-left, 1 = image-right) and adds a corner droop, which is
    the palsy asymmetry model. Landmarks and pixels derive from the same
    effective per-side values, so `landmarks()` is exact ground truth for
    `render_face`.
    """

    identity: IdentityFactors
    expression: ExpressionFactors
    attenuation: tuple[float, float]
    num_points: int = 20

    def side(self, s: int) -> dict:
        """Effective per-side parameters after attenuation."""
        a = self.attenuation[s]
        e = self.expression
        return dict(
            eye_open=NEUTRAL_EYE_OPEN + (e.eye_open - NEUTRAL_EYE_OPEN) * (1 - a),
            brow_raise=e.brow_raise * (1 - a),
            mouth_curve=e.mouth_curve * (1 - a) - DROOP * a,
            mouth_open=e.mouth_open * (1 - a),
        )

    # -- derived geometry shared by renderer and landmarks --

    def _eye_geometry(self, s: int):
        ident = self.identity
        bx = 0.5 - ident.eye_dx if s == 0 else 0.5 + ident.eye_dx
        rx = ident.eye_r * 1.15
        ry = ident.eye_r * (0.2 + 0.8 * self.side(s)["eye_open"])
        return bx, ident.eye_y, rx, ry

    def _brow_geometry(self, s: int):
        ident = self.identity
        bx = 0.5 - ident.eye_dx if s == 0 else 0.5 + ident.eye_dx
        by = ident.eye_y - ident.brow_gap - self.side(s)["brow_raise"]
        return bx, by, ident.eye_r * 1.5

    def _mouth_center_y(self, u: float) -> float:
        s = 0 if u < 0 else 1
        return self.identity.mouth_y - self.side(s)["mouth_curve"] * u * u

    def _mouth_half_height(self, u: float) -> float:
        s = 0 if u < 0 else 1
        return 0.010 + 0.5 * self.side(s)["mouth_open"] * (1 - u * u)

    def _nose_span(self):
        top = self.identity.eye_y + 0.05
        return top, top + self.identity.nose_len

    def landmarks(self) -> np.ndarray:
        """Analytic keypoints, shape [num_points, 2], normalized (x, y)."""
        ident = self.identity
        layout = LAYOUTS[self.num_points]
        pts: list[tuple[float, float]] = []

        for phi in np.linspace(-1.22, 1.22, layout["jaw"]):
            pts.append((0.5 + ident.face_rx * np.sin(phi),
                        0.52 + ident.face_ry * np.cos(phi)))

        for s in (0, 1):
            bx, by, bw = self._brow_geometry(s)
            sign = -1.0 if s == 0 else 1.0
            for u in np.linspace(-1.0, 1.0, layout["brow"]):
                pts.append((bx + sign * u * bw, by - 0.012 * (1 - u * u)))

        for s in (0, 1):
            bx, ey, rx, ry = self._eye_geometry(s)
            sign = -1.0 if s == 0 else 1.0
            if layout["eye"] == 3:
                offsets = [(-rx, 0.0), (0.0, -ry), (rx, 0.0)]
            else:
                offsets = [(-rx, 0.0), (-rx / 2, -0.87 * ry), (rx / 2, -0.87 * ry),
                           (rx, 0.0), (rx / 2, 0.7 * ry), (-rx / 2, 0.7 * ry)]
            for dx, dy in offsets:
                pts.append((bx + sign * dx, ey + dy))

        nose_top, nose_tip = self._nose_span()
        for yv in np.linspace(nose_top, nose_tip, layout["nose_col"] + 2)[1:-1]:
            pts.append((0.5, yv))
        base_w = 0.022
        for u in np.linspace(-1.0, 1.0, layout["nose_base"]):
            pts.append((0.5 + u * base_w * (layout["nose_base"] > 1), nose_tip))

        half_w = ident.mouth_w / 2

        def mouth_pt(u: float, edge: float) -> tuple[float, float]:
            # edge -1 upper lip, +1 lower lip, 0 centerline
            return (0.5 + u * half_w,
                    self._mouth_center_y(u) + edge * self._mouth_half_height(u))

        if layout["mouth"] == "corners":
            pts.append(mouth_pt(-1.0, 0.0))
            pts.append(mouth_pt(1.0, 0.0))
            pts.append(mouth_pt(0.0, -1.0))
            pts.append(mouth_pt(0.0, 1.0))
        else:
            for u in np.linspace(-1.0, 1.0, 7):
                pts.append(mouth_pt(u, -1.0))
            for u in np.linspace(-2 / 3, 2 / 3, 5):
                pts.append(mouth_pt(u, 1.0))
            for u in np.linspace(-0.7, 0.7, 5):
                pts.append(mouth_pt(u, -0.4))
            for u in np.linspace(-0.5, 0.5, 3):
                pts.append(mouth_pt(u, 0.4))

        out = np.asarray(pts, dtype=np.float64)
        assert out.shape == (self.num_points, 2)
        return out


def mirror_permutation(num_points: int) -> np.ndarray:
    """For each landmark index, the index of its left/right mirror partner.

    On a face with equal per-side attenuation, point i and point perm[i]
    satisfy x_i = 1 - x_perm[i] and y_i = y_perm[i] (axis at x = 0.5).
    """
    layout = LAYOUTS[num_points]
    perm: list[int] = []
    base = 0

    def centered_row(n):
        nonlocal base
        perm.extend(base + n - 1 - k for k in range(n))
        base += n

    def paired(n):
        nonlocal base
        perm.extend(base + n + k for k in range(n))
        perm.extend(base + k for k in range(n))
        base += 2 * n

    centered_row(layout["jaw"])
    paired(layout["brow"])
    paired(layout["eye"])
    for _ in range(layout["nose_col"]):
        centered_row(1)
    centered_row(layout["nose_base"])
    if layout["mouth"] == "corners":
        centered_row(2)
        centered_row(1)
        centered_row(1)
    else:
        for n in (7, 5, 5, 3):
            centered_row(n)
    return np.asarray(perm)


# ---------------------------------------------------------------------------
# rendering


def _soft(v: np.ndarray, sharp: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-sharp * v))


def _ellipse(x, y, cx, cy, rx, ry, sharp=22.0):
    q = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
    return _soft(1.0 - q, sharp)


def _curve_band(x, y, xs, ys, radii, sharp=18.0):
    """Soft union of discs sampled along a curve."""
    mask = np.zeros_like(x)
    for px, py, r in zip(xs, ys, radii):
        d2 = (x - px) ** 2 + (y - py) ** 2
        mask = np.maximum(mask, _soft(1.0 - d2 / (r * r), sharp))
    return mask


def render_face(spec: SynthFaceSpec, resolution: int) -> np.ndarray:
    """Render to a float image [3, H, W] with values in [0, 1]."""
    ident = spec.identity
    c = (np.arange(resolution) + 0.5) / resolution
    y, x = np.meshgrid(c, c, indexing="ij")

    img = np.empty((3, resolution, resolution))
    img[:] = BG[:, None, None]

    def blend(mask, color):
        img[:] = np.asarray(color)[:, None, None] * mask + img * (1.0 - mask)

    blend(_ellipse(x, y, 0.5, 0.52, ident.face_rx, ident.face_ry), ident.skin)

    tone = np.asarray(ident.skin) * 0.38
    nose_top, nose_tip = spec._nose_span()
    ny = np.linspace(nose_top, nose_tip, 9)
    blend(_curve_band(x, y, np.full(9, 0.5), ny, np.full(9, 0.007)), tone)

    for s in (0, 1):
        bx, by, bw = spec._brow_geometry(s)
        u = np.linspace(-1.0, 1.0, 17)
        blend(_curve_band(x, y, bx + u * bw, by - 0.012 * (1 - u * u),
                          np.full(17, 0.009)), tone)

    for s in (0, 1):
        bx, ey, rx, ry = spec._eye_geometry(s)
        sclera = _ellipse(x, y, bx, ey, rx, ry)
        blend(sclera, SCLERA)
        iris = _ellipse(x, y, bx, ey, ident.eye_r * 0.5, ident.eye_r * 0.5)
        blend(iris * sclera, IRIS)

    u = np.linspace(-1.0, 1.0, 49)
    mx = 0.5 + u * ident.mouth_w / 2
    my = np.array([spec._mouth_center_y(v) for v in u])
    mr = np.array([spec._mouth_half_height(v) + 0.004 for v in u])
    blend(_curve_band(x, y, mx, my, mr), LIP)

    return np.clip(img, 0.0, 1.0)


def quantize(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img01 * 255.0), 0, 255).astype(np.uint8)


def to_unit_range(q: np.ndarray) -> torch.Tensor:
    """uint8 [3,H,W] -> float32 tensor in [-1, 1]."""
    return torch.from_numpy(q.astype(np.float32) / 127.5 - 1.0)


def save_image(img01: np.ndarray, path: Path) -> None:
    q = quantize(img01)
    Image.fromarray(np.moveaxis(q, 0, -1)).save(path, format="PNG")


def load_image(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        q = np.moveaxis(np.asarray(im.convert("RGB")), -1, 0)
    return to_unit_range(q)


def save_landmarks(points: np.ndarray, path: Path) -> None:
    path.write_text("".join(f"{px:.8f} {py:.8f}\n" for px, py in points))


def load_landmarks(path: Path) -> np.ndarray:
    rows = [line.split() for line in path.read_text().splitlines() if line.strip()]
    return np.asarray([[float(a), float(b)] for a, b in rows])


# ---------------------------------------------------------------------------
# sampling of factors


def sample_identity(rng: np.random.Generator) -> IdentityFactors:
    r = rng.uniform(0.60, 0.90)
    g = r * rng.uniform(0.75, 0.90)
    b = g * rng.uniform(0.70, 0.90)
    return IdentityFactors(
        face_rx=rng.uniform(0.28, 0.36),
        face_ry=rng.uniform(0.36, 0.44),
        eye_dx=rng.uniform(0.10, 0.15),
        eye_y=rng.uniform(0.38, 0.44),
        eye_r=rng.uniform(0.045, 0.065),
        brow_gap=rng.uniform(0.05, 0.08),
        mouth_y=rng.uniform(0.66, 0.72),
        mouth_w=rng.uniform(0.18, 0.28),
        nose_len=rng.uniform(0.07, 0.11),
        skin=(float(r), float(g), float(b)),
    )


def sample_expression(rng: np.random.Generator) -> ExpressionFactors:
    return ExpressionFactors(
        mouth_curve=rng.uniform(-0.04, 0.05),
        mouth_open=rng.uniform(0.0, 0.035),
        eye_open=rng.uniform(0.35, 1.0),
        brow_raise=rng.uniform(0.0, 0.05),
    )


def sample_palsy(rng: np.random.Generator) -> tuple[tuple[float, float], float]:
    severity = float(rng.uniform(0.0, 1.0))
    side = int(rng.integers(2))
    atten = (severity, 0.0) if side == 0 else (0.0, severity)
    return atten, severity


def expression_table(rng: np.random.Generator, count: int):
    """Shared expression set: entry 0 is neutral/symmetric, the rest palsied."""
    table = [(ExpressionFactors(0.0, 0.0, NEUTRAL_EYE_OPEN, 0.0), (0.0, 0.0), 0.0)]
    for _ in range(count - 1):
        expr = sample_expression(rng)
        atten, severity = sample_palsy(rng)
        table.append((expr, atten, severity))
    return table[:count]


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    person_id: str
    expression_id: int
    severity: float
    image_path: str
    landmark_path: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(self.root, [e for e in self.entries if e.split == name])

    def persons(self) -> list[str]:
        return sorted({e.person_id for e in self.entries})

    def validate(self) -> None:
        by_person: dict[str, set[str]] = {}
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.person_id] = counts.get(e.person_id, 0) + 1
            by_person.setdefault(e.person_id, set()).add(e.split)
            for rel in (e.image_path, e.landmark_path):
                if not (self.root / rel).exists():
                    raise FileNotFoundError(f"manifest path missing: {rel}")
        short = [p for p, n in counts.items() if n < 2]
        if short:
            raise ValueError(f"persons with fewer than 2 entries: {short}")
        mixed = [p for p, splits in by_person.items() if len(splits) > 1]
        if mixed:
            raise ValueError(f"persons straddle splits: {mixed}")

    def save(self, path: Path | None = None) -> Path:
        path = path or self.root / "manifest.jsonl"
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(dataclasses.asdict(e)) + "\n")
        return path


def load_manifest(root: Path, validate: bool = True) -> DatasetManifest:
    root = Path(root)
    entries = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            if line.strip():
                entries.append(ManifestEntry(**json.loads(line)))
    manifest = DatasetManifest(root, entries)
    if validate:
        manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetSpecs:
    """Generator parameters saved alongside a dataset (for fresh renders)."""

    resolution: int
    num_points: int
    seed: int
    identities: dict[str, IdentityFactors]
    expressions: list[tuple[ExpressionFactors, tuple[float, float], float]]
    splits: dict[str, str]

    def spec_for(self, person_id: str, expression_index: int) -> SynthFaceSpec:
        expr, atten, _ = self.expressions[expression_index]
        return SynthFaceSpec(self.identities[person_id], expr, atten, self.num_points)

    def save(self, path: Path) -> None:
        payload = {
            "format_version": 1,
            "resolution": self.resolution,
            "num_points": self.num_points,
            "seed": self.seed,
            "identities": {
                pid: dataclasses.asdict(f) for pid, f in self.identities.items()
            },
            "expressions": [
                {
                    "factors": dataclasses.asdict(e),
                    "attenuation": list(a),
                    "severity": s,
                }
                for e, a, s in self.expressions
            ],
            "splits": self.splits,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_specs(root: Path) -> DatasetSpecs:
    d = json.loads((Path(root) / "specs.json").read_text())

    def ident(sub):
        sub = dict(sub)
        sub["skin"] = tuple(sub["skin"])
        return IdentityFactors(**sub)

    return DatasetSpecs(
        resolution=d["resolution"],
        num_points=d["num_points"],
        seed=d["seed"],
        identities={pid: ident(f) for pid, f in d["identities"].items()},
        expressions=[
            (ExpressionFactors(**e["factors"]), tuple(e["attenuation"]), e["severity"])
            for e in d["expressions"]
        ],
        splits=d["splits"],
    )


def generate_synthetic_dataset(
    n_identities: int,
    expressions_per_identity: int,
    resolution: int,
    seed: int,
    out_dir: Path,
    *,
    num_points: int = 20,
    test_fraction: float = 0.12,
) -> DatasetManifest:
    """Render the full paired dataset; deterministic given seed.

    The split is by person (no person straddles train/test); the test share
    defaults to 12% with at least one person.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if expressions_per_identity < 2:
        raise ValueError("need at least 2 expressions per identity for pairing")
    if num_points not in LAYOUTS:
        raise ValueError(f"num_points must be one of {sorted(LAYOUTS)}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    identities = {f"p{i:03d}": sample_identity(rng) for i in range(n_identities)}
    table = expression_table(rng, expressions_per_identity)
    order = rng.permutation(n_identities)
    n_test = max(1, round(test_fraction * n_identities))
    test_ids = {f"p{i:03d}" for i in order[:n_test]}
    splits = {pid: ("test" if pid in test_ids else "train") for pid in identities}

    entries = []
    for pid, factors in identities.items():
        for j, (expr, atten, severity) in enumerate(table):
            spec = SynthFaceSpec(factors, expr, atten, num_points)
            stem = f"{pid}_e{j:02d}"
            img_rel = f"images/{stem}.png"
            lm_rel = f"landmarks/{stem}.txt"
            save_image(render_face(spec, resolution), out_dir / img_rel)
            save_landmarks(spec.landmarks(), out_dir / lm_rel)
            entries.append(
                ManifestEntry(pid, j, severity, img_rel, lm_rel, splits[pid])
            )

    manifest = DatasetManifest(out_dir, entries)
    manifest.save()
    DatasetSpecs(resolution, num_points, seed, identities, table, splits).save(
        out_dir / "specs.json"
    )
    logger.info(
        "generated %d images (%d identities x %d expressions) in %s",
        len(entries), n_identities, expressions_per_identity, out_dir,
    )
    return manifest


# ---------------------------------------------------------------------------
# pairing


@dataclass
class TrainingPair:
    """Two images of the same person: identity source and expression source."""

    x_id: torch.Tensor
    x0: torch.Tensor
    person_id: str | tuple[str, ...]


class PairSampler:
    """Uniformly samples same-person pairs of distinct entries.

    Persons with a single entry are excluded with a warning. All randomness
    comes from the supplied torch.Generator so callers can checkpoint it.
    """

    def __init__(self, manifest: DatasetManifest, generator: torch.Generator):
        self.g = generator
        groups: dict[str, list[int]] = {}
        for i, e in enumerate(manifest.entries):
            groups.setdefault(e.person_id, []).append(i)
        dropped = [p for p, idx in groups.items() if len(idx) < 2]
        for p in dropped:
            logger.warning("excluding person %s: only one entry, cannot pair", p)
        self.groups = {p: idx for p, idx in groups.items() if len(idx) >= 2}
        if not self.groups:
            raise ValueError("no pairable persons in manifest")
        self.persons = sorted(self.groups)
        self.images = torch.stack(
            [load_image(manifest.root / e.image_path) for e in manifest.entries]
        )

    def sample_batch(self, batch_size: int) -> TrainingPair:
        ids, x0s, pids = [], [], []
        for _ in range(batch_size):
            p = self.persons[
                int(torch.randint(len(self.persons), (1,), generator=self.g))
            ]
            idx = self.groups[p]
            i = int(torch.randint(len(idx), (1,), generator=self.g))
            j = int(torch.randint(len(idx) - 1, (1,), generator=self.g))
            if j >= i:
                j += 1
            ids.append(self.images[idx[i]])
            x0s.append(self.images[idx[j]])
            pids.append(p)
        return TrainingPair(torch.stack(ids), torch.stack(x0s), tuple(pids))


def make_pairs(manifest: DatasetManifest, seed: int):
    """Infinite seeded stream of single-sample TrainingPairs."""
    sampler = PairSampler(manifest, torch.Generator().manual_seed(seed))
    while True:
        batch = sampler.sample_batch(1)
        yield TrainingPair(batch.x_id, batch.x0, batch.person_id[0])
