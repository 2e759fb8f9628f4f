"""Procedural dermoscopy-like lesions with controllable melanoma traits.

Every lesion is a textured, slightly irregular ellipse on textured skin.
Melanoma samples additionally carry traits, each aimed at one feature
classifier: a ragged outline (border), two-tone coloring split by a line
through the lesion (color asymmetry), a bluish-white veil patch (masked
lesion), and fine dark speckles near the center (center crop).

All samples, benign ones included, get a small random dose of outline
irregularity and two-tone contrast as nuisance variation, so the traits
are a matter of degree rather than presence alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .imaging import save_image, save_mask
from .manifest import SampleManifest, stratified_kfold, write_manifest

TRAITS = ("ragged", "asymmetry", "veil", "speckle")
TRAITS_HEADER = ["id", "label", *TRAITS, *(f"{t}_strength" for t in TRAITS)]

SKIN = np.array([0.86, 0.70, 0.60])
LESION = np.array([0.46, 0.31, 0.22])
VEIL = np.array([0.58, 0.66, 0.86])

# trait amplitudes at strength 1
RAGGED_AMPLITUDE = 0.35
ASYM_CONTRAST = 0.45
VEIL_ALPHA = 0.65
SPECKLE_COUNT = 70
# nuisance ranges (uniform on [0, max])
NUISANCE_RAGGED = 0.05
NUISANCE_ASYM = 0.14


@dataclass(frozen=True)
class SyntheticParams:
    n_samples: int = 400
    image_size: int = 128
    melanoma_fraction: float = 0.18
    ragged: float = 1.0
    asymmetry: float = 1.0
    veil: float = 1.0
    speckle: float = 1.0
    seed: int = 0
    k_folds: int = 5
    # "exclusive": each melanoma carries exactly one enabled trait (cycled);
    # "all": every melanoma carries every enabled trait
    trait_mode: str = "exclusive"
    nuisance: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if not 0.0 < self.melanoma_fraction < 1.0:
            raise ValueError("melanoma_fraction must lie in (0, 1)")
        if self.trait_mode not in ("exclusive", "all"):
            raise ValueError("trait_mode must be 'exclusive' or 'all'")
        if min(self.ragged, self.asymmetry, self.veil, self.speckle, self.nuisance) < 0:
            raise ValueError("effect strengths must be non-negative")

    def strength(self, trait: str) -> float:
        return float(getattr(self, trait))

    @property
    def enabled_traits(self) -> tuple[str, ...]:
        return tuple(t for t in TRAITS if self.strength(t) > 0)


@dataclass
class LesionSpec:
    """Everything needed to render one lesion; traits are strengths in [0, 1+]."""

    traits: dict = field(default_factory=lambda: dict.fromkeys(TRAITS, 0.0))
    nuisance_ragged: float = 0.0
    nuisance_asym: float = 0.0


@dataclass
class SyntheticSample:
    id: str
    label: int
    flags: dict
    strengths: dict


def n_melanoma(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction))


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndi.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def render_lesion(rng: np.random.Generator, size: int, spec: LesionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw one lesion; returns ``(image, exact_mask)``."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    # skin
    skin = SKIN * rng.uniform(0.93, 1.05, 3)
    img = skin[None, None, :] * (1.0 + 0.035 * _smooth_noise(rng, (h, w), size / 10)[..., None])
    img += 0.012 * rng.standard_normal((h, w, 3))

    # outline
    cx = w / 2 + rng.uniform(-0.05, 0.05) * w
    cy = h / 2 + rng.uniform(-0.05, 0.05) * h
    r0 = rng.uniform(0.21, 0.27) * size
    aspect = rng.uniform(0.72, 0.95)
    phi = rng.uniform(0, math.pi)
    dx, dy = xx - cx, yy - cy
    theta = np.arctan2(dy, dx)
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    rho = np.hypot(u, v / aspect)
    wobble = 1.0 + sum(
        rng.uniform(0.0, 0.035) * np.cos(k * theta + rng.uniform(0, 2 * math.pi)) for k in (2, 3)
    )
    rag_amp = spec.nuisance_ragged + RAGGED_AMPLITUDE * spec.traits["ragged"]
    if rag_amp > 0:
        ks = np.arange(7, 19)
        amps = rng.uniform(0.5, 1.0, ks.size)
        amps *= rag_amp / amps.sum() * 2.2
        phases = rng.uniform(0, 2 * math.pi, ks.size)
        wobble = wobble + sum(a * np.cos(k * theta + p) for a, k, p in zip(amps, ks, phases))
    mask = rho <= r0 * wobble

    # lesion body
    body = LESION * rng.uniform(0.8, 1.1)
    lesion = body[None, None, :] * (1.0 + 0.06 * _smooth_noise(rng, (h, w), size / 24)[..., None])
    lesion *= 1.0 - 0.12 * np.clip(1.0 - np.hypot(dx, dy) / r0, 0, 1)[..., None]

    contrast = spec.nuisance_asym + ASYM_CONTRAST * spec.traits["asymmetry"]
    if contrast > 0:
        psi = rng.uniform(0, 2 * math.pi)
        side = dx * math.cos(psi) + dy * math.sin(psi) - rng.uniform(-0.1, 0.25) * r0
        dark = 1.0 / (1.0 + np.exp(-side / 1.5))
        lesion *= (1.0 - contrast * dark)[..., None]

    if spec.traits["veil"] > 0:
        ang = rng.uniform(0, 2 * math.pi)
        off = rng.uniform(0.0, 0.3) * r0
        vx, vy = cx + off * math.cos(ang), cy + off * math.sin(ang)
        vr = rng.uniform(0.35, 0.5) * r0
        blob = np.clip((vr - np.hypot(xx - vx, yy - vy)) / 3.0, 0, 1)
        alpha = VEIL_ALPHA * spec.traits["veil"] * blob * (1.0 + 0.1 * _smooth_noise(rng, (h, w), 2.0))
        alpha = np.clip(alpha, 0, 1)[..., None]
        lesion = lesion * (1 - alpha) + VEIL[None, None, :] * alpha

    if spec.traits["speckle"] > 0:
        count = int(round(SPECKLE_COUNT * spec.traits["speckle"]))
        rad = np.sqrt(rng.uniform(0, 1, count)) * 0.55 * r0
        ang = rng.uniform(0, 2 * math.pi, count)
        sx, sy = cx + rad * np.cos(ang), cy + rad * np.sin(ang)
        sr = rng.uniform(0.7, 1.3, count)
        dots = np.zeros((h, w))
        for x0, y0, r in zip(sx, sy, sr):
            x_lo, x_hi = max(int(x0 - 3), 0), min(int(x0 + 4), w)
            y_lo, y_hi = max(int(y0 - 3), 0), min(int(y0 + 4), h)
            d = np.hypot(xx[y_lo:y_hi, x_lo:x_hi] - x0, yy[y_lo:y_hi, x_lo:x_hi] - y0)
            dots[y_lo:y_hi, x_lo:x_hi] = np.maximum(dots[y_lo:y_hi, x_lo:x_hi], np.clip(r + 0.5 - d, 0, 1))
        lesion *= (1.0 - 0.7 * dots)[..., None]

    img = np.where(mask[..., None], lesion, img)
    return np.clip(img, 0.0, 1.0), mask


def _sample_specs(params: SyntheticParams, rng: np.random.Generator) -> list[tuple[int, LesionSpec, dict]]:
    n = params.n_samples
    n_mel = n_melanoma(n, params.melanoma_fraction)
    labels = np.zeros(n, dtype=int)
    labels[rng.permutation(n)[:n_mel]] = 1
    enabled = params.enabled_traits
    mel_order = rng.permutation(np.flatnonzero(labels == 1))
    carried: dict[int, tuple[str, ...]] = {}
    for j, idx in enumerate(mel_order):
        if not enabled:
            carried[int(idx)] = ()
        elif params.trait_mode == "all":
            carried[int(idx)] = enabled
        else:
            carried[int(idx)] = (enabled[j % len(enabled)],)

    out = []
    for i in range(n):
        spec = LesionSpec(
            nuisance_ragged=params.nuisance * rng.uniform(0, NUISANCE_RAGGED),
            nuisance_asym=params.nuisance * rng.uniform(0, NUISANCE_ASYM),
        )
        flags = dict.fromkeys(TRAITS, 0)
        for t in carried.get(i, ()):
            spec.traits[t] = params.strength(t) * rng.uniform(0.6, 1.0)
            flags[t] = 1
        out.append((int(labels[i]), spec, flags))
    return out


def generate_synthetic(params: SyntheticParams, out_dir) -> tuple[list[SampleManifest], list[SyntheticSample]]:
    """Render the dataset and write ``images/``, ``masks/``, ``manifest.csv`` and ``traits.csv``.

    Exactly ``floor(n * melanoma_fraction)`` samples are melanoma.  Folds are
    assigned with :func:`stratified_kfold` from the same seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    spec_seq, render_seq = np.random.SeedSequence(params.seed).spawn(2)
    specs = _sample_specs(params, np.random.default_rng(spec_seq))
    width = max(4, len(str(params.n_samples - 1)))

    samples, meta = [], []
    for i, ((label, spec, flags), child) in enumerate(zip(specs, render_seq.spawn(len(specs)))):
        sid = f"s{i:0{width}d}"
        img, mask = render_lesion(np.random.default_rng(child), params.image_size, spec)
        img_path = out_dir / "images" / f"{sid}.png"
        mask_path = out_dir / "masks" / f"{sid}.png"
        save_image(img_path, img)
        save_mask(mask_path, mask)
        samples.append(SampleManifest(sid, str(img_path), str(mask_path), label, -1, flags["veil"]))
        meta.append(SyntheticSample(sid, label, flags, {t: spec.traits[t] for t in TRAITS}))

    samples = stratified_kfold(samples, params.k_folds, params.seed)
    write_manifest(out_dir / "manifest.csv", samples)
    write_traits(out_dir / "traits.csv", meta)
    return samples, meta


def write_traits(path, meta: list[SyntheticSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAITS_HEADER)
        for m in meta:
            w.writerow([m.id, m.label, *(m.flags[t] for t in TRAITS), *(format(m.strengths[t], ".17g") for t in TRAITS)])


def read_traits(path) -> dict[str, dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {
            row["id"]: {t: int(row[t]) for t in TRAITS} | {"label": int(row["label"])}
            for row in csv.DictReader(fh)
        }


def render_probe(params: SyntheticParams, traits: dict, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """A lesion with the given trait strengths and nuisance fixed at mid-range.

    Used to ask what each feature classifier says about a lesion that shows
    one trait clearly and is otherwise typical.
    """
    spec = LesionSpec(
        nuisance_ragged=params.nuisance * NUISANCE_RAGGED / 2,
        nuisance_asym=params.nuisance * NUISANCE_ASYM / 2,
    )
    spec.traits.update(traits)
    return render_lesion(np.random.default_rng(seed), params.image_size, spec)
