"""Procedural meta-domain generator: face-proxy images with content/style factors.

Content classes (0 = real, 1..10 = spoof media) control the pattern drawn inside
an elliptical face region; style factors (illumination, environment, camera
quality) control brightness, background texture and blur/noise. Everything is a
pure function of seeds so splits regenerate bit-identically.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ILLUMINATION = ("normal", "strong", "back", "dark")
ENVIRONMENT = ("indoor", "outdoor")
CAMERA_QUALITY = ("low", "medium", "high")

N_CONTENT_CLASSES = 11

CONTENT_NAMES = (
    "real face", "photo", "poster", "a4-paper",
    "2d face mask", "2d upper-body mask", "2d region mask",
    "pc screen", "pad screen", "phone screen", "3d mask",
)

# label grouping: real | print {1,2,3} | 2D mask {4,5,6} | screen replay {7,8,9} | 3D mask {10}
_COARSE_1 = {0: 0, 1: 1, 2: 1, 3: 1, 4: 2, 5: 2, 6: 2, 7: 3, 8: 3, 9: 3, 10: 4}
_COARSE_2 = {0: 0, 1: 1, 2: 2, 3: 2, 4: 3, 5: 4, 6: 4, 7: 5, 8: 6, 9: 6, 10: 7}


@dataclass(frozen=True)
class StyleSpec:
    illumination: str
    environment: str
    camera_quality: str

    def __post_init__(self):
        if self.illumination not in ILLUMINATION:
            raise ValueError(f"illumination must be one of {ILLUMINATION}")
        if self.environment not in ENVIRONMENT:
            raise ValueError(f"environment must be one of {ENVIRONMENT}")
        if self.camera_quality not in CAMERA_QUALITY:
            raise ValueError(f"camera_quality must be one of {CAMERA_QUALITY}")

    def codes(self) -> tuple[int, int, int]:
        return (
            ILLUMINATION.index(self.illumination),
            ENVIRONMENT.index(self.environment),
            CAMERA_QUALITY.index(self.camera_quality),
        )


ALL_STYLES = tuple(
    StyleSpec(i, e, c) for i in ILLUMINATION for e in ENVIRONMENT for c in CAMERA_QUALITY
)


@dataclass
class RenderParams:
    """Per-style-value rendering parameters; every enum member must be covered."""

    brightness: dict[str, float]
    texture: dict[str, int]
    blur: dict[str, float]
    noise: dict[str, float]

    def validate(self) -> None:
        if set(self.brightness) != set(ILLUMINATION):
            raise ValueError("brightness must cover every illumination value")
        if set(self.texture) != set(ENVIRONMENT):
            raise ValueError("texture must cover every environment value")
        if set(self.blur) != set(CAMERA_QUALITY) or set(self.noise) != set(CAMERA_QUALITY):
            raise ValueError("blur/noise must cover every camera-quality value")


@dataclass
class DomainSpec:
    name: str
    render_params: RenderParams
    image_size: int = 32
    label_granularity: int = 3
    base_seed: int = 0

    def __post_init__(self):
        self.render_params.validate()
        if self.label_granularity not in (1, 2, 3):
            raise ValueError("label_granularity must be in {1, 2, 3}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DomainSpec":
        d = dict(d)
        d["render_params"] = RenderParams(**d["render_params"])
        return DomainSpec(**d)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    content_label: int
    style: StyleSpec
    mask: np.ndarray  # (H, W) float32, constant 0 or 1
    domain_id: str
    seed: int


def meta_domain_spec(image_size: int = 32, granularity: int = 3, base_seed: int = 0,
                     name: str = "meta") -> DomainSpec:
    """The single richly-labeled training domain."""
    params = RenderParams(
        brightness={"normal": 1.0, "strong": 1.45, "back": 0.62, "dark": 0.38},
        texture={"indoor": 0, "outdoor": 1},
        blur={"low": 1.1, "medium": 0.5, "high": 0.0},
        noise={"low": 0.09, "medium": 0.045, "high": 0.012},
    )
    return DomainSpec(name=name, render_params=params, image_size=image_size,
                      label_granularity=granularity, base_seed=base_seed)


def coarsen_label(content_label: int, granularity: int) -> int:
    if not 0 <= content_label < N_CONTENT_CLASSES:
        raise ValueError(f"content_label out of range: {content_label}")
    if granularity == 3:
        return content_label
    if granularity == 2:
        return _COARSE_2[content_label]
    if granularity == 1:
        return _COARSE_1[content_label]
    raise ValueError(f"granularity must be in {{1, 2, 3}}, got {granularity}")


def num_content_classes(granularity: int) -> int:
    return {1: 5, 2: 8, 3: 11}[granularity]


# -- rendering ----------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")


def _texture(texture_id: int, yy: np.ndarray, xx: np.ndarray, phase: float) -> np.ndarray:
    """Procedural background family indexed by texture id; ids >= 2 are unseen shifts."""
    fx = 1.5 + 1.3 * ((texture_id * 5) % 7)
    fy = 1.0 + 1.1 * ((texture_id * 3) % 5)
    stripes = 0.5 + 0.35 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase + 0.7 * texture_id)
    if texture_id % 2 == 1:
        cell = 3 + (texture_id % 4)
        n = yy.shape[0]
        checker = ((np.floor(yy * n / cell) + np.floor(xx * n / cell)) % 2)
        stripes = 0.6 * stripes + 0.4 * checker
    return stripes


# (frequency cycles, orientation rad, waveform) per content class; class 0 handled separately
_WAVEFORMS = ("sin", "sin", "sin", "sin", "square", "square", "square", "saw", "saw", "saw", "rings")


def _face_pattern(label: int, yy: np.ndarray, xx: np.ndarray, phase: float) -> np.ndarray:
    cy, cx = 0.5, 0.5
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if label == 0:
        # smooth skin-like shading with a faint vertical asymmetry
        return np.clip(0.78 - 1.1 * r2 + 0.08 * (yy - cy), 0.0, 1.0)
    freq = 2.5 + 0.9 * label
    theta = (label - 1) * np.pi / 10.0
    carrier = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase
    wave = _WAVEFORMS[label]
    if wave == "sin":
        p = np.sin(carrier)
    elif wave == "square":
        p = np.sign(np.sin(carrier))
    elif wave == "saw":
        p = 2.0 * ((carrier / (2 * np.pi)) % 1.0) - 1.0
    else:  # concentric rings
        p = np.sin(2 * np.pi * freq * np.sqrt(r2) + phase)
    return 0.5 + 0.45 * p


# mild per-class RGB tint so channels carry content signal too
_TINTS = np.array([
    [1.00, 0.88, 0.80], [0.95, 0.95, 1.05], [1.05, 0.90, 0.95], [0.90, 1.05, 0.95],
    [1.05, 1.00, 0.85], [0.85, 1.00, 1.05], [1.00, 0.85, 1.05], [0.80, 0.95, 1.10],
    [1.10, 0.95, 0.80], [0.95, 1.10, 0.85], [1.05, 1.05, 1.05],
])


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur along the two leading axes with reflect padding."""
    if sigma <= 0:
        return img
    radius = max(1, int(3.0 * sigma + 0.5))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.pad(moved, [(radius, radius)] + [(0, 0)] * (moved.ndim - 1), mode="reflect")
        acc = np.zeros_like(moved)
        for i, w in enumerate(kernel):
            acc += w * padded[i:i + moved.shape[0]]
        out = np.moveaxis(acc, 0, axis)
    return out


def _sample_seed(spec: DomainSpec, content_label: int, style: StyleSpec, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=spec.base_seed,
        spawn_key=(content_label, *style.codes(), index),
    )


def render_sample(content_label: int, style: StyleSpec, spec: DomainSpec, index: int) -> Sample:
    """Render one sample; bit-identical for identical (label, style, spec, index)."""
    if not 0 <= content_label < N_CONTENT_CLASSES:
        raise ValueError(f"content_label out of range: {content_label}")
    ss = _sample_seed(spec, content_label, style, index)
    rng = np.random.default_rng(ss)
    size = spec.image_size
    yy, xx = _grid(size)
    rp = spec.render_params

    bg_phase = rng.uniform(0, 2 * np.pi)
    bg = _texture(rp.texture[style.environment], yy, xx, bg_phase)

    pattern_phase = rng.uniform(0, 2 * np.pi)
    face = _face_pattern(content_label, yy, xx, pattern_phase)

    cy = 0.5 + rng.uniform(-0.04, 0.04)
    cx = 0.5 + rng.uniform(-0.04, 0.04)
    ry = 0.36 + rng.uniform(-0.03, 0.03)
    rx = 0.30 + rng.uniform(-0.03, 0.03)
    ellipse = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0

    gray = np.where(ellipse, face, 0.75 * bg)
    img = gray[:, :, None] * _TINTS[content_label][None, None, :]

    if style.illumination == "back":
        # backlit halo along the top edge
        img = img + 0.25 * np.exp(-((yy - 0.08) / 0.18) ** 2)[:, :, None]
    img = img * rp.brightness[style.illumination]

    img = _gaussian_blur(img, rp.blur[style.camera_quality])
    img = img + rng.normal(0.0, rp.noise[style.camera_quality], img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    mask_value = 0.0 if content_label == 0 else 1.0
    mask = np.full((size, size), mask_value, dtype=np.float32)
    return Sample(
        image=img,
        content_label=content_label,
        style=style,
        mask=mask,
        domain_id=spec.name,
        seed=int(ss.generate_state(1)[0]),
    )


def make_split(spec: DomainSpec, n: int, balanced: bool = True, index_offset: int = 0) -> list[Sample]:
    """Generate n samples; balanced splits cycle content classes and style combos."""
    if n <= 0:
        raise ValueError(f"n must be > 0, got {n}")
    samples = []
    if balanced:
        for i in range(n):
            idx = index_offset + i
            label = idx % N_CONTENT_CLASSES
            style = ALL_STYLES[idx % len(ALL_STYLES)]
            samples.append(render_sample(label, style, spec, idx))
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=spec.base_seed, spawn_key=(777, index_offset)))
        for i in range(n):
            idx = index_offset + i
            label = int(rng.integers(0, N_CONTENT_CLASSES))
            style = ALL_STYLES[int(rng.integers(0, len(ALL_STYLES)))]
            samples.append(render_sample(label, style, spec, idx))
    return samples


_BRIGHT_FACTORS = (1.22, 0.82, 1.34, 0.70, 1.46, 0.58)
_BLUR_DELTAS = (0.30, 0.55, 0.18, 0.70, 0.42, 0.85)
_NOISE_FACTORS = (1.8, 2.6, 1.4, 3.2, 2.2, 3.8)


def make_target_domains(base: DomainSpec, k: int) -> list[DomainSpec]:
    """k shifted target domains: style render parameters pushed outside the
    training values, unseen background textures, distinct seeds."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = []
    for i in range(k):
        bf = _BRIGHT_FACTORS[i % len(_BRIGHT_FACTORS)]
        bd = _BLUR_DELTAS[i % len(_BLUR_DELTAS)]
        nf = _NOISE_FACTORS[i % len(_NOISE_FACTORS)]
        rp = base.render_params
        params = RenderParams(
            brightness={key: round(v * bf, 6) for key, v in rp.brightness.items()},
            texture={key: v + 2 * (i + 1) for key, v in rp.texture.items()},
            blur={key: round(v + bd, 6) for key, v in rp.blur.items()},
            noise={key: round(v * nf, 6) for key, v in rp.noise.items()},
        )
        out.append(DomainSpec(
            name=f"{base.name}-shift{i + 1}",
            render_params=params,
            image_size=base.image_size,
            label_granularity=base.label_granularity,
            base_seed=base.base_seed + 1000 + 17 * (i + 1),
        ))
    return out


# -- persistence ----------------------------------------------------------------


def save_split(samples: list[Sample], spec: DomainSpec, out_dir: str | Path) -> None:
    """Persist a split as stacked raw tensors plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    np.save(out / "images.npy", images)
    np.save(out / "masks.npy", masks)
    manifest = {
        "spec": spec.to_dict(),
        "n": len(samples),
        "samples": [
            {
                "content_label": s.content_label,
                "illumination": s.style.illumination,
                "environment": s.style.environment,
                "camera_quality": s.style.camera_quality,
                "domain_id": s.domain_id,
                "seed": s.seed,
            }
            for s in samples
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_split(in_dir: str | Path) -> tuple[list[Sample], DomainSpec]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    spec = DomainSpec.from_dict(manifest["spec"])
    images = np.load(src / "images.npy")
    masks = np.load(src / "masks.npy")
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        samples.append(Sample(
            image=images[i],
            content_label=rec["content_label"],
            style=StyleSpec(rec["illumination"], rec["environment"], rec["camera_quality"]),
            mask=masks[i],
            domain_id=rec["domain_id"],
            seed=rec["seed"],
        ))
    return samples, spec
