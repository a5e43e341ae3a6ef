"""Deterministic toy crowd scenes, pedestrian removal and noisy-count generation.

Everything here is a pure function of its inputs and seeds. Pedestrians are
drawn as upright ellipses in a red hue band; distractors are rectangles in
blue, green or yellow bands; the background is a low-saturation texture.
Pixel values are quantised to multiples of 1/255 so PNG storage is lossless.
"""
from __future__ import annotations

import importlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from .exceptions import BackendNotConfiguredError

DISTRACTOR_KINDS = ("crate", "pole", "sign")

# (half-width, half-height) multipliers per distractor kind
_DISTRACTOR_SHAPE = {"crate": (1.3, 1.3), "pole": (0.5, 2.6), "sign": (1.8, 1.0)}

# Pedestrian ellipse semi-axes, in units of min(width, height) / 48.
PEDESTRIAN_RX = 1.0
PEDESTRIAN_RY = 1.8

DEFAULT_COUNTS = (1, 5, 10, 50, 100, 200)

RANKING_PROMPT = "An empty outside space. Nobody around. High resolution DSLR photography."
RANKING_NEGATIVE = "people, crowds, pedestrians, humans, 3d, cartoon, anime, painting"
COUNT_PROMPT = "A group of {N} people. High angle"
COUNT_NEGATIVE = "B&W, cartoon, anime, 3D, watercolor, artistic, geometric"
EMPTY_PROMPT = "an empty urban environment"
EMPTY_NEGATIVE = (
    "Humans, people, pedestrians, crowds, B&W, cartoon, anime, 3D, watercolor, "
    "artistic, geometric"
)


class Pedestrian(NamedTuple):
    x: float
    y: float
    scale: float


class Distractor(NamedTuple):
    x: float
    y: float
    scale: float
    kind: str


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth description of a toy crowd scene.

    The pedestrian count is ``len(pedestrians)``. ``perspective_factor``
    shrinks objects towards the top of the frame: an object at row ``y`` is
    drawn at ``1 / (1 + perspective_factor * (1 - y / height))`` of its size.
    """

    width: int
    height: int
    pedestrians: tuple = ()
    distractors: tuple = ()
    background_seed: int = 0
    perspective_factor: float = 0.5

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise ValueError("canvas dimensions must be non-negative")
        if self.perspective_factor < 0:
            raise ValueError("perspective_factor must be >= 0")
        peds = tuple(Pedestrian(*map(float, p)) for p in self.pedestrians)
        dis = tuple(
            Distractor(float(d[0]), float(d[1]), float(d[2]), str(d[3]))
            for d in self.distractors
        )
        for p in peds + dis:
            if not (0 <= p.x < self.width and 0 <= p.y < self.height):
                raise ValueError(f"placement ({p.x}, {p.y}) outside the canvas")
            if not p.scale > 0:
                raise ValueError("object scale must be > 0")
        for d in dis:
            if d.kind not in DISTRACTOR_KINDS:
                raise ValueError(f"unknown distractor kind {d.kind!r}")
        object.__setattr__(self, "pedestrians", peds)
        object.__setattr__(self, "distractors", dis)

    @property
    def count(self) -> int:
        return len(self.pedestrians)

    def size_factor(self, y: float) -> float:
        if self.height == 0:
            return 1.0
        return 1.0 / (1.0 + self.perspective_factor * (1.0 - y / self.height))


@dataclass(frozen=True, eq=False)
class RenderedImage:
    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 array, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class RankingPair:
    real: RenderedImage
    synthetic: RenderedImage
    hidden_real_count: int
    hidden_syn_count: int
    source_id: str
    variant_index: int = 0

    def __post_init__(self):
        if self.hidden_real_count < self.hidden_syn_count:
            raise ValueError("ranking pair violates real count >= synthetic count")
        if not 0 <= self.variant_index:
            raise ValueError("variant_index must be >= 0")


@dataclass(frozen=True, eq=False)
class NoisyCountExample:
    image: RenderedImage
    prompt_count: int
    hidden_true_count: int


@dataclass(frozen=True)
class PromptSpec:
    prompt: str = RANKING_PROMPT
    negative_prompt: str = RANKING_NEGATIVE
    strength: float = 0.45
    guidance_scale: float = 7.5
    steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.strength <= 1:
            raise ValueError("strength must lie in (0, 1]")
        if not self.guidance_scale > 0:
            raise ValueError("guidance_scale must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be a positive integer")

    @classmethod
    def for_count(cls, n: int, seed: int = 0, **kw) -> "PromptSpec":
        if n == 0:
            return cls(EMPTY_PROMPT, EMPTY_NEGATIVE, seed=seed, **kw)
        return cls(COUNT_PROMPT.format(N=n), COUNT_NEGATIVE, seed=seed, **kw)


# ---------------------------------------------------------------------------
# rendering


def to_unit_float(u8: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1]. The only conversion used anywhere, so that
    rendering and PNG decoding agree bit for bit."""
    return u8.astype(np.float32) / np.float32(255.0)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _background(height: int, width: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5CE7E])
    base = rng.uniform(0.32, 0.52)
    tint = rng.uniform(-0.035, 0.035, size=3)
    coarse = rng.normal(0.0, 1.0, size=(height // 12 + 2, width // 12 + 2))
    smooth = ndimage.zoom(
        coarse, (height / coarse.shape[0], width / coarse.shape[1]), order=1
    )[:height, :width]
    fine = rng.normal(0.0, 1.0, size=(height, width))
    ramp = np.linspace(-0.05, 0.05, height)[:, None]
    tex = base + 0.07 * smooth + 0.02 * fine + ramp
    return np.clip(tex[..., None] + tint, 0.1, 0.8)


def _object_rng(seed: int, x: float, y: float, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt, int(x * 64), int(y * 64)])


def _unit(spec: SceneSpec) -> float:
    return min(spec.width, spec.height) / 48.0


def _pixel_grid(x0, x1, y0, y1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs + 0.5, ys + 0.5


def _draw_distractor(img, spec: SceneSpec, d: Distractor):
    h, w = img.shape[:2]
    aw, ah = _DISTRACTOR_SHAPE[d.kind]
    s = d.scale * spec.size_factor(d.y) * _unit(spec)
    hw, hh = max(aw * s, 0.6), max(ah * s, 0.6)
    x0, x1 = max(int(math.floor(d.x - hw)), 0), min(int(math.ceil(d.x + hw)), w)
    y0, y1 = max(int(math.floor(d.y - hh)), 0), min(int(math.ceil(d.y + hh)), h)
    rng = _object_rng(spec.background_seed, d.x, d.y, 1)
    band = rng.integers(3)
    if band == 0:  # blue
        color = (rng.uniform(0.1, 0.35), rng.uniform(0.2, 0.4), rng.uniform(0.6, 0.9))
    elif band == 1:  # green
        color = (rng.uniform(0.1, 0.3), rng.uniform(0.55, 0.8), rng.uniform(0.15, 0.35))
    else:  # yellow, shares the red channel with pedestrians
        v = rng.uniform(0.7, 0.9)
        color = (v, v - rng.uniform(0.0, 0.1), rng.uniform(0.1, 0.3))
    px, py = _pixel_grid(x0, x1, y0, y1)
    inside = (np.abs(px - d.x) <= hw) & (np.abs(py - d.y) <= hh)
    cy, cx = int(d.y), int(d.x)
    inside[cy - y0, cx - x0] = True
    img[y0:y1, x0:x1][inside] = color


def _draw_pedestrian(img, spec: SceneSpec, p: Pedestrian):
    h, w = img.shape[:2]
    s = p.scale * spec.size_factor(p.y) * _unit(spec)
    rx, ry = max(PEDESTRIAN_RX * s, 0.5), max(PEDESTRIAN_RY * s, 0.5)
    x0, x1 = max(int(math.floor(p.x - rx)), 0), min(int(math.ceil(p.x + rx)), w)
    y0, y1 = max(int(math.floor(p.y - ry)), 0), min(int(math.ceil(p.y + ry)), h)
    rng = _object_rng(spec.background_seed, p.x, p.y, 2)
    color = np.array(
        [rng.uniform(0.78, 0.95), rng.uniform(0.08, 0.28), rng.uniform(0.08, 0.28)]
    )
    px, py = _pixel_grid(x0, x1, y0, y1)
    r2 = ((px - p.x) / rx) ** 2 + ((py - p.y) / ry) ** 2
    inside = r2 <= 1.0
    cy, cx = int(p.y), int(p.x)
    inside[cy - y0, cx - x0] = True
    shade = 0.88 + 0.12 * np.clip(1.0 - r2, 0.0, 1.0)
    img[y0:y1, x0:x1][inside] = shade[inside, None] * color


def render_scene(spec: SceneSpec, source_id: str = "") -> RenderedImage:
    if spec.width == 0 or spec.height == 0:
        raise ValueError("cannot render a zero-area canvas")
    img = _background(spec.height, spec.width, spec.background_seed)
    for d in spec.distractors:
        _draw_distractor(img, spec, d)
    for p in spec.pedestrians:
        _draw_pedestrian(img, spec, p)
    return RenderedImage(to_unit_float(to_uint8(img)), source_id)


def pedestrian_mask(pixels: np.ndarray) -> np.ndarray:
    """Pixels in the pedestrian hue band."""
    r, g, b = pixels[..., 0], pixels[..., 1], pixels[..., 2]
    return (r - np.maximum(g, b)) > 0.3


# ---------------------------------------------------------------------------
# scene sampling


def random_scene(
    rng: np.random.Generator,
    n_pedestrians: int,
    width: int = 96,
    height: int = 96,
    n_distractors: Optional[int] = None,
    perspective_factor: float = 0.5,
    max_distractors: int = 30,
    non_overlapping: bool = False,
    max_tries: int = 200,
) -> SceneSpec:
    """Sample a scene with exactly ``n_pedestrians`` people.

    With ``non_overlapping`` the pedestrian bounding boxes (grown by one
    pixel) are kept disjoint by rejection sampling, so every person is a
    separate connected component.
    """
    if n_distractors is None:
        n_distractors = int(rng.integers(0, max_distractors + 1))
    seed = int(rng.integers(2**31))
    probe = SceneSpec(width, height, background_seed=seed,
                      perspective_factor=perspective_factor)
    peds, boxes = [], []
    while len(peds) < n_pedestrians:
        for _ in range(max_tries):
            x, y = rng.uniform(0, width), rng.uniform(0, height)
            scale = rng.uniform(0.8, 1.25)
            if not non_overlapping:
                break
            s = scale * probe.size_factor(y) * _unit(probe)
            box = (x - PEDESTRIAN_RX * s - 1.5, x + PEDESTRIAN_RX * s + 1.5,
                   y - PEDESTRIAN_RY * s - 1.5, y + PEDESTRIAN_RY * s + 1.5)
            if all(box[1] < b[0] or b[1] < box[0] or box[3] < b[2] or b[3] < box[2]
                   for b in boxes):
                boxes.append(box)
                break
        else:
            raise ValueError(f"could not place {n_pedestrians} non-overlapping pedestrians")
        peds.append((min(x, width - 1e-6), min(y, height - 1e-6), scale))
    dis = [
        (rng.uniform(0, width), rng.uniform(0, height), rng.uniform(0.7, 1.4),
         DISTRACTOR_KINDS[int(rng.integers(len(DISTRACTOR_KINDS)))])
        for _ in range(n_distractors)
    ]
    return replace(probe, pedestrians=tuple(peds), distractors=tuple(dis))


def sample_source_scenes(
    n: int,
    rng_seed: int,
    max_count: int = 200,
    width: int = 96,
    height: int = 96,
    max_distractors: int = 30,
) -> list[SceneSpec]:
    """Cluttered "real-domain" source scenes with counts uniform on
    ``0..max_count``."""
    rng = np.random.default_rng(rng_seed)
    return [
        random_scene(rng, int(rng.integers(0, max_count + 1)), width, height,
                     max_distractors=max_distractors)
        for _ in range(n)
    ]


# ---------------------------------------------------------------------------
# pedestrian removal and ranking pairs


def removal_count(n: int, fraction: float) -> int:
    # guard against 0.3 * 10 == 2.9999999999999996
    return min(n, int(math.floor(fraction * n + 1e-9)))


def remove_pedestrians(spec: SceneSpec, removal_fraction: float, rng_seed: int) -> SceneSpec:
    """Remove ``floor(removal_fraction * n)`` pedestrians chosen uniformly at
    random, replacing each by a distractor at the same location."""
    if not 0.0 <= removal_fraction <= 1.0:
        raise ValueError("removal_fraction must lie in [0, 1]")
    n = spec.count
    k = removal_count(n, removal_fraction)
    rng = np.random.default_rng(rng_seed)
    removed = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    kinds = rng.integers(len(DISTRACTOR_KINDS), size=k)
    survivors = tuple(p for i, p in enumerate(spec.pedestrians) if i not in removed)
    added = tuple(
        Distractor(spec.pedestrians[i].x, spec.pedestrians[i].y,
                   spec.pedestrians[i].scale, DISTRACTOR_KINDS[int(kind)])
        for i, kind in zip(sorted(removed), kinds)
    )
    return replace(spec, pedestrians=survivors, distractors=spec.distractors + added)


def source_name(index: int) -> str:
    return f"src{index:05d}"


def make_ranking_dataset(
    sources: Sequence[SceneSpec],
    variants_per_source: int = 4,
    removal_range: tuple[float, float] = (0.3, 0.95),
    rng_seed: int = 0,
) -> list[RankingPair]:
    lo, hi = removal_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError("removal_range must satisfy 0 <= low <= high <= 1")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for i, spec in enumerate(sources):
        sid = source_name(i)
        real = render_scene(spec, sid)
        for v in range(variants_per_source):
            fraction = float(rng.uniform(lo, hi)) if hi > lo else lo
            syn_spec = remove_pedestrians(spec, fraction, int(rng.integers(2**31)))
            pairs.append(RankingPair(
                real=real,
                synthetic=render_scene(syn_spec, f"{sid}_v{v}"),
                hidden_real_count=spec.count,
                hidden_syn_count=syn_spec.count,
                source_id=sid,
                variant_index=v,
            ))
    return pairs


# ---------------------------------------------------------------------------
# noisy count data


def sample_true_counts(prompt_counts, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """round(c * exp(eta)), eta ~ N(0, sigma^2); zero prompts stay zero."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    c = np.asarray(prompt_counts, dtype=np.float64)
    eta = rng.normal(0.0, noise_sigma, size=c.shape) if noise_sigma > 0 else np.zeros(c.shape)
    return np.maximum(np.round(c * np.exp(eta)), 0).astype(np.int64)


def make_noisy_count_dataset(
    counts: Sequence[int] = DEFAULT_COUNTS,
    per_count: int = 60,
    empty_scenes: int = 60,
    noise_sigma: float = 0.5,
    rng_seed: int = 0,
    width: int = 96,
    height: int = 96,
    max_distractors: int = 2,
) -> list[NoisyCountExample]:
    """Prompt-count images. Prompted generations show the requested crowd
    against sparse clutter, unlike the source scenes; ``max_distractors``
    controls that domain gap."""
    if any(c <= 0 for c in counts):
        raise ValueError("prompt counts must be positive")
    rng = np.random.default_rng(rng_seed)
    prompts = np.repeat(np.asarray(counts, dtype=np.int64), per_count)
    truths = sample_true_counts(prompts, noise_sigma, rng)
    examples = []
    for j, (c, t) in enumerate(zip(prompts.tolist() + [0] * empty_scenes,
                                   truths.tolist() + [0] * empty_scenes)):
        spec = random_scene(rng, int(t), width, height,
                            perspective_factor=float(rng.uniform(0.0, 0.8)),
                            max_distractors=max_distractors)
        examples.append(NoisyCountExample(render_scene(spec, f"noisy{j:05d}"), int(c), int(t)))
    return examples


# ---------------------------------------------------------------------------
# diffusion backend adapter

GenerateFn = Callable[[Optional[RenderedImage], PromptSpec], RenderedImage]


def _unconfigured(source, prompt):
    raise BackendNotConfiguredError()


_BACKENDS: dict[str, GenerateFn] = {"default": _unconfigured}


def register_backend(name: str, fn: GenerateFn) -> None:
    _BACKENDS[name] = fn


def unregister_backend(name: str) -> None:
    if name == "default":
        _BACKENDS["default"] = _unconfigured
    else:
        _BACKENDS.pop(name, None)


def load_backend(name: str, entry_point: str) -> GenerateFn:
    """Import ``"package.module:attr"`` and register it under ``name``."""
    module, _, attr = entry_point.partition(":")
    fn = getattr(importlib.import_module(module), attr)
    register_backend(name, fn)
    return fn


def diffusion_generate(
    source: Optional[RenderedImage], prompt: PromptSpec, backend: str = "default"
) -> RenderedImage:
    try:
        fn = _BACKENDS[backend]
    except KeyError:
        raise BackendNotConfiguredError(backend) from None
    return fn(source, prompt)


@dataclass
class ToyRemovalBackend:
    """Backend that removes pedestrians from known toy scenes.

    Sources are looked up by ``source_id``; ``prompt.seed`` drives the
    removal. Hidden counts of each output are recorded in ``counts``.
    """

    scenes: dict
    removal_range: tuple = (0.3, 0.95)
    counts: dict = field(default_factory=dict)

    def __call__(self, source, prompt):
        if source is None:
            raise ValueError("toy removal backend needs a source image")
        spec = self.scenes[source.source_id]
        rng = np.random.default_rng(prompt.seed)
        lo, hi = self.removal_range
        syn = remove_pedestrians(spec, float(rng.uniform(lo, hi)), int(rng.integers(2**31)))
        out = render_scene(syn, f"{source.source_id}_seed{prompt.seed}")
        self.counts[out.source_id] = (spec.count, syn.count)
        return out
