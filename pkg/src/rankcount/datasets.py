"""JSON-lines manifests, source-grouped splits, augmentation and point labels."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .exceptions import DataValidationError
from .synth import (
    NoisyCountExample,
    RankingPair,
    RenderedImage,
    to_uint8,
    to_unit_float,
)
from .validation import check_images

ROLES = ("rank_real", "rank_syn", "noisy")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    role: str
    image_path: str
    hidden_count: Optional[int]
    pair_id: Optional[str] = None
    prompt_count: Optional[int] = None

    def to_json(self) -> str:
        # hidden_count is kept as null when an external generator cannot know it
        d = {k: v for k, v in asdict(self).items() if v is not None or k == "hidden_count"}
        order = ("id", "role", "image_path", "pair_id", "prompt_count", "hidden_count")
        return json.dumps({k: d[k] for k in order if k in d})


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    root_dir: Path = Path(".")
    split_seed: int = 0

    def __len__(self):
        return len(self.records)

    def path_of(self, record: ManifestRecord) -> Path:
        return self.root_dir / record.image_path

    def group_of(self, record: ManifestRecord) -> str:
        return record.pair_id if record.pair_id is not None else record.id

    def groups(self) -> list[str]:
        seen = {}
        for r in self.records:
            seen.setdefault(self.group_of(r), None)
        return list(seen)

    def select_groups(self, groups) -> "DatasetManifest":
        keep = set(groups)
        return replace(self, records=tuple(r for r in self.records if self.group_of(r) in keep))

    def pairs(self) -> list[tuple[ManifestRecord, ManifestRecord]]:
        """(real, synthetic) record pairs, one per synthetic record."""
        real = {r.pair_id: r for r in self.records if r.role == "rank_real"}
        return [(real[r.pair_id], r) for r in self.records if r.role == "rank_syn"]

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")
        return path


@dataclass(frozen=True)
class SplitConfig:
    validation_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class AugmentationConfig:
    horizontal_flip_prob: float = 0.5
    brightness_jitter: float = 0.2
    resize_to: tuple = (640, 853)


# ---------------------------------------------------------------------------
# images on disk


def write_image(pixels: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def read_image(path, source_id: str = "") -> RenderedImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return RenderedImage(to_unit_float(arr), source_id or Path(path).stem)


def load_images(manifest: DatasetManifest, records: Sequence[ManifestRecord],
                size=None, chunk: int = 256) -> torch.Tensor:
    """Decode ``records`` into an NCHW tensor, resized to ``size`` if given."""
    out = []
    for i in range(0, len(records), chunk):
        ims = [read_image(manifest.path_of(r)) for r in records[i:i + chunk]]
        out.append(check_images(ims, size, resize=size is not None))
    if not out:
        return torch.zeros((0, 3) + (tuple(size) if size else (0, 0)))
    return torch.cat(out)


# ---------------------------------------------------------------------------
# manifest writing and loading


def write_ranking_manifest(pairs: Sequence[RankingPair], out_dir, name="manifest.jsonl") -> DatasetManifest:
    out_dir = Path(out_dir)
    records, written = [], set()
    for p in pairs:
        sid = p.source_id
        if sid not in written:
            rel = f"images/{sid}_real.png"
            write_image(p.real.pixels, out_dir / rel)
            records.append(ManifestRecord(f"{sid}_real", "rank_real", rel,
                                          p.hidden_real_count, pair_id=sid))
            written.add(sid)
        rel = f"images/{sid}_v{p.variant_index}.png"
        write_image(p.synthetic.pixels, out_dir / rel)
        records.append(ManifestRecord(f"{sid}_v{p.variant_index}", "rank_syn", rel,
                                      p.hidden_syn_count, pair_id=sid))
    manifest = DatasetManifest(tuple(records), out_dir)
    manifest.write(out_dir / name)
    return manifest


def write_noisy_manifest(examples: Sequence[NoisyCountExample], out_dir, name="manifest.jsonl") -> DatasetManifest:
    out_dir = Path(out_dir)
    records = []
    for j, ex in enumerate(examples):
        rid = ex.image.source_id or f"noisy{j:05d}"
        rel = f"images/{rid}.png"
        write_image(ex.image.pixels, out_dir / rel)
        records.append(ManifestRecord(rid, "noisy", rel, ex.hidden_true_count,
                                      prompt_count=ex.prompt_count))
    manifest = DatasetManifest(tuple(records), out_dir)
    manifest.write(out_dir / name)
    return manifest


def _parse_record(i: int, obj) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise DataValidationError(f"record {i}: expected a JSON object")
    for key in ("id", "role", "image_path", "hidden_count"):
        if key not in obj:
            raise DataValidationError(f"record {i}: missing field {key!r}")
    unknown = set(obj) - {"id", "role", "image_path", "pair_id", "prompt_count", "hidden_count"}
    if unknown:
        raise DataValidationError(f"record {i}: unknown fields {sorted(unknown)}")
    if obj["role"] not in ROLES:
        raise DataValidationError(f"record {i}: unknown role {obj['role']!r}")
    for key in ("hidden_count", "prompt_count"):
        v = obj.get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 0):
            raise DataValidationError(f"record {i}: {key} must be a non-negative integer")
    if obj["role"] != "noisy" and not obj.get("pair_id"):
        raise DataValidationError(f"record {i}: ranking records need a pair_id")
    if obj["role"] == "noisy" and obj.get("prompt_count") is None:
        raise DataValidationError(f"record {i}: noisy records need a prompt_count")
    return ManifestRecord(
        id=str(obj["id"]), role=obj["role"], image_path=str(obj["image_path"]),
        hidden_count=obj["hidden_count"], pair_id=obj.get("pair_id"),
        prompt_count=obj.get("prompt_count"),
    )


def load_manifest(path, root_dir=None, split_seed: int = 0, check_files: bool = True) -> DatasetManifest:
    """Read and eagerly validate a JSON-lines manifest.

    Image paths are relative to ``root_dir`` (default: the manifest's
    directory). Every problem is reported with its record index.
    """
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"manifest not found: {path}")
    root = Path(root_dir) if root_dir is not None else path.parent
    records = []
    with open(path) as fh:
        for i, line in enumerate(l for l in fh if l.strip()):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"record {i}: malformed JSON ({exc.msg})") from None
            records.append(_parse_record(i, obj))

    ids = set()
    for i, r in enumerate(records):
        if r.id in ids:
            raise DataValidationError(f"record {i}: duplicate id {r.id!r}")
        ids.add(r.id)
    reals: dict[str, int] = {}
    syns: dict[str, int] = {}
    for i, r in enumerate(records):
        if r.role == "rank_real":
            if r.pair_id in reals:
                raise DataValidationError(f"record {i}: pair_id {r.pair_id!r} has more than one real image")
            reals[r.pair_id] = i
        elif r.role == "rank_syn":
            syns.setdefault(r.pair_id, i)
    for pid, i in syns.items():
        if pid not in reals:
            raise DataValidationError(f"record {i}: pair_id {pid!r} references no real image")
    for pid, i in reals.items():
        if pid not in syns:
            raise DataValidationError(f"record {i}: pair_id {pid!r} has no synthetic image")

    manifest = DatasetManifest(tuple(records), root, split_seed)
    if check_files:
        for i, r in enumerate(records):
            p = manifest.path_of(r)
            if not p.is_file():
                raise DataValidationError(f"record {i}: missing image file {p}")
            try:
                with Image.open(p) as im:
                    im.verify()
            except Exception as exc:
                raise DataValidationError(f"record {i}: cannot decode {p} ({exc})") from None
    return manifest


# ---------------------------------------------------------------------------
# splitting


def split(manifest: DatasetManifest, cfg: SplitConfig = SplitConfig()):
    """Split by source group so a source and its variants stay together."""
    if not len(manifest):
        raise ValueError("cannot split an empty manifest")
    groups = manifest.groups()
    n_val = int(math.floor(cfg.validation_fraction * len(groups) + 0.5))
    order = np.random.default_rng(cfg.seed).permutation(len(groups))
    val = {groups[i] for i in order[:n_val]}
    train = [g for g in groups if g not in val]
    return manifest.select_groups(train), manifest.select_groups(val)


# ---------------------------------------------------------------------------
# augmentation


def draw_augmentation(rng: np.random.Generator, n: int, cfg: AugmentationConfig):
    """Per-pair flip flags and brightness factors."""
    flips = rng.random(n) < cfg.horizontal_flip_prob
    j = cfg.brightness_jitter
    factors = rng.uniform(1.0 - j, 1.0 + j, size=n) if j > 0 else np.ones(n)
    return flips, factors


def augment_batch(real: torch.Tensor, syn: torch.Tensor, flips, factors):
    """Apply the same flip and brightness scaling to both sides of each pair."""
    flips = torch.as_tensor(np.asarray(flips), dtype=torch.bool).view(-1, 1, 1, 1)
    k = torch.as_tensor(np.asarray(factors), dtype=real.dtype).view(-1, 1, 1, 1)
    out = []
    for x in (real, syn):
        x = torch.where(flips, x.flip(-1), x)
        out.append((x * k).clamp_(0.0, 1.0))
    return out[0], out[1]


def augment(pair: RankingPair, cfg: AugmentationConfig = AugmentationConfig(), rng_seed: int = 0) -> RankingPair:
    rng = np.random.default_rng(rng_seed)
    flips, factors = draw_augmentation(rng, 1, cfg)
    real = check_images([pair.real], cfg.resize_to, resize=True)
    syn = check_images([pair.synthetic], cfg.resize_to, resize=True)
    real, syn = augment_batch(real, syn, flips, factors)

    def back(x, like):
        return RenderedImage(x[0].permute(1, 2, 0).numpy().copy(), like.source_id)

    return replace(pair, real=back(real, pair.real), synthetic=back(syn, pair.synthetic))


def resize(image, size) -> RenderedImage:
    x = check_images([image], size, resize=True)
    sid = image.source_id if isinstance(image, RenderedImage) else ""
    return RenderedImage(x[0].permute(1, 2, 0).numpy().copy(), sid)


# ---------------------------------------------------------------------------
# point annotations


def write_point_annotations(items, path) -> Path:
    """``items``: iterable of (image_path, points). Paths are written as given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = [{"image_path": str(p), "points": [[float(x), float(y)] for x, y in pts]}
            for p, pts in items]
    path.write_text(json.dumps(data, indent=1))
    return path


def load_point_annotations(path) -> list[tuple[str, int]]:
    """Reduce a JSON list of ``{image_path, points}`` to (image_path, count).

    Relative image paths are resolved against the annotation file's folder.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"malformed annotation JSON in {path}: {exc.msg}") from None
    if isinstance(data, dict):
        data = data.get("images", data.get("annotations"))
    if not isinstance(data, list):
        raise DataValidationError(f"{path}: expected a list of annotation entries")
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict) or "image_path" not in entry or "points" not in entry:
            raise DataValidationError(f"entry {i}: needs 'image_path' and 'points'")
        pts = entry["points"]
        if not isinstance(pts, list):
            raise DataValidationError(f"entry {i}: 'points' must be a list")
        for pt in pts:
            if (not isinstance(pt, (list, tuple)) or len(pt) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pt)):
                raise DataValidationError(f"entry {i}: points must be [x, y] number pairs")
            if pt[0] < 0 or pt[1] < 0:
                raise DataValidationError(f"entry {i}: negative point coordinate {pt}")
        img = Path(entry["image_path"])
        if not img.is_absolute():
            img = path.parent / img
        out.append((str(img), len(pts)))
    return out
