"""Procedural "colored shapes" corpus with captions and class labels.

Every sample is rendered from its own random stream keyed on
``(seed, split, class_id, index)`` so that generation is order independent
and splits never share a stream. Besides train/test there is a ``pretrain``
split that only the surrogate sees, standing in for its web-scale corpus.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "pretrain")
_SPLIT_CODE = {"train": 0, "test": 1, "pretrain": 2}

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.85, 0.1),
    "blue": (0.1, 0.2, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}

DEFAULT_TEMPLATES = (
    "a photo of a {color} {shape}",
    "a {color} {shape}",
    "a picture showing a {color} {shape}",
    "there is a {color} {shape} in the image",
)


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    samples_per_class: dict[str, int] = field(
        default_factory=lambda: {"train": 150, "test": 50, "pretrain": 150})
    caption_templates: tuple[str, ...] = DEFAULT_TEMPLATES
    seed: int = 0
    # opacity of the shape over the background; low values keep the class
    # signal subtle relative to an 8/255 perturbation, as on natural images
    contrast: float = 0.2

    @property
    def num_classes(self) -> int:
        return len(self.shapes) * len(self.colors)

    def count(self, split: str) -> int:
        return self.samples_per_class[split] * self.num_classes

    def class_parts(self, class_id: int) -> tuple[str, str]:
        """(color, shape) for a class id; classes are ordered color-major."""
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class_id {class_id} out of range [0, {self.num_classes})")
        return self.colors[class_id // len(self.shapes)], self.shapes[class_id % len(self.shapes)]

    def validate(self) -> None:
        if len(self.shapes) < 2:
            raise ValueError("shapes: need at least 2 shapes")
        if len(self.colors) < 2:
            raise ValueError("colors: need at least 2 colors")
        if len(self.caption_templates) < 1:
            raise ValueError("caption_templates: need at least 1 template")
        if self.image_size < 8:
            raise ValueError("image_size: must be >= 8")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast: must be in (0, 1]")
        unknown = [s for s in self.shapes if s not in _SHAPE_MASKS]
        if unknown:
            raise ValueError(f"shapes: unknown shape(s) {unknown}")
        unknown = [c for c in self.colors if c not in PALETTE]
        if unknown:
            raise ValueError(f"colors: unknown color(s) {unknown}")
        for t in self.caption_templates:
            if "{color}" not in t or "{shape}" not in t:
                raise ValueError(f"caption_templates: {t!r} lacks a {{color}} or {{shape}} slot")
        for split in SPLITS:
            if self.samples_per_class.get(split, 0) < 1:
                raise ValueError(f"samples_per_class: {split} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["colors"] = list(self.colors)
        d["caption_templates"] = list(self.caption_templates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {"image_size", "shapes", "colors", "samples_per_class", "caption_templates", "seed",
                 "contrast"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown dataset field(s): {sorted(extra)}")
        kw = dict(d)
        for k in ("shapes", "colors", "caption_templates"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "samples_per_class" in kw:
            kw["samples_per_class"] = {k: int(v) for k, v in kw["samples_per_class"].items()}
        return cls(**kw)


@dataclass
class CaptionedSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    caption: str
    class_id: int
    template_id: int


@dataclass
class ManifestEntry:
    id: str
    file: str
    caption: str
    class_id: int
    template_id: int


@dataclass
class DatasetManifest:
    spec: DatasetSpec
    split: str
    entries: list[ManifestEntry]
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"spec": self.spec.to_dict(), "split": self.split,
             "entries": [asdict(e) for e in self.entries], **self.extra}
        return json.dumps(d, indent=1, sort_keys=True)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in d.pop("entries")]
        spec = DatasetSpec.from_dict(d.pop("spec"))
        split = d.pop("split")
        return cls(spec=spec, split=split, entries=entries, root=path.parent, extra=d)


def caption_for(class_id: int, template_id: int, spec: DatasetSpec) -> str:
    if not 0 <= template_id < len(spec.caption_templates):
        raise IndexError(
            f"template_id {template_id} out of range [0, {len(spec.caption_templates)})")
    color, shape = spec.class_parts(class_id)
    return spec.caption_templates[template_id].format(color=color, shape=shape)


def class_from_caption(caption: str, spec: DatasetSpec) -> int:
    """Recover the class id from the color and shape words in a caption."""
    words = set(re.findall(r"[a-z]+", caption.lower()))
    colors = [i for i, c in enumerate(spec.colors) if c in words]
    shapes = [i for i, s in enumerate(spec.shapes) if s in words]
    if len(colors) != 1 or len(shapes) != 1:
        raise ValueError(f"caption {caption!r} does not name exactly one color and one shape")
    return colors[0] * len(spec.shapes) + shapes[0]


# --- rendering -------------------------------------------------------------

def _circle(dx, dy, r):
    return dx * dx + dy * dy <= r * r


def _square(dx, dy, r):
    s = 0.82 * r
    return (np.abs(dx) <= s) & (np.abs(dy) <= s)


def _triangle(dx, dy, r):
    # apex up; y grows downwards in image coordinates
    top, bottom = -r, 0.7 * r
    t = (dy - top) / (bottom - top)
    return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= t * r * 0.95)


def _cross(dx, dy, r):
    w = r / 3.0
    return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))


_SHAPE_MASKS = {"circle": _circle, "square": _square, "triangle": _triangle, "cross": _cross}
_SUPERSAMPLE = 4


def sample_rng(seed: int, split: str, class_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODE[split], class_id, index]))


def render_sample(spec: DatasetSpec, split: str, class_id: int, index: int) -> np.ndarray:
    """Render one image as float64 H x W x 3 in [0, 1]; already on the 1/255 grid."""
    rng = sample_rng(spec.seed, split, class_id, index)
    n = spec.image_size
    color, shape = spec.class_parts(class_id)

    radius = 0.25 * n * rng.uniform(0.8, 1.2)
    margin = radius + 1.0
    cx = rng.uniform(margin, n - margin)
    cy = rng.uniform(margin, n - margin)
    background = rng.uniform(0.3, 0.7) + rng.uniform(-0.08, 0.08, size=3)
    fg = np.asarray(PALETTE[color]) + rng.uniform(-0.08, 0.08, size=3)
    texture = rng.normal(0.0, 0.03, size=(n, n, 1))

    ss = _SUPERSAMPLE
    coords = (np.arange(n * ss) + 0.5) / ss
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    mask = _SHAPE_MASKS[shape](xs - cx, ys - cy, radius).astype(np.float64)
    cover = spec.contrast * mask.reshape(n, ss, n, ss).mean(axis=(1, 3))[..., None]

    img = (1.0 - cover) * (background + texture) + cover * (fg + texture)
    img = np.clip(img, 0.0, 1.0)
    return np.rint(img * 255.0) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", compress_level=6)


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def iter_layout(spec: DatasetSpec, split: str):
    """Yield (id, class_id, index, template_id) in canonical manifest order."""
    for class_id in range(spec.num_classes):
        for index in range(spec.samples_per_class[split]):
            template_id = index % len(spec.caption_templates)
            yield f"{split}-{class_id:03d}-{index:04d}", class_id, index, template_id


def generate_dataset(spec: DatasetSpec, split: str, out_dir: str | Path,
                     workers: int = 1) -> DatasetManifest:
    spec.validate()
    if split not in SPLITS:
        raise ValueError(f"split: must be one of {SPLITS}, got {split!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layout = list(iter_layout(spec, split))

    def _one(item):
        sid, class_id, index, template_id = item
        path = out_dir / f"{sid}.png"
        try:
            write_png(path, render_sample(spec, split, class_id, index))
        except OSError as e:
            raise OSError(f"failed writing {path}: {e}") from e
        return ManifestEntry(id=sid, file=path.name, caption=caption_for(class_id, template_id, spec),
                             class_id=class_id, template_id=template_id)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(_one, layout))
    else:
        entries = [_one(item) for item in layout]
    manifest = DatasetManifest(spec=spec, split=split, entries=entries, root=out_dir)
    manifest.write(out_dir)
    log.info("wrote %d %s samples to %s", len(entries), split, out_dir)
    return manifest


def load_dataset(manifest_path: str | Path) -> list[CaptionedSample]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = DatasetManifest.read(manifest_path)
    samples = []
    for e in manifest.entries:
        path = manifest.root / e.file
        if not path.exists():
            raise FileNotFoundError(f"entry {e.id}: missing image {path}")
        samples.append(CaptionedSample(id=e.id, image=read_png(path), caption=e.caption,
                                       class_id=e.class_id, template_id=e.template_id))
    return samples


def build_in_memory(spec: DatasetSpec, split: str) -> list[CaptionedSample]:
    """Same samples as generate_dataset + load_dataset, without touching disk."""
    spec.validate()
    return [CaptionedSample(id=sid, image=render_sample(spec, split, c, i).astype(np.float32),
                            caption=caption_for(c, t, spec), class_id=c, template_id=t)
            for sid, c, i, t in iter_layout(spec, split)]
