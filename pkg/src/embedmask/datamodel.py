"""Core domain types and the on-disk dataset layout.

A dataset split lives in a directory::

    manifest.jsonl        one JSON record per sample
    images/<id>.png       RGB, 8 bit
    masks/<id>_<k>.png    single channel, values {0, 255}, k = 0-based mask index
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

SEG_TOKEN = "<SEG>"
IMAGE_TOKEN = "<IMAGE>"

KINDS = ("semantic", "referring", "reasoning", "vqa")
SPLIT_NAMES = ("train", "val", "test")
PHRASINGS = ("short_phrase", "long_sentence")

MIN_SIDE = 8
DEFAULT_PATCH = 8


class DatasetError(ValueError):
    """Raised for malformed samples or dataset directories."""

    def __init__(self, message, sample_id=None):
        self.sample_id = sample_id
        if sample_id is not None:
            message = f"sample {sample_id!r}: {message}"
        super().__init__(message)


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    patch_size: int = DEFAULT_PATCH

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {px.shape}")
        h, w, _ = px.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch size {self.patch_size}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {b.shape}")
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("non-binary mask values")
        object.__setattr__(self, "bits", _frozen(b.astype(np.uint8)))

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def area(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class Sample:
    id: str
    image: Image
    instruction: str
    answer_text: str
    target_masks: tuple = ()
    kind: str = "semantic"
    # query form tag used by evaluation reports; None for non-query kinds
    phrasing: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "target_masks", tuple(self.target_masks))
        validate_sample(self)

    @property
    def n_masks(self):
        return len(self.target_masks)


def validate_sample(sample):
    """Check the cross-field invariants of a sample, raising DatasetError."""
    sid = sample.id
    if sample.kind not in KINDS:
        raise DatasetError(f"unknown kind {sample.kind!r}", sid)
    if sample.phrasing is not None and sample.phrasing not in PHRASINGS:
        raise DatasetError(f"unknown phrasing {sample.phrasing!r}", sid)
    if sample.kind == "vqa" and sample.target_masks:
        raise DatasetError("vqa sample must have no masks", sid)
    if sample.kind != "vqa" and not sample.target_masks:
        raise DatasetError(f"{sample.kind} sample needs at least one mask", sid)
    n_seg = sample.answer_text.count(SEG_TOKEN)
    if n_seg != len(sample.target_masks):
        raise DatasetError(
            f"answer has {n_seg} {SEG_TOKEN} tokens but {len(sample.target_masks)} masks", sid
        )
    hw = (sample.image.height, sample.image.width)
    for k, m in enumerate(sample.target_masks):
        if not isinstance(m, BinaryMask):
            raise DatasetError(f"mask {k} is not a BinaryMask", sid)
        if (m.height, m.width) != hw:
            raise DatasetError(f"mask {k} shape {(m.height, m.width)} != image shape {hw}", sid)


@dataclass
class DatasetSplit:
    name: str
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split name {self.name!r}")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DatasetError("duplicate id", s.id)
            seen.add(s.id)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def by_kind(self, kind):
        return [s for s in self.samples if s.kind == kind]


def check_disjoint(*splits):
    """Raise if any sample id appears in more than one split."""
    owner = {}
    for split in splits:
        for sid in split.ids:
            if sid in owner:
                raise DatasetError(f"appears in splits {owner[sid]!r} and {split.name!r}", sid)
            owner[sid] = split.name


MANIFEST = "manifest.jsonl"


def _image_to_uint8(image, sid):
    scaled = image.pixels * 255.0
    q = np.rint(scaled)
    if np.max(np.abs(q / 255.0 - image.pixels)) > 1e-6:
        raise DatasetError("pixels are not 8-bit representable; PNG storage would be lossy", sid)
    return q.astype(np.uint8)


def save_dataset(split, path):
    """Write ``split`` under directory ``path`` (created if needed)."""
    root = Path(path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset at {root}: {exc}") from exc
    lines = []
    for s in split.samples:
        img_rel = f"images/{s.id}.png"
        PILImage.fromarray(_image_to_uint8(s.image, s.id), mode="RGB").save(root / img_rel)
        mask_rels = []
        for k, m in enumerate(s.target_masks):
            rel = f"masks/{s.id}_{k}.png"
            PILImage.fromarray((m.bits * 255).astype(np.uint8), mode="L").save(root / rel)
            mask_rels.append(rel)
        rec = {
            "id": s.id,
            "split": split.name,
            "kind": s.kind,
            "phrasing": s.phrasing,
            "instruction": s.instruction,
            "answer_text": s.answer_text,
            "image": img_rel,
            "masks": mask_rels,
            "patch_size": s.image.patch_size,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    with open(root / MANIFEST, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def _read_png(path, sid):
    if not os.path.exists(path):
        raise DatasetError(f"missing file {path}", sid)
    with PILImage.open(path) as im:
        return np.array(im)


def load_dataset(path, name=None):
    """Load a split written by :func:`save_dataset`, validating every invariant."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DatasetError(f"missing manifest {manifest}")
    samples = []
    split_name = name
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"manifest line {lineno}: {exc}") from exc
            sid = rec.get("id")
            if split_name is None:
                split_name = rec.get("split", "train")
            rgb = _read_png(root / rec["image"], sid)
            if rgb.ndim != 3 or rgb.shape[2] != 3:
                raise DatasetError(f"image must be RGB, got shape {rgb.shape}", sid)
            try:
                image = Image(rgb.astype(np.float64) / 255.0, patch_size=rec.get("patch_size", DEFAULT_PATCH))
            except ValueError as exc:
                raise DatasetError(str(exc), sid) from exc
            masks = []
            for rel in rec.get("masks", []):
                raw = _read_png(root / rel, sid)
                if raw.ndim != 2:
                    raise DatasetError(f"mask {rel} must be single channel", sid)
                if not np.all((raw == 0) | (raw == 255)):
                    raise DatasetError(f"non-binary mask values in {rel}", sid)
                if raw.shape != (image.height, image.width):
                    raise DatasetError(
                        f"mask {rel} shape {raw.shape} != image shape {(image.height, image.width)}", sid
                    )
                masks.append(BinaryMask(raw // 255))
            samples.append(
                Sample(
                    id=sid,
                    image=image,
                    instruction=rec["instruction"],
                    answer_text=rec["answer_text"],
                    target_masks=tuple(masks),
                    kind=rec["kind"],
                    phrasing=rec.get("phrasing"),
                )
            )
    return DatasetSplit(split_name or "train", samples)
