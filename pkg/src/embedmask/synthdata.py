"""Procedural scenes of flat-colored shapes plus question/answer templates.

Scenes stand in for annotated natural images. Every object is rasterized by an
exact point-in-shape test at pixel centers, so ground-truth masks are exact.
The template inventory below is a small hand-written stand-in; it is not a
reproduction of any published template list.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datamodel import SEG_TOKEN, BinaryMask, DatasetError, DatasetSplit, Image, Sample

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 70, 230),
    "yellow": (240, 220, 30),
}
SIZES = {"small": 7, "large": 12}
BACKGROUND = (115, 115, 115)

DEFAULT_IMAGE_SIZE = (64, 64)
DEFAULT_PATCH = 8
PLACEMENT_TRIES = 500
OBJECT_GAP = 2.0


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    center: tuple
    scale: float = 1.0  # radii are defined for 64x64 images

    @property
    def radius(self):
        return SIZES[self.size] * self.scale

    @property
    def circumradius(self):
        r = self.radius
        return r * math.sqrt(2.0) if self.shape == "square" else float(r)

    @property
    def attributes(self):
        facts = {f"shape:{self.shape}", f"color:{self.color}", f"size:{self.size}"}
        if self.shape == "circle":
            facts.add("can roll")
        if self.shape == "square":
            facts.add("stackable")
        if self.shape == "triangle":
            facts.add("pointed")
        facts.update(name for name, color in _COLOR_FACTS.items() if color == self.color)
        return frozenset(facts)

    def contains(self, x, y):
        """Point-in-shape test; works on scalars or broadcast arrays."""
        cx, cy = self.center
        r = self.radius
        dx = x - cx
        dy = y - cy
        if self.shape == "circle":
            return dx * dx + dy * dy <= r * r
        if self.shape == "square":
            return (np.abs(dx) <= r) & (np.abs(dy) <= r)
        # upward triangle inscribed in the circle of radius r
        top = (cx, cy - r)
        left = (cx - r * math.sqrt(3) / 2, cy + r / 2)
        right = (cx + r * math.sqrt(3) / 2, cy + r / 2)
        return _inside_triangle(x, y, top, left, right)

    def mask(self, height, width):
        ys, xs = np.mgrid[0:height, 0:width]
        return np.asarray(self.contains(xs + 0.5, ys + 0.5), dtype=bool)

    def fits(self, height, width):
        cx, cy = self.center
        m = self.circumradius + self.scale
        return m <= cx <= width - m and m <= cy <= height - m


def _inside_triangle(x, y, a, b, c):
    def side(p, q):
        return (x - q[0]) * (p[1] - q[1]) - (p[0] - q[0]) * (y - q[1])

    d1, d2, d3 = side(a, b), side(b, c), side(c, a)
    has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return np.logical_not(has_neg & has_pos)


_COLOR_FACTS = {
    "grass color": "green",
    "sky color": "blue",
    "banana color": "yellow",
    "tomato color": "red",
}


class Scene(NamedTuple):
    image: Image
    objects: list
    seed: int = 0

    @property
    def height(self):
        return self.image.height

    @property
    def width(self):
        return self.image.width

    def object_mask(self, index):
        return self.objects[index].mask(self.height, self.width)

    def union_mask(self, indices):
        out = np.zeros((self.height, self.width), dtype=bool)
        for i in indices:
            out |= self.object_mask(i)
        return BinaryMask(out.astype(np.uint8))

    def areas(self):
        return [int(self.object_mask(i).sum()) for i in range(len(self.objects))]


def render(objects, height, width):
    canvas = np.empty((height, width, 3), dtype=np.float64)
    canvas[:] = np.array(BACKGROUND, dtype=np.float64) / 255.0
    for obj in objects:
        canvas[obj.mask(height, width)] = np.array(COLORS[obj.color], dtype=np.float64) / 255.0
    return canvas


def generate_scene(rng_seed, n_objects, image_size=DEFAULT_IMAGE_SIZE, patch_size=DEFAULT_PATCH,
                   max_tries=PLACEMENT_TRIES):
    """Render ``n_objects`` random, pairwise disjoint shapes.

    Deterministic in ``rng_seed``. Raises ``RuntimeError`` naming the seed when
    the objects cannot be placed within ``max_tries`` attempts.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    height, width = image_size
    rng = np.random.default_rng(rng_seed)
    objects = []
    tries = 0
    while len(objects) < n_objects:
        if tries >= max_tries:
            raise RuntimeError(
                f"could not place {n_objects} objects in {height}x{width} (seed={rng_seed})"
            )
        tries += 1
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        size = list(SIZES)[rng.integers(len(SIZES))]
        center = (float(rng.integers(0, width)) + 0.5, float(rng.integers(0, height)) + 0.5)
        cand = SceneObject(shape, color, size, center, min(height, width) / DEFAULT_IMAGE_SIZE[0])
        if not cand.fits(height, width):
            continue
        if any(_too_close(cand, o) for o in objects):
            continue
        objects.append(cand)
    image = Image(render(objects, height, width), patch_size=patch_size)
    return Scene(image, objects, rng_seed)


def _too_close(a, b):
    dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    return dist < a.circumradius + b.circumradius + OBJECT_GAP * a.scale


# --------------------------------------------------------------------------
# query predicates


@dataclass(frozen=True)
class Predicate:
    """Selects scene objects by explicit attributes or by an ontology fact."""

    shape: str | None = None
    color: str | None = None
    size: str | None = None
    fact: str | None = None

    def select(self, scene):
        objs = scene.objects
        idx = [
            i
            for i, o in enumerate(objs)
            if (self.shape is None or o.shape == self.shape)
            and (self.color is None or o.color == self.color)
            and (self.size is None or o.size == self.size)
        ]
        if self.fact is None:
            return idx
        return _FACT_SELECTORS[self.fact](scene, idx)


def _by_attribute(attr):
    def sel(scene, idx):
        return [i for i in idx if attr in scene.objects[i].attributes]

    return sel


def _unique_extreme(key, largest):
    def sel(scene, idx):
        if not idx:
            return []
        vals = key(scene)
        best = max(vals[i] for i in idx) if largest else min(vals[i] for i in idx)
        hits = [i for i in idx if vals[i] == best]
        # ties make a superlative ambiguous
        return hits if len(hits) == 1 else []

    return sel


def _center_x(scene):
    return [o.center[0] for o in scene.objects]


_FACT_SELECTORS = {
    "can roll": _by_attribute("can roll"),
    "stackable": _by_attribute("stackable"),
    "pointed": _by_attribute("pointed"),
    **{name: _by_attribute(name) for name in _COLOR_FACTS},
    "largest": _unique_extreme(lambda s: s.areas(), True),
    "smallest": _unique_extreme(lambda s: s.areas(), False),
    "leftmost": _unique_extreme(_center_x, False),
    "rightmost": _unique_extreme(_center_x, True),
}

# fact -> (short phrase, long sentences)
REASONING_FACTS = {
    "can roll": (
        "the object that can roll",
        [
            "If I pushed each object gently on a slope, which one would keep moving on its own? Please segment it.",
            "Which thing here could roll away like a ball? Please segment it.",
        ],
    ),
    "stackable": (
        "the object that is easiest to stack",
        [
            "Which object has flat sides so that another one could rest on top of it? Please segment it.",
            "If you wanted to build a tower, which thing here would you pile up? Please segment it.",
        ],
    ),
    "pointed": (
        "the object with a sharp point on top",
        [
            "Which object looks like the roof of a house? Please segment it.",
            "Something here has three corners and a tip. Please segment it.",
        ],
    ),
    "grass color": (
        "the object with the same color as grass",
        [
            "Something in this picture has the color of a fresh lawn in summer. Please segment it.",
            "Which thing shares its color with the leaves of a tree? Please segment it.",
        ],
    ),
    "sky color": (
        "the object with the color of a clear sky",
        [
            "Which thing shares its color with the sky on a sunny day? Please segment it.",
            "Something here has the color of the deep sea. Please segment it.",
        ],
    ),
    "banana color": (
        "the object with the color of a ripe banana",
        [
            "Which thing has the color of a ripe lemon? Please segment it.",
            "Something in this picture has the color of the sun in a drawing. Please segment it.",
        ],
    ),
    "tomato color": (
        "the object with the color of a ripe tomato",
        [
            "Which thing has the color of a fire truck? Please segment it.",
            "Something here has the color of a ripe strawberry. Please segment it.",
        ],
    ),
    "largest": (
        "the object that takes up the most space",
        [
            "If you had to paint each object, which one would need the most paint? Please segment it.",
            "Which thing here covers the biggest area? Please segment it.",
        ],
    ),
    "smallest": (
        "the object that takes up the least space",
        [
            "If you had to paint each object, which one would need the least paint? Please segment it.",
            "Which thing here covers the tiniest area? Please segment it.",
        ],
    ),
    "leftmost": (
        "the object closest to the left edge",
        [
            "Imagine walking into the picture from the left side. Which object would you reach first? Please segment it.",
            "Which thing is furthest to the left? Please segment it.",
        ],
    ),
    "rightmost": (
        "the object closest to the right edge",
        [
            "Imagine walking into the picture from the right side. Which object would you reach first? Please segment it.",
            "Which thing is furthest to the right? Please segment it.",
        ],
    ),
}


@dataclass(frozen=True)
class QuerySpec:
    kind: str  # explicit | attribute_reasoning | knowledge_reasoning
    phrasing: str  # short_phrase | long_sentence
    target_predicate: Predicate
    variant: int = 0

    def select(self, scene):
        return self.target_predicate.select(scene)


_ATTRIBUTE_FACTS = {"largest", "smallest", "leftmost", "rightmost"}


def reasoning_query(fact, phrasing="short_phrase", variant=0):
    kind = "attribute_reasoning" if fact in _ATTRIBUTE_FACTS else "knowledge_reasoning"
    return QuerySpec(kind, phrasing, Predicate(fact=fact), variant)


def describe(pred):
    """Render an explicit predicate as a noun phrase, e.g. ``the large red circle``."""
    words = [w for w in (pred.size, pred.color) if w]
    words.append(pred.shape or "object")
    return "the " + " ".join(words)


def parse_description(text):
    """Inverse of :func:`describe` over the closed attribute lexicon."""
    words = text.lower().replace(".", " ").split()
    found = {}
    for w in words:
        if w in SIZES:
            found["size"] = w
        elif w in COLORS:
            found["color"] = w
        elif w in SHAPES:
            found["shape"] = w
    return Predicate(**found)


# --------------------------------------------------------------------------
# templates: (instruction with {x}, answer with {segs})

SEMANTIC_TEMPLATES = [
    ("Can you segment the {x} in this image?", "It is {segs}."),
    ("Please segment the {x} in this image.", "Sure, {segs}."),
    ("What is the {x} in this image? Please respond with a segmentation mask.", "It is {segs}."),
    ("Where is the {x} in this picture? Please output a segmentation mask.", "{segs}."),
]
REFERRING_TEMPLATES = [
    ("Can you segment {x} in this image?", "Sure, it is {segs}."),
    ("Please segment {x} in this picture.", "Sure, it is {segs}."),
    ("Could you show me where {x} is in this image?", "Sure, it is {segs}."),
]
SHORT_REASONING_TEMPLATE = "Can you segment {x} in this image?"
REASONING_ANSWER = "Sure, it is {segs}."


def _seg_list(k):
    if k == 1:
        return SEG_TOKEN
    return ", ".join([SEG_TOKEN] * (k - 1)) + " and " + SEG_TOKEN


def class_phrase(class_name):
    return class_name if class_name in SHAPES else f"{class_name} object"


def _class_predicate(class_name):
    if class_name in SHAPES:
        return Predicate(shape=class_name)
    if class_name in COLORS:
        return Predicate(color=class_name)
    raise ValueError(f"unknown class {class_name!r}")


def _with_image(text):
    return f"<IMAGE> {text}"


def make_semantic_sample(scene, class_name, template_id=0, sample_id="sem"):
    """Category query over one or more class names; one mask per class (union of members)."""
    names = [class_name] if isinstance(class_name, str) else list(class_name)
    masks = []
    for name in names:
        try:
            pred = _class_predicate(name)
        except ValueError as exc:
            raise DatasetError(str(exc), sample_id) from exc
        idx = pred.select(scene)
        if not idx:
            raise DatasetError(f"class {name!r} absent from scene", sample_id)
        masks.append(scene.union_mask(idx))
    q, a = SEMANTIC_TEMPLATES[template_id % len(SEMANTIC_TEMPLATES)]
    phrases = [class_phrase(n) for n in names]
    joined = phrases[0] if len(phrases) == 1 else ", the ".join(phrases[:-1]) + " and the " + phrases[-1]
    return Sample(
        id=sample_id,
        image=scene.image,
        instruction=_with_image(q.format(x=joined)),
        answer_text=a.format(segs=_seg_list(len(masks))),
        target_masks=tuple(masks),
        kind="semantic",
    )


def unique_descriptions(scene, index):
    """All explicit predicates (attribute subsets) that single out object ``index``."""
    obj = scene.objects[index]
    out = []
    for keep in itertools.product((False, True), repeat=3):
        if not any(keep):
            continue
        pred = Predicate(
            size=obj.size if keep[0] else None,
            color=obj.color if keep[1] else None,
            shape=obj.shape if keep[2] else None,
        )
        if pred.select(scene) == [index]:
            out.append(pred)
    return out


def make_referring_sample(scene, description, template_id=0, sample_id="ref"):
    pred = description.target_predicate if isinstance(description, QuerySpec) else description
    idx = pred.select(scene)
    if len(idx) != 1:
        raise DatasetError(
            f"referring description {describe(pred)!r} matches {len(idx)} objects", sample_id
        )
    q, a = REFERRING_TEMPLATES[template_id % len(REFERRING_TEMPLATES)]
    return Sample(
        id=sample_id,
        image=scene.image,
        instruction=_with_image(q.format(x=describe(pred))),
        answer_text=a.format(segs=SEG_TOKEN),
        target_masks=(scene.union_mask(idx),),
        kind="referring",
        phrasing="short_phrase",
    )


def make_reasoning_sample(scene, query, sample_id="rea"):
    idx = query.select(scene)
    if not idx:
        raise DatasetError(f"reasoning query {query.target_predicate.fact!r} selects no object", sample_id)
    short, longs = REASONING_FACTS[query.target_predicate.fact]
    if query.phrasing == "short_phrase":
        text = SHORT_REASONING_TEMPLATE.format(x=short)
    else:
        text = longs[query.variant % len(longs)]
    return Sample(
        id=sample_id,
        image=scene.image,
        instruction=_with_image(text),
        answer_text=REASONING_ANSWER.format(segs=SEG_TOKEN),
        target_masks=(scene.union_mask(idx),),
        kind="reasoning",
        phrasing=query.phrasing,
    )


NUMBER_WORDS = ("0", "1", "2", "3", "4", "5")


def vqa_questions(scene):
    """All (question, answer) pairs answerable from the scene."""
    objs = scene.objects
    qa = [("How many objects are there in this image?", str(len(objs)))]
    for shape in SHAPES:
        hits = [o for o in objs if o.shape == shape]
        if len(hits) == 1:
            qa.append((f"What color is the {shape}?", hits[0].color))
    for color in COLORS:
        hits = [o for o in objs if o.color == color]
        if len(hits) == 1:
            qa.append((f"What shape is the {color} object?", hits[0].shape))
        qa.append((f"How many {color} objects are there?", str(len(hits))))
    return qa


def make_vqa_sample(scene, question_id=0, sample_id="vqa"):
    q, a = vqa_questions(scene)[question_id % len(vqa_questions(scene))]
    return Sample(
        id=sample_id,
        image=scene.image,
        instruction=_with_image(q),
        answer_text=a,
        target_masks=(),
        kind="vqa",
    )


# --------------------------------------------------------------------------
# corpus

_KIND_STREAM = {"semantic": 1, "referring": 2, "vqa": 3, "reasoning": 4, "reasoning_ft": 5}
_ID_PREFIX = {"semantic": "sem", "referring": "ref", "vqa": "vqa", "reasoning": "rea", "reasoning_ft": "rft"}


@dataclass
class CorpusConfig:
    sizes: dict = field(default_factory=lambda: {"semantic": 100, "referring": 100, "vqa": 50, "reasoning": 40})
    split_fractions: tuple = (0.8, 0.1, 0.1)
    reasoning_in_train: bool = False
    n_objects: tuple = (2, 3)
    image_size: tuple = DEFAULT_IMAGE_SIZE
    patch_size: int = DEFAULT_PATCH
    max_categories: int = 3


def _scene_seed(seed, stream, index):
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


def make_sample(kind, seed, index, cfg):
    """Generate sample ``index`` of stream ``kind``; retries new scenes until the query is valid."""
    stream = _KIND_STREAM[kind]
    sid = f"{_ID_PREFIX[kind]}-{seed}-{index:05d}"
    for attempt in range(100):
        sseed = _scene_seed(seed, stream, index * 1000 + attempt)
        rng = np.random.default_rng(sseed)
        n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
        scene = generate_scene(sseed, n, cfg.image_size, cfg.patch_size)
        try:
            return _sample_for(kind, scene, rng, sid, cfg)
        except DatasetError:
            continue
    raise RuntimeError(f"could not build a valid {kind} sample for seed={seed} index={index}")


def _sample_for(kind, scene, rng, sid, cfg):
    if kind == "semantic":
        present = sorted({o.shape for o in scene.objects} | {o.color for o in scene.objects})
        k_max = min(cfg.max_categories, len(present))
        k = 1 + int(rng.choice(3, p=(0.6, 0.3, 0.1)))
        k = min(k, k_max)
        names = [present[i] for i in rng.permutation(len(present))[:k]]
        return make_semantic_sample(scene, names, int(rng.integers(len(SEMANTIC_TEMPLATES))), sid)
    if kind == "referring":
        order = rng.permutation(len(scene.objects))
        for i in order:
            # single-attribute phrases would collide with category queries
            preds = [p for p in unique_descriptions(scene, int(i)) if _n_attrs(p) >= 2]
            if preds:
                pred = preds[int(rng.integers(len(preds)))]
                return make_referring_sample(scene, pred, int(rng.integers(len(REFERRING_TEMPLATES))), sid)
        raise DatasetError("no uniquely describable object", sid)
    if kind == "vqa":
        return make_vqa_sample(scene, int(rng.integers(len(vqa_questions(scene)))), sid)
    facts = list(REASONING_FACTS)
    fact = facts[int(rng.integers(len(facts)))]
    phrasing = "short_phrase" if rng.random() < 0.5 else "long_sentence"
    query = reasoning_query(fact, phrasing, int(rng.integers(2)))
    return make_reasoning_sample(scene, query, sid)


def _n_attrs(pred):
    return sum(v is not None for v in (pred.shape, pred.color, pred.size))


def _partition(n, fractions):
    counts = [int(math.floor(n * f)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


def build_corpus(seed, cfg=None):
    """Build (train, val, test) splits.

    Each sample owns a freshly generated scene, so splits never share scenes.
    With ``reasoning_in_train=False`` all reasoning samples go to val/test,
    giving the zero-shot protocol.
    """
    cfg = cfg or CorpusConfig()
    fr = tuple(float(f) for f in cfg.split_fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fr}")
    buckets = {"train": [], "val": [], "test": []}
    for kind in ("semantic", "referring", "vqa", "reasoning"):
        n = int(cfg.sizes.get(kind, 0))
        if n <= 0:
            continue
        if kind == "reasoning" and not cfg.reasoning_in_train:
            rest = fr[1] + fr[2]
            vf = fr[1] / rest if rest > 0 else 0.5
            n_val = int(round(n * vf))
            counts = [0, n_val, n - n_val]
        else:
            counts = _partition(n, fr)
        samples = [make_sample(kind, seed, i, cfg) for i in range(n)]
        start = 0
        for name, c in zip(("train", "val", "test"), counts):
            buckets[name].extend(samples[start:start + c])
            start += c
    return tuple(DatasetSplit(name, buckets[name]) for name in ("train", "val", "test"))


def build_reasoning_finetune(seed, n, cfg=None):
    """Extra reasoning samples for fine-tuning, drawn from a scene stream disjoint from build_corpus."""
    cfg = cfg or CorpusConfig()
    return DatasetSplit("train", [make_sample("reasoning_ft", seed, i, cfg) for i in range(n)])


def lexicon_texts():
    """Every string the generators can emit, used to build the closed vocabulary."""
    texts = []
    for q, a in SEMANTIC_TEMPLATES + REFERRING_TEMPLATES:
        texts += [q.format(x=""), a.format(segs="")]
    texts.append(SHORT_REASONING_TEMPLATE.format(x=""))
    texts.append(REASONING_ANSWER.format(segs=""))
    for short, longs in REASONING_FACTS.values():
        texts.append(short)
        texts.extend(longs)
    texts += list(SHAPES) + list(COLORS) + list(SIZES) + list(NUMBER_WORDS)
    texts += ["object", "objects", "the", "and", ","]
    texts += [
        "How many objects are there in this image?",
        "What color is the circle?",
        "What shape is the red object?",
        "How many red objects are there?",
    ]
    return texts
