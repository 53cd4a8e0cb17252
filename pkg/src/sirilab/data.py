"""Synthetic referring-expression benchmark: scenes, templated expressions, an
exact referent resolver, rasterization and an on-disk container.

Scenes hold 3-6 flat shapes on a gray canvas. Coordinates are normalized with
the origin at the top-left, so "above" means a smaller ``y``. Every generator
is a pure function of its integer seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
BINARY_RELATIONS = ("left-of", "right-of", "above", "below")
SUPERLATIVES = ("leftmost", "rightmost", "topmost", "bottommost")
FUNCTION_WORDS = ("the",)

COLOR_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
RADIUS_RANGE = {"small": (0.07, 0.095), "large": (0.12, 0.155)}
BACKGROUND = 0.5
MAX_EXPR_LEN = 16
SEPARATION = 1.5

VOCAB_VERSION = "sirilab-vocab-1"
DATASET_VERSION = 1
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


class GenerationError(RuntimeError):
    def __init__(self, seed: int, reason: str):
        super().__init__(f"generation failed for seed {seed}: {reason}")
        self.seed = seed


class ResolveError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class Vocabulary:
    """Closed token inventory; id 0 is padding, id 1 unknown."""

    PAD, UNK = "<pad>", "<unk>"

    def __init__(self):
        self.version = VOCAB_VERSION
        self.tokens = (self.PAD, self.UNK, *FUNCTION_WORDS, *KINDS, *COLORS, *SIZES,
                       *BINARY_RELATIONS, *SUPERLATIVES)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    pad_id = 0
    unk_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index.get(w, self.unk_id) for w in words)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i != self.pad_id]

    def to_json(self) -> dict:
        return {"version": self.version, "tokens": list(self.tokens)}


VOCAB = Vocabulary()


@dataclass(frozen=True)
class ShapeInstance:
    kind: str
    color: str
    size: str
    center: tuple[float, float]
    radius: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        r = self.radius
        return (cx - r, cy - r, cx + r, cy + r)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ShapeInstance, ...]
    target_index: int
    rng_seed: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        objs = tuple(ShapeInstance(o["kind"], o["color"], o["size"], tuple(o["center"]), o["radius"])
                     for o in d["objects"])
        return cls(objs, int(d["target_index"]), int(d["rng_seed"]))


def check_scene(scene: SceneSpec) -> None:
    """Raise ``ValueError`` if any scene invariant is violated."""
    objs = scene.objects
    if not 3 <= len(objs) <= 6:
        raise ValueError(f"scene has {len(objs)} objects")
    if not 0 <= scene.target_index < len(objs):
        raise ValueError("target index out of range")
    for o in objs:
        x1, y1, x2, y2 = o.box
        if o.radius <= 0 or x1 < 0 or y1 < 0 or x2 > 1 or y2 > 1:
            raise ValueError(f"object {o} not inside the unit image")
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if math.dist(a.center, b.center) < SEPARATION * max(a.radius, b.radius):
                raise ValueError(f"objects {i} and {j} too close")
    kinds = [o.kind for o in objs]
    if len(set(kinds)) == len(kinds):
        raise ValueError("no two objects share a kind")


def generate_scene(seed: int, max_tries: int = 200, confusable_target_p: float = 0.8) -> SceneSpec:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    kinds = [str(k) for k in rng.choice(KINDS, size=n)]
    if len(set(kinds)) == n:
        kinds[int(rng.integers(1, n))] = kinds[0]
    placed: list[ShapeInstance] = []
    for kind in kinds:
        size = str(rng.choice(SIZES))
        lo, hi = RADIUS_RANGE[size]
        r = float(rng.uniform(lo, hi))
        for _ in range(max_tries):
            c = (float(rng.uniform(r, 1 - r)), float(rng.uniform(r, 1 - r)))
            if all(math.dist(c, o.center) >= SEPARATION * max(r, o.radius) for o in placed):
                break
        else:
            raise GenerationError(seed, "retry budget exhausted placing shapes")
        placed.append(ShapeInstance(kind, str(rng.choice(COLORS)), size, c, r))
    counts = {k: kinds.count(k) for k in kinds}
    shared = [i for i, k in enumerate(kinds) if counts[k] > 1]
    if rng.random() < confusable_target_p:
        target = int(rng.choice(shared))
    else:
        target = int(rng.integers(n))
    return SceneSpec(tuple(placed), target, seed)


# --- expressions ------------------------------------------------------------

_AXIS = {"leftmost": (0, min), "rightmost": (0, max), "topmost": (1, min), "bottommost": (1, max)}


def _binary(rel: str, o: ShapeInstance, lm: ShapeInstance) -> bool:
    if rel == "left-of":
        return o.center[0] < lm.center[0]
    if rel == "right-of":
        return o.center[0] > lm.center[0]
    if rel == "above":
        return o.center[1] < lm.center[1]
    return o.center[1] > lm.center[1]


def _parse_np(words: Sequence[str]) -> dict:
    slots: dict[str, str] = {}
    for w in words:
        if w == "the" and not slots:
            continue
        for slot, vocab in (("superlative", SUPERLATIVES), ("size", SIZES), ("color", COLORS), ("kind", KINDS)):
            if w in vocab:
                if slot in slots:
                    raise ResolveError(f"repeated {slot} in clause {' '.join(words)!r}")
                slots[slot] = w
                break
        else:
            raise ResolveError(f"unexpected token {w!r} in clause {' '.join(words)!r}")
    return slots


def _filter(scene: SceneSpec, slots: dict, candidates: Iterable[int]) -> set[int]:
    objs = scene.objects
    keep = [i for i in candidates
            if all(getattr(objs[i], a) == slots[a] for a in ("kind", "color", "size") if a in slots)]
    if "superlative" in slots and keep:
        axis, pick = _AXIS[slots["superlative"]]
        best = pick(objs[i].center[axis] for i in keep)
        keep = [i for i in keep if objs[i].center[axis] == best]
    return set(keep)


def resolve_expression(scene: SceneSpec, expression: Sequence[int] | Sequence[str]) -> set[int]:
    """All object indices consistent with every clause of ``expression``.

    Grammar: ``[the] [superlative] [size] [color] [kind] [relation NP]``. A
    relation clause holds when some other object matched by the landmark NP
    satisfies the center-based strict inequality. Superlatives pick the
    extreme center among objects passing the attribute and relation filters.
    """
    words = [w for w in (VOCAB.decode(expression) if _is_ids(expression) else expression) if w != Vocabulary.PAD]
    if Vocabulary.UNK in words:
        raise ResolveError("unknown token in expression")
    rel_pos = [k for k, w in enumerate(words) if w in BINARY_RELATIONS]
    if len(rel_pos) > 1:
        raise ResolveError("at most one relation clause is supported")
    everyone = range(len(scene.objects))
    if not rel_pos:
        return _filter(scene, _parse_np(words), everyone)
    k = rel_pos[0]
    head, rel, tail = _parse_np(words[:k]), words[k], words[k + 1:]
    if not tail:
        raise ResolveError(f"relation {rel!r} lacks a landmark")
    landmarks = _filter(scene, _parse_np(tail), everyone)
    base = {i for i in everyone
            if any(j != i and _binary(rel, scene.objects[i], scene.objects[j]) for j in landmarks)}
    sup = head.pop("superlative", None)
    matched = _filter(scene, head, sorted(base))
    if sup is not None:
        matched = _filter(scene, {"superlative": sup}, sorted(matched))
    return matched


def _is_ids(expr) -> bool:
    return len(expr) > 0 and not isinstance(expr[0], str)


def _attribute_phrases(o: ShapeInstance) -> list[list[str]]:
    return [[o.kind], [o.color, o.kind], [o.size, o.kind], [o.size, o.color, o.kind]]


def _candidates(scene: SceneSpec) -> tuple[list[list[str]], list[list[str]], list[list[str]]]:
    """Attribute-only, superlative and binary-relation descriptions of the target, shortest first."""
    t = scene.objects[scene.target_index]
    attr = [["the", *p] for p in _attribute_phrases(t)]
    superlative = [["the", s, *p] for p in _attribute_phrases(t)[:2] for s in SUPERLATIVES]
    binary: list[list[str]] = []
    for j, lm in enumerate(scene.objects):
        if j == scene.target_index:
            continue
        for rel in BINARY_RELATIONS:
            if not _binary(rel, t, lm):
                continue
            for lp in _attribute_phrases(lm)[:2]:
                binary.append(["the", t.kind, rel, "the", *lp])
    binary.sort(key=len)
    return attr, superlative, binary


def realize_expression(scene: SceneSpec, relation_ratio: float = 0.5) -> tuple[int, ...]:
    """Shortest templated description that resolves exactly to the target.

    A scene-seeded coin with bias ``relation_ratio`` decides whether a spatial
    description (superlative or binary relation, in random order) is
    preferred over an attribute-only one; the remaining families are fallbacks.
    """
    target = {scene.target_index}
    attr, superlative, binary = _candidates(scene)
    rng = np.random.default_rng([scene.rng_seed, 7])
    spatial = [superlative, binary] if rng.random() < 0.5 else [binary, superlative]
    families = [*spatial, attr] if rng.random() < relation_ratio else [attr, *spatial]
    for family in families:
        unique = [c for c in family if resolve_expression(scene, c) == target]
        if unique:
            shortest = [c for c in unique if len(c) == len(unique[0])]
            words = shortest[int(rng.integers(len(shortest)))]
            return VOCAB.encode(words)
    raise GenerationError(scene.rng_seed, "no unique description under the template grammar")


# --- rendering --------------------------------------------------------------

def render(scene: SceneSpec, height: int = 64, width: int = 64) -> np.ndarray:
    """Hard-edged rasterization sampled at pixel centers; later objects paint over earlier ones."""
    if height < 32 or width < 32:
        raise ValueError("image must be at least 32x32")
    img = np.full((height, width, 3), BACKGROUND, dtype=np.float32)
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    y, x = np.meshgrid(ys, xs, indexing="ij")
    for o in scene.objects:
        cx, cy = o.center
        r = o.radius
        if o.kind == "circle":
            mask = (x - cx) ** 2 + (y - cy) ** 2 <= r * r
        elif o.kind == "square":
            mask = (np.abs(x - cx) <= r) & (np.abs(y - cy) <= r)
        else:
            # apex at the top, base along the bottom edge of the bounding box
            depth = y - (cy - r)
            mask = (depth >= 0) & (depth <= 2 * r) & (np.abs(x - cx) <= depth / 2)
        img[mask] = COLOR_RGB[o.color]
    return img


# --- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class GroundingSample:
    image: np.ndarray = field(repr=False, compare=False)
    expression: tuple[int, ...]
    target_box: tuple[float, float, float, float]
    scene: SceneSpec
    seed: int

    def padded_expression(self, length: int = MAX_EXPR_LEN) -> np.ndarray:
        out = np.zeros(length, dtype=np.int64)
        out[: len(self.expression)] = self.expression
        return out


def _f32(v: Sequence[float]) -> tuple[float, ...]:
    return tuple(float(x) for x in np.asarray(v, dtype=np.float32))


def make_sample(seed: int, image_size: int = 64, relation_ratio: float = 0.5, max_resamples: int = 20) -> GroundingSample:
    """Sample for ``seed``, resampling the scene with derived sub-seeds on generation failure."""
    sub = seed
    for attempt in range(max_resamples + 1):
        try:
            scene = generate_scene(sub)
            expr = realize_expression(scene, relation_ratio)
            break
        except GenerationError:
            sub = int(np.random.SeedSequence([seed, attempt + 1]).generate_state(1, np.uint32)[0]) + 2**32
    else:
        raise GenerationError(seed, f"still failing after {max_resamples} resamples")
    if len(expr) > MAX_EXPR_LEN:
        raise GenerationError(seed, "expression too long")
    box = _f32(scene.objects[scene.target_index].box)
    return GroundingSample(render(scene, image_size, image_size), expr, box, scene, seed)


class GroundingDataset(Sequence[GroundingSample]):
    """Immutable list of samples with the seed range that produced them."""

    def __init__(self, samples: Sequence[GroundingSample], base_seed: int, image_size: int = 64,
                 relation_ratio: float = 0.5, name: str = "split"):
        self.samples = tuple(samples)
        self.base_seed = base_seed
        self.image_size = image_size
        self.relation_ratio = relation_ratio
        self.name = name
        self._tensors = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return GroundingDataset(self.samples[i], self.base_seed, self.image_size, self.relation_ratio, self.name)
        return self.samples[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, GroundingDataset) and self.samples == other.samples

    @property
    def seeds(self) -> list[int]:
        return [s.seed for s in self.samples]

    def subset(self, indices: Sequence[int]) -> "GroundingDataset":
        return GroundingDataset([self.samples[i] for i in indices], self.base_seed, self.image_size,
                                self.relation_ratio, self.name)

    def fraction(self, frac: float) -> "GroundingDataset":
        """Prefix of the seed order holding ``round(frac * len)`` samples."""
        if not 0 < frac <= 1:
            raise ValueError("fraction must be in (0, 1]")
        return self[: max(1, int(round(frac * len(self))))]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (images NCHW float32, padded token ids int64, boxes float32), cached."""
        if self._tensors is None:
            imgs = np.stack([s.image.transpose(2, 0, 1) for s in self.samples]).astype(np.float32)
            toks = np.stack([s.padded_expression() for s in self.samples])
            boxes = np.asarray([s.target_box for s in self.samples], dtype=np.float32)
            self._tensors = (imgs, toks, boxes)
        return self._tensors

    def confusable_fraction(self) -> float:
        """Share of samples whose target has a same-kind distractor."""
        hits = 0
        for s in self.samples:
            t = s.scene.objects[s.scene.target_index]
            hits += sum(o.kind == t.kind for o in s.scene.objects) > 1
        return hits / len(self)


def build_split(seed: int, n: int, image_size: int = 64, relation_ratio: float = 0.5,
                name: str = "split") -> GroundingDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = [make_sample(s, image_size, relation_ratio) for s in range(seed, seed + n)]
    return GroundingDataset(samples, seed, image_size, relation_ratio, name)


def build_corpus(seed: int = 0, n_train: int = 2000, n_val: int = 500, n_test: int = 500,
                 image_size: int = 64, relation_ratio: float = 0.5) -> dict[str, GroundingDataset]:
    """Train/val/test splits drawn from disjoint base-seed ranges."""
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    if max(sizes.values()) > SPLIT_OFFSETS["val"]:
        raise ValueError("split too large for the reserved seed ranges")
    return {name: build_split(seed + SPLIT_OFFSETS[name], n, image_size, relation_ratio, name)
            for name, n in sizes.items() if n > 0}


# --- container --------------------------------------------------------------

_RECORD = np.dtype([("tokens", "<u2", (MAX_EXPR_LEN,)), ("box", "<f4", (4,))])


def save_dataset(dataset: GroundingDataset, path: str | Path) -> Path:
    """Write ``manifest.json``, ``records.bin`` and ``scenes.jsonl`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rec = np.zeros(len(dataset), dtype=_RECORD)
    for i, s in enumerate(dataset.samples):
        rec[i]["tokens"] = s.padded_expression()
        rec[i]["box"] = s.target_box
    (path / "records.bin").write_bytes(rec.tobytes())
    with open(path / "scenes.jsonl", "w") as f:
        for s in dataset.samples:
            f.write(json.dumps({"seed": s.seed, "scene": s.scene.to_json()}) + "\n")
    manifest = {
        "version": DATASET_VERSION,
        "name": dataset.name,
        "count": len(dataset),
        "image_size": dataset.image_size,
        "relation_ratio": dataset.relation_ratio,
        "base_seed": dataset.base_seed,
        "seed_range": [min(dataset.seeds), max(dataset.seeds) + 1],
        "vocabulary": VOCAB.to_json(),
        "record_layout": {"tokens": f"uint16le[{MAX_EXPR_LEN}]", "box": "float32le[4]"},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path: str | Path) -> GroundingDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"unreadable manifest in {path}: {e}") from e
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"dataset version {manifest.get('version')!r} != {DATASET_VERSION}")
    if manifest.get("vocabulary", {}).get("version") != VOCAB_VERSION:
        raise DatasetFormatError("vocabulary version mismatch")
    n = manifest["count"]
    raw = (path / "records.bin").read_bytes()
    if len(raw) != n * _RECORD.itemsize:
        raise DatasetFormatError(f"records.bin holds {len(raw)} bytes, expected {n * _RECORD.itemsize}")
    rec = np.frombuffer(raw, dtype=_RECORD)
    lines = (path / "scenes.jsonl").read_text().splitlines()
    if len(lines) != n:
        raise DatasetFormatError(f"scenes.jsonl has {len(lines)} lines, expected {n}")
    size = manifest["image_size"]
    samples = []
    for i, line in enumerate(lines):
        meta = json.loads(line)
        scene = SceneSpec.from_json(meta["scene"])
        toks = tuple(int(t) for t in rec[i]["tokens"] if t != 0)
        box = tuple(float(v) for v in rec[i]["box"])
        samples.append(GroundingSample(render(scene, size, size), toks, box, scene, int(meta["seed"])))
    return GroundingDataset(samples, manifest["base_seed"], size, manifest["relation_ratio"], manifest["name"])
