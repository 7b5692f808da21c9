"""Procedural concept-annotated image datasets.

Two families of images are generated on the fly from their concept grids:
dSprites-style sprites (optionally with a two-valued fill colour) and a flat
2D stand-in for shapes3d scenes.  Every image is a pure function of its
concept vector, so datasets are enumerated in row-major order over the
Cartesian product of concept values (first concept slowest-varying).
"""

from __future__ import annotations

import colorsys
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

DATASET_IDS = ("dsprites", "dsprites_colour", "shapes3d_proxy")

DSPRITES_CARDINALITIES = (1, 3, 6, 40, 32, 32)
SHAPES3D_CARDINALITIES = (10, 10, 10, 8, 4, 15)

RESOLUTIONS = (32, 64)
DEFAULT_MAX_SIZE = 10**6

# Sprite geometry in normalised [0, 1] canvas units.
_SPRITE_EXTENT = 0.15
_SPRITE_MARGIN = 0.22
# shapes3d proxy layout.
_HORIZON = 0.5
_OBJECT_CENTRE = (0.5, 0.55)
_HUE_VALUE = 0.9


class SchemaError(ValueError):
    """Raised for invalid schemas, subset specs or concept vectors."""


@dataclass(frozen=True)
class Concept:
    """A named concept with an ordered grid of values.

    ``origin`` holds the index of every value in the unreduced parent grid,
    so task labels keep their meaning after subsetting.
    """

    name: str
    values: tuple
    origin: tuple = ()

    def __post_init__(self):
        if len(self.values) < 1:
            raise SchemaError(f"concept {self.name!r} has no values")
        if not self.origin:
            object.__setattr__(self, "origin", tuple(range(len(self.values))))
        if len(self.origin) != len(self.values):
            raise SchemaError(f"concept {self.name!r}: origin/values length mismatch")

    @property
    def cardinality(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ConceptSchema:
    dataset_id: str
    concepts: tuple

    def __post_init__(self):
        if self.dataset_id not in DATASET_IDS:
            raise SchemaError(f"unknown dataset_id {self.dataset_id!r}")
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate concept names in {names}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c.cardinality for c in self.concepts)

    @property
    def size(self) -> int:
        return int(math.prod(self.cardinalities))

    @property
    def n_channels(self) -> int:
        return 1 if self.dataset_id == "dsprites" else 3

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"schema has no concept {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "concepts": [
                {"name": c.name, "values": [_jsonable(v) for v in c.values], "origin": list(c.origin)}
                for c in self.concepts
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSchema":
        concepts = tuple(
            Concept(c["name"], tuple(_from_json(v) for v in c["values"]), tuple(c.get("origin", ())))
            for c in d["concepts"]
        )
        return cls(d["dataset_id"], concepts)

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(v):
    if isinstance(v, tuple):
        return [float(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


def _from_json(v):
    return tuple(v) if isinstance(v, list) else v


@dataclass
class Sample:
    image: np.ndarray
    concepts: np.ndarray
    label: Optional[int] = None


@dataclass
class PairSample:
    first: Sample
    second: Sample
    k: int


@dataclass
class ConceptDataset:
    """Images plus concept annotations, stored as dense arrays.

    ``images`` is ``(N, H, W, C)`` float32 in [0, 1]; ``concepts`` is ``(N, K)``
    integer indices into the schema; ``index`` the row-major position of each
    sample in the schema's product grid.
    """

    schema: ConceptSchema
    images: np.ndarray
    concepts: np.ndarray
    index: np.ndarray
    labels: Optional[np.ndarray] = None
    resolution: int = field(default=64)

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> Sample:
        label = None if self.labels is None else int(self.labels[i])
        return Sample(self.images[i], self.concepts[i], label)

    def subset(self, rows) -> "ConceptDataset":
        rows = np.asarray(rows)
        return ConceptDataset(
            self.schema,
            self.images[rows],
            self.concepts[rows],
            self.index[rows],
            None if self.labels is None else self.labels[rows],
            self.resolution,
        )

    def with_labels(self, labels) -> "ConceptDataset":
        return ConceptDataset(self.schema, self.images, self.concepts, self.index,
                              np.asarray(labels, dtype=np.int64), self.resolution)


# --------------------------------------------------------------------------
# schemas


def build_schema(dataset_id: str, colour_pair=None) -> ConceptSchema:
    """Full concept grid for ``dataset_id``.

    ``colour_pair`` (two RGB triples) is required for ``dsprites_colour`` and
    rejected otherwise.
    """
    if dataset_id not in DATASET_IDS:
        raise SchemaError(f"unknown dataset_id {dataset_id!r}; expected one of {DATASET_IDS}")
    if (colour_pair is not None) != (dataset_id == "dsprites_colour"):
        raise SchemaError("colour_pair must be given exactly when dataset_id is 'dsprites_colour'")

    if dataset_id == "shapes3d_proxy":
        hues = tuple(float(h) for h in np.linspace(0.0, 1.0, 10, endpoint=False))
        concepts = (
            Concept("floor_hue", hues),
            Concept("wall_hue", hues),
            Concept("object_hue", hues),
            Concept("scale", tuple(float(s) for s in np.linspace(0.0, 1.0, 8))),
            Concept("shape", ("cube", "cylinder", "sphere", "capsule")),
            Concept("orientation", tuple(float(o) for o in np.linspace(-30.0, 30.0, 15))),
        )
        schema = ConceptSchema(dataset_id, concepts)
        assert schema.cardinalities == SHAPES3D_CARDINALITIES
        return schema

    concepts = [
        Concept("color", ("white",)),
        Concept("shape", ("square", "ellipse", "heart")),
        Concept("scale", tuple(float(s) for s in np.linspace(0.5, 1.0, 6))),
        Concept("rotation", tuple(float(r) for r in np.linspace(0.0, 2 * np.pi, 40, endpoint=False))),
        Concept("pos_x", tuple(float(p) for p in np.linspace(0.0, 1.0, 32))),
        Concept("pos_y", tuple(float(p) for p in np.linspace(0.0, 1.0, 32))),
    ]
    if dataset_id == "dsprites_colour":
        pair = tuple(tuple(float(x) for x in rgb) for rgb in colour_pair)
        if len(pair) != 2 or any(len(rgb) != 3 for rgb in pair):
            raise SchemaError("colour_pair must hold two RGB triples")
        if any(not 0.0 <= x <= 1.0 for rgb in pair for x in rgb):
            raise SchemaError("RGB components must lie in [0, 1]")
        concepts.append(Concept("fill_colour", pair))
    schema = ConceptSchema(dataset_id, tuple(concepts))
    assert schema.cardinalities[:6] == DSPRITES_CARDINALITIES
    return schema


def apply_subset(schema: ConceptSchema, spec) -> ConceptSchema:
    """Keep only the listed value indices of each concept.

    ``spec`` maps concept name to retained indices, or is a sequence aligned
    with the schema's concepts.  Concepts missing from a mapping keep all
    their values.  Order follows the listed indices.
    """
    if isinstance(spec, dict):
        unknown = set(spec) - set(schema.names)
        if unknown:
            raise SchemaError(f"subset names unknown concepts: {sorted(unknown)}")
        retained = [spec.get(c.name, range(c.cardinality)) for c in schema.concepts]
    else:
        retained = list(spec)
        if len(retained) != len(schema.concepts):
            raise SchemaError("subset spec must list one index set per concept")

    new = []
    for concept, keep in zip(schema.concepts, retained):
        keep = [int(i) for i in keep]
        if not keep:
            raise SchemaError(f"empty retained list for concept {concept.name!r}")
        bad = [i for i in keep if not 0 <= i < concept.cardinality]
        if bad:
            raise SchemaError(f"indices {bad} out of range for concept {concept.name!r} "
                              f"(cardinality {concept.cardinality})")
        if len(set(keep)) != len(keep):
            raise SchemaError(f"duplicate indices for concept {concept.name!r}")
        new.append(Concept(concept.name,
                           tuple(concept.values[i] for i in keep),
                           tuple(concept.origin[i] for i in keep)))
    return ConceptSchema(schema.dataset_id, tuple(new))


def reduced_schema(dataset_id: str) -> ConceptSchema:
    """The reduced grids used by the task-dependence and data-efficiency runs."""
    if dataset_id == "dsprites":
        return apply_subset(build_schema("dsprites"), {
            "rotation": range(0, 40, 5),
            "pos_x": range(0, 32, 2),
            "pos_y": range(0, 32, 2),
        })
    if dataset_id == "shapes3d_proxy":
        # every other value of every concept except shape; orientation keeps the odd
        # positions so the seven kept angles are symmetric around zero
        return apply_subset(build_schema("shapes3d_proxy"), {
            "floor_hue": range(0, 10, 2),
            "wall_hue": range(0, 10, 2),
            "object_hue": range(0, 10, 2),
            "scale": range(0, 8, 2),
            "orientation": range(1, 15, 2),
        })
    raise SchemaError(f"no reduced grid defined for {dataset_id!r}")


# --------------------------------------------------------------------------
# enumeration


def index_to_concepts(schema: ConceptSchema, i) -> np.ndarray:
    """Row-major decode of grid position(s) ``i`` into concept indices."""
    i = np.asarray(i, dtype=np.int64)
    if np.any(i < 0) or np.any(i >= schema.size):
        raise IndexError(f"index out of range [0, {schema.size})")
    return np.stack(np.unravel_index(i, schema.cardinalities), axis=-1).astype(np.int64)


def concepts_to_index(schema: ConceptSchema, c) -> np.ndarray | int:
    c = np.asarray(c, dtype=np.int64)
    validate_concepts(schema, c)
    out = np.ravel_multi_index(tuple(np.moveaxis(c, -1, 0)), schema.cardinalities)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def validate_concepts(schema: ConceptSchema, c) -> None:
    c = np.asarray(c)
    if c.shape[-1] != len(schema.concepts):
        raise SchemaError(f"concept vector has {c.shape[-1]} entries, schema has {len(schema.concepts)}")
    card = np.asarray(schema.cardinalities)
    if np.any(c < 0) or np.any(c >= card):
        raise SchemaError("concept index out of range for schema")


# --------------------------------------------------------------------------
# rendering


def _hue_rgb(h: float) -> tuple:
    return colorsys.hsv_to_rgb(h, 1.0, _HUE_VALUE)


def _values(schema: ConceptSchema, c: np.ndarray, name: str) -> list:
    j = schema.index_of(name)
    vals = schema.concepts[j].values
    return [vals[k] for k in c[:, j]]


def _supersampled_grid(resolution: int):
    ss = 2 * resolution
    coords = (np.arange(ss, dtype=np.float64) + 0.5) / ss
    return coords[None, :, None], coords[None, None, :]  # rows (y), cols (x)


def _box_downsample(a: np.ndarray) -> np.ndarray:
    n, h, w = a.shape
    return a.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


_SPRITE_SHAPES = {"square": 0, "ellipse": 1, "heart": 2}


def _sprite_coverage(shape_ids, scales, angles, px, py, resolution) -> np.ndarray:
    ys, xs = _supersampled_grid(resolution)
    cx = (_SPRITE_MARGIN + (1 - 2 * _SPRITE_MARGIN) * px)[:, None, None]
    cy = (_SPRITE_MARGIN + (1 - 2 * _SPRITE_MARGIN) * py)[:, None, None]
    r = (_SPRITE_EXTENT * scales)[:, None, None]
    cos = np.cos(angles)[:, None, None]
    sin = np.sin(angles)[:, None, None]
    dx, dy = xs - cx, ys - cy
    u = (cos * dx + sin * dy) / r
    v = (-sin * dx + cos * dy) / r

    mask = np.empty(u.shape, dtype=bool)
    for sid in np.unique(shape_ids):
        rows = shape_ids == sid
        su, sv = u[rows], v[rows]
        if sid == 0:
            mask[rows] = np.maximum(np.abs(su), np.abs(sv)) <= 1.0
        elif sid == 1:
            mask[rows] = su**2 + (sv / 0.55) ** 2 <= 1.0
        else:
            # implicit heart curve, y pointing up in sprite coordinates
            hx = 1.2 * su
            hy = -1.2 * sv + 0.15
            mask[rows] = (hx**2 + hy**2 - 1.0) ** 3 - hx**2 * hy**3 <= 0.0
    return _box_downsample(mask.astype(np.float64))


def _render_sprites(schema, c, resolution):
    shape_ids = np.array([_SPRITE_SHAPES[s] for s in _values(schema, c, "shape")])
    cov = _sprite_coverage(
        shape_ids,
        np.array(_values(schema, c, "scale"), dtype=np.float64),
        np.array(_values(schema, c, "rotation"), dtype=np.float64),
        np.array(_values(schema, c, "pos_x"), dtype=np.float64),
        np.array(_values(schema, c, "pos_y"), dtype=np.float64),
        resolution,
    )
    if schema.dataset_id == "dsprites":
        return cov[..., None]
    rgb = np.array(_values(schema, c, "fill_colour"), dtype=np.float64)
    return cov[..., None] * rgb[:, None, None, :]


_SCENE_SHAPES = {"cube": 0, "cylinder": 1, "sphere": 2, "capsule": 3}


def _render_scene(schema, c, resolution):
    n = len(c)
    ys, xs = _supersampled_grid(resolution)
    floor = np.array([_hue_rgb(h) for h in _values(schema, c, "floor_hue")])
    wall = np.array([_hue_rgb(h) for h in _values(schema, c, "wall_hue")])
    obj = np.array([_hue_rgb(h) for h in _values(schema, c, "object_hue")])
    scale = np.array(_values(schema, c, "scale"), dtype=np.float64)
    shear = np.tan(np.deg2rad(np.array(_values(schema, c, "orientation"), dtype=np.float64)))
    shape_ids = np.array([_SCENE_SHAPES[s] for s in _values(schema, c, "shape")])

    r = (0.12 + 0.12 * scale)[:, None, None]
    dy = np.broadcast_to(ys - _OBJECT_CENTRE[1], (n, 2 * resolution, 2 * resolution))
    dx = xs - _OBJECT_CENTRE[0] - shear[:, None, None] * dy
    u, v = dx / r, dy / r
    mask = np.empty(u.shape, dtype=bool)
    for sid in np.unique(shape_ids):
        rows = shape_ids == sid
        su, sv = u[rows], v[rows]
        if sid == 0:
            mask[rows] = np.maximum(np.abs(su), np.abs(sv)) <= 1.0
        elif sid == 1:
            mask[rows] = (((np.abs(su) <= 0.8) & (sv >= -0.7) & (sv <= 1.0))
                          | ((su / 0.8) ** 2 + ((sv + 0.7) / 0.3) ** 2 <= 1.0))
        elif sid == 2:
            mask[rows] = su**2 + sv**2 <= 1.0
        else:
            mask[rows] = su**2 + (sv - np.clip(sv, -0.5, 0.5)) ** 2 <= 0.25
    cov = _box_downsample(mask.astype(np.float64))[..., None]

    rows = (np.arange(resolution) + 0.5) / resolution
    is_floor = (rows >= _HORIZON)[None, :, None, None]
    background = np.where(is_floor, floor[:, None, None, :], wall[:, None, None, :])
    background = np.broadcast_to(background, (n, resolution, resolution, 3))
    return cov * obj[:, None, None, :] + (1.0 - cov) * background


def render_batch(schema: ConceptSchema, c, resolution: int = 64, chunk: int = 128) -> np.ndarray:
    """Render concept vectors ``c`` of shape ``(N, K)`` to ``(N, H, W, C)`` float32."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    c = np.atleast_2d(np.asarray(c, dtype=np.int64))
    validate_concepts(schema, c)
    fn = _render_scene if schema.dataset_id == "shapes3d_proxy" else _render_sprites
    out = np.empty((len(c), resolution, resolution, schema.n_channels), dtype=np.float32)
    for start in range(0, len(c), chunk):
        block = fn(schema, c[start:start + chunk], resolution)
        out[start:start + chunk] = np.clip(block, 0.0, 1.0)
    return out


def render(schema: ConceptSchema, c, resolution: int = 64) -> np.ndarray:
    return render_batch(schema, np.asarray(c)[None, :], resolution)[0]


# --------------------------------------------------------------------------
# datasets


def generate_dataset(
    schema: ConceptSchema,
    resolution: int = 64,
    seed: Optional[int] = None,
    *,
    indices: Optional[Sequence[int]] = None,
    max_size: int = DEFAULT_MAX_SIZE,
    stream: bool = False,
):
    """Render the schema's grid (or the given grid ``indices``) in index order.

    With ``seed`` the sample order is shuffled; pixels depend only on the
    concept vectors.  ``stream=True`` yields :class:`Sample` objects lazily
    and lifts the ``max_size`` guard.
    """
    idx = np.arange(schema.size, dtype=np.int64) if indices is None else np.asarray(indices, dtype=np.int64)
    if seed is not None:
        idx = idx[np.random.default_rng(seed).permutation(len(idx))]
    if stream:
        return _stream(schema, idx, resolution)
    if len(idx) > max_size:
        raise MemoryError(f"{len(idx)} samples exceeds max_size={max_size}; pass stream=True")
    concepts = index_to_concepts(schema, idx)
    images = render_batch(schema, concepts, resolution)
    return ConceptDataset(schema, images, concepts, idx, resolution=resolution)


def _stream(schema, idx, resolution, chunk=256) -> Iterator[Sample]:
    for start in range(0, len(idx), chunk):
        c = index_to_concepts(schema, idx[start:start + chunk])
        for img, cv in zip(render_batch(schema, c, resolution), c):
            yield Sample(img, cv)


def varying_concepts(schema: ConceptSchema) -> list[int]:
    return [j for j, card in enumerate(schema.cardinalities) if card >= 2]


def sample_pair_concepts(schema: ConceptSchema, k: int, rng: np.random.Generator,
                         n: int = 1, first=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` concept-vector pairs at Hamming distance exactly ``k``.

    ``first`` optionally fixes the anchors; otherwise they are uniform over
    the grid.  The ``k`` differing concepts are chosen uniformly among those
    with at least two values and each gets a uniformly drawn different value.
    """
    free = np.asarray(varying_concepts(schema), dtype=np.int64)
    if not 1 <= k <= len(free):
        raise ValueError(f"k={k} must lie in [1, {len(free)}] (concepts with >= 2 values)")
    if first is None:
        first = index_to_concepts(schema, rng.integers(0, schema.size, size=n))
    else:
        first = np.atleast_2d(np.asarray(first, dtype=np.int64))
        validate_concepts(schema, first)
        n = len(first)
    card = np.asarray(schema.cardinalities, dtype=np.int64)
    chosen = free[np.argsort(rng.random((n, len(free))), axis=1)[:, :k]]
    rows = np.arange(n)[:, None]
    second = first.copy()
    shift = rng.integers(1, card[chosen])
    second[rows, chosen] = (first[rows, chosen] + shift) % card[chosen]
    return first, second


def sample_pair(schema: ConceptSchema, k: int, rng: np.random.Generator, resolution: int = 64) -> PairSample:
    c1, c2 = sample_pair_concepts(schema, k, rng, 1)
    images = render_batch(schema, np.concatenate([c1, c2]), resolution)
    return PairSample(Sample(images[0], c1[0]), Sample(images[1], c2[0]), k)


def stride_subsample(schema: ConceptSchema, cap: int) -> np.ndarray:
    """Grid indices ``0, s, 2s, ...`` keeping at most ``cap`` samples.

    ``s`` is the smallest stride that meets the cap and shares no factor with
    any concept's cardinality, so every value of every concept survives.
    """
    n = schema.size
    if n <= cap:
        return np.arange(n, dtype=np.int64)
    stride = math.ceil(n / cap)
    while any(math.gcd(stride, card) != 1 for card in schema.cardinalities if card > 1):
        stride += 1
    return np.arange(0, n, stride, dtype=np.int64)


# --------------------------------------------------------------------------
# export / import


def export_dataset(ds: ConceptDataset, path) -> Path:
    """Write ``images/*.png``, ``concepts.csv`` and ``schema.json`` under ``path``."""
    from PIL import Image

    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(ds))))
    with open(path / "concepts.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "index", *ds.schema.names])
        for i in range(len(ds)):
            name = f"{i:0{width}d}.png"
            pixels = np.round(ds.images[i] * 255.0).astype(np.uint8)
            mode = "L" if pixels.shape[-1] == 1 else "RGB"
            Image.fromarray(pixels[..., 0] if mode == "L" else pixels, mode=mode).save(path / "images" / name)
            writer.writerow([name, int(ds.index[i]), *(int(x) for x in ds.concepts[i])])
    meta = ds.schema.to_dict()
    meta["resolution"] = ds.resolution
    (path / "schema.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return path


def import_dataset(path) -> ConceptDataset:
    from PIL import Image

    path = Path(path)
    meta = json.loads((path / "schema.json").read_text(encoding="utf-8"))
    schema = ConceptSchema.from_dict(meta)
    files, index, concepts = [], [], []
    with open(path / "concepts.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[2:] != schema.names:
            raise SchemaError(f"concepts.csv header {header[2:]} does not match schema {schema.names}")
        for row in reader:
            files.append(row[0])
            index.append(int(row[1]))
            concepts.append([int(x) for x in row[2:]])
    images = []
    for name in files:
        arr = np.asarray(Image.open(path / "images" / name), dtype=np.float32) / 255.0
        images.append(arr[..., None] if arr.ndim == 2 else arr)
    concepts = np.asarray(concepts, dtype=np.int64).reshape(-1, len(schema.concepts))
    validate_concepts(schema, concepts)
    res = int(meta.get("resolution", images[0].shape[0] if images else 64))
    return ConceptDataset(schema, np.stack(images) if images else np.zeros((0, res, res, schema.n_channels), np.float32),
                          concepts, np.asarray(index, dtype=np.int64), resolution=res)


# --------------------------------------------------------------------------
# pair streams for weak supervision


class GridRenderer:
    """Renders grid indices on demand and memoises the images."""

    def __init__(self, schema: ConceptSchema, resolution: int = 64, max_cache: int = 200_000):
        self.schema, self.resolution, self.max_cache = schema, resolution, max_cache
        self._cache: dict[int, np.ndarray] = {}

    def seed(self, indices, images) -> None:
        for i, img in zip(np.asarray(indices).tolist(), images):
            if len(self._cache) >= self.max_cache:
                break
            self._cache[int(i)] = img

    def __call__(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        missing = sorted({int(i) for i in indices.tolist()} - self._cache.keys())
        fresh = {}
        if missing:
            imgs = render_batch(self.schema, index_to_concepts(self.schema, missing), self.resolution)
            fresh = dict(zip(missing, imgs))
            if len(self._cache) + len(fresh) <= self.max_cache:
                self._cache.update(fresh)
        return np.stack([self._cache[i] if i in self._cache else fresh[i] for i in indices.tolist()])


class PairStream:
    """Endless source of image pairs differing in ``k`` concepts.

    Anchors are drawn from ``anchors`` (grid indices) when given, otherwise
    uniformly from the whole grid; partners are rendered from the grid,
    avoiding the grid indices in ``exclude`` (e.g. a held-out split).
    ``k="random"`` draws ``k`` uniformly from ``1 .. n_varying - 1`` per pair.
    """

    max_redraws = 50

    def __init__(self, schema: ConceptSchema, resolution: int = 64, k=1, anchors=None,
                 renderer: Optional[GridRenderer] = None, exclude=None):
        self.schema, self.resolution, self.k = schema, resolution, k
        self.anchors = None if anchors is None else np.asarray(anchors, dtype=np.int64)
        self.exclude = None if exclude is None else np.unique(np.asarray(exclude, dtype=np.int64))
        self.renderer = renderer or GridRenderer(schema, resolution)
        n_free = len(varying_concepts(schema))
        if k != "random" and not 1 <= int(k) <= n_free:
            raise ValueError(f"k={k} must lie in [1, {n_free}]")

    @property
    def image_shape(self) -> tuple:
        return (self.resolution, self.resolution, self.schema.n_channels)

    def __len__(self) -> int:
        return self.schema.size if self.anchors is None else len(self.anchors)

    def batch_indices(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.anchors is None:
            first = rng.integers(0, self.schema.size, size=n)
        else:
            first = self.anchors[rng.integers(0, len(self.anchors), size=n)]
        return first, self.partners(rng, first)

    def partners(self, rng: np.random.Generator, first) -> np.ndarray:
        """One partner grid index per anchor index in ``first``, avoiding ``exclude``."""
        c1 = index_to_concepts(self.schema, np.atleast_1d(np.asarray(first, dtype=np.int64)))
        second = self._partners(rng, c1)
        if self.exclude is not None:
            for _ in range(self.max_redraws):
                bad = np.isin(second, self.exclude)
                if not bad.any():
                    break
                second[bad] = self._partners(rng, c1[bad])
            else:
                raise RuntimeError("could not draw partners outside the excluded set")
        return second

    def _partners(self, rng, c1) -> np.ndarray:
        if self.k == "random":
            n_free = len(varying_concepts(self.schema))
            ks = rng.integers(1, max(2, n_free), size=len(c1))
            c2 = np.empty_like(c1)
            for k in np.unique(ks):
                rows = ks == k
                c2[rows] = sample_pair_concepts(self.schema, int(k), rng, first=c1[rows])[1]
        else:
            c2 = sample_pair_concepts(self.schema, int(self.k), rng, first=c1)[1]
        return np.atleast_1d(concepts_to_index(self.schema, c2))

    def batch(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        i1, i2 = self.batch_indices(rng, n)
        return self.renderer(i1), self.renderer(i2)
