"""Task labels over concept vectors and the concept-loudness dataset setups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .datasets import ConceptSchema, apply_subset, build_schema, reduced_schema

TASK_NAMES = ("shape", "bin_shape", "bin_scale_xor_bin_shape")

GREEN = (0.0, 1.0, 0.0)
COLOURS = {
    "purple": (1.0, 0.0, 1.0),
    "blue": (0.0, 0.0, 1.0),
    "turquoise": (0.0, 1.0, 0.85),
}


@dataclass(frozen=True)
class TaskSpec:
    """A named labelling of concept vectors.

    ``label_fn`` receives a dict of concept name -> integer array of indices
    into the *unreduced* value grid and returns integer labels.
    """

    name: str
    dataset_id: str
    num_classes: int
    label_fn: Callable[[dict], np.ndarray]

    def labels(self, schema: ConceptSchema, concepts) -> np.ndarray:
        """Label rows of ``concepts`` (indices into ``schema``)."""
        c = np.atleast_2d(np.asarray(concepts, dtype=np.int64))
        origin = {
            concept.name: np.asarray(concept.origin, dtype=np.int64)[c[:, j]]
            for j, concept in enumerate(schema.concepts)
        }
        y = np.asarray(self.label_fn(origin), dtype=np.int64)
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"task {self.name!r} produced labels outside [0, {self.num_classes})")
        return y

    def __call__(self, schema: ConceptSchema, c) -> int:
        return int(self.labels(schema, c)[0])


def make_task(dataset_id: str, task_name: str) -> TaskSpec:
    """Binary tasks encode False as 0 and True as 1."""
    if task_name not in TASK_NAMES:
        raise ValueError(f"unknown task {task_name!r}; expected one of {TASK_NAMES}")
    if dataset_id in ("dsprites", "dsprites_colour"):
        fns = {
            "shape": (3, lambda c: c["shape"]),
            "bin_shape": (2, lambda c: (c["shape"] == 0) | (c["shape"] == 1)),
            "bin_scale_xor_bin_shape": (2, lambda c: (c["shape"] == 2) ^ (c["scale"] > 2)),
        }
    elif dataset_id == "shapes3d_proxy":
        fns = {
            "shape": (4, lambda c: c["shape"]),
            "bin_shape": (2, lambda c: c["shape"] >= 2),
            "bin_scale_xor_bin_shape": (2, lambda c: (c["shape"] >= 2) ^ (c["scale"] > 2)),
        }
    else:
        raise ValueError(f"unknown dataset_id {dataset_id!r}")
    n, fn = fns[task_name]
    return TaskSpec(task_name, dataset_id, n, lambda c, fn=fn: np.asarray(fn(c)).astype(np.int64))


@dataclass(frozen=True)
class LoudnessSetup:
    name: str
    schema: ConceptSchema
    loud: tuple
    quiet: tuple
    description: str = ""

    def __post_init__(self):
        missing = set(self.loud) | set(self.quiet)
        missing -= set(self.schema.names)
        if missing:
            raise ValueError(f"setup {self.name!r} names unknown concepts {sorted(missing)}")


def make_spatial_variance_setups() -> tuple[LoudnessSetup, LoudnessSetup]:
    """High/low spatial-variance dSprites grids with equal cardinalities."""
    base = build_schema("dsprites")
    common = {"shape": range(3), "scale": range(6), "rotation": range(20)}
    high = apply_subset(base, {**common, "pos_x": [0, 10, 20, 30], "pos_y": [0, 10, 20, 30]})
    low = apply_subset(base, {**common, "pos_x": [0, 1, 2, 3], "pos_y": [0, 1, 2, 3]})
    quiet = ("shape", "scale", "rotation")
    return (
        LoudnessSetup("high_spatial", high, ("pos_x", "pos_y"), quiet,
                      "positions spread across the canvas"),
        LoudnessSetup("low_spatial", low, (), quiet + ("pos_x", "pos_y"),
                      "positions within a few pixels"),
    )


def make_colour_variance_setups() -> tuple[LoudnessSetup, ...]:
    """Green against purple, blue and turquoise on a shared sprite grid."""
    subset = {
        "shape": range(3),
        "scale": range(3),
        "rotation": [0, 2, 4, 6],
        "pos_x": range(0, 17, 2),
        "pos_y": range(0, 17, 2),
    }
    setups = []
    for name, rgb in COLOURS.items():
        schema = apply_subset(build_schema("dsprites_colour", colour_pair=(GREEN, rgb)), subset)
        setups.append(LoudnessSetup(f"green_{name}", schema, (), ("fill_colour",),
                                    f"fill colour green vs {name}"))
    return tuple(setups)


def make_shapes3d_loudness_setups() -> tuple[LoudnessSetup, ...]:
    """Three shapes3d proxy grids of 16000 samples each.

    The first keeps every other value of the hue, scale and orientation
    concepts; the other two keep all hues at a single orientation with the
    lower or upper half of the scale grid.
    """
    base = build_schema("shapes3d_proxy")
    hues_stride = {k: range(0, 10, 2) for k in ("floor_hue", "wall_hue", "object_hue")}
    task1 = apply_subset(base, {**hues_stride, "scale": range(0, 8, 2), "shape": range(4),
                                "orientation": range(0, 15, 2)})
    task2 = apply_subset(base, {"scale": range(0, 4), "orientation": [0]})
    task3 = apply_subset(base, {"scale": range(4, 8), "orientation": [0]})
    hues = ("floor_hue", "wall_hue", "object_hue")
    return (
        LoudnessSetup("task1", task1, ("orientation",), hues + ("scale", "shape")),
        LoudnessSetup("task2_small_scale", task2, hues, ("scale", "shape")),
        LoudnessSetup("task3_large_scale", task3, hues + ("scale",), ("shape",)),
    )


def all_setups() -> dict[str, LoudnessSetup]:
    out = {}
    for setup in (*make_spatial_variance_setups(), *make_colour_variance_setups(),
                  *make_shapes3d_loudness_setups()):
        out[setup.name] = setup
    return out


def task_schema(dataset_id: str) -> ConceptSchema:
    """Grid used by the task-dependence and data-efficiency protocols."""
    return reduced_schema(dataset_id)
