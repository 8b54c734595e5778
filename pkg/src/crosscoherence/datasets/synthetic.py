"""Procedural chairs and tables with attribute ground truth and templated captions.

Shapes are built from boxes, cylinders and slabs in a floor-at-zero frame,
surface-sampled with per-part colors, then normalized before being written.
Attribute tuples are unique within a class, so every caption (which
mentions every attribute) identifies exactly one shape of its class.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from crosscoherence.datasets.formats import DatasetManifest, ShapeRecord, save_manifest, write_cloud
from crosscoherence.geometry import ColoredPointCloud, normalize_cloud

log = logging.getLogger(__name__)

CLASSES = ("chair", "table")
COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (0.80, 0.10, 0.10),
    "green": (0.10, 0.60, 0.15),
    "blue": (0.10, 0.25, 0.80),
    "yellow": (0.90, 0.80, 0.10),
    "black": (0.08, 0.08, 0.08),
    "white": (0.92, 0.92, 0.92),
}
MATERIALS = ("wooden", "metal")
CHAIR_LEGS = (3, 4)
TABLE_LEGS = (1, 3, 4)
BACKRESTS = ("high", "low")
TOP_SHAPES = ("round", "square", "rectangular")
NUMBER_WORDS = {1: "one", 3: "three", 4: "four"}


@dataclass(frozen=True)
class ShapeAttributes:
    class_label: str
    leg_count: int
    primary_color: str
    secondary_color: str
    material: str
    backrest: Optional[str] = None   # chairs only
    armrests: Optional[bool] = None  # chairs only
    top_shape: Optional[str] = None  # tables only

    def __post_init__(self):
        if self.class_label not in CLASSES:
            raise ValueError(f"unknown class {self.class_label!r}")
        if self.primary_color not in COLORS or self.secondary_color not in COLORS:
            raise ValueError("unknown color")
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")
        if self.class_label == "chair":
            if self.leg_count not in CHAIR_LEGS or self.backrest not in BACKRESTS or self.armrests is None:
                raise ValueError(f"invalid chair attributes {self}")
            if self.top_shape is not None:
                raise ValueError("chairs have no top shape")
        else:
            if self.leg_count not in TABLE_LEGS or self.top_shape not in TOP_SHAPES:
                raise ValueError(f"invalid table attributes {self}")
            if self.backrest is not None or self.armrests is not None:
                raise ValueError("tables have no backrest or armrests")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShapeAttributes":
        return cls(**d)


def sample_attributes(class_label: str, rng: np.random.Generator) -> ShapeAttributes:
    colors = list(COLORS)
    common = dict(
        primary_color=colors[rng.integers(len(colors))],
        secondary_color=colors[rng.integers(len(colors))],
        material=MATERIALS[rng.integers(len(MATERIALS))],
    )
    if class_label == "chair":
        return ShapeAttributes("chair", int(CHAIR_LEGS[rng.integers(2)]), backrest=BACKRESTS[rng.integers(2)],
                               armrests=bool(rng.integers(2)), **common)
    return ShapeAttributes("table", int(TABLE_LEGS[rng.integers(3)]), top_shape=TOP_SHAPES[rng.integers(3)],
                           **common)


# ---------------------------------------------------------------------------
# surface sampling


def _box_area(size):
    x, y, z = size
    return 2 * (x * y + y * z + x * z)


def _sample_box(center, size, n, rng):
    size = np.asarray(size, dtype=np.float64)
    x, y, z = size
    face_areas = np.array([y * z, y * z, x * z, x * z, x * y, x * y])
    faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    uv = rng.random((n, 3)) - 0.5
    pts = uv * size
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * size[axis]
    return pts + np.asarray(center)


def _cylinder_area(radius, height):
    return 2 * np.pi * radius * height


def _sample_cylinder(center_xy, z0, z1, radius, n, rng):
    theta = rng.random(n) * 2 * np.pi
    z = z0 + rng.random(n) * (z1 - z0)
    return np.stack([center_xy[0] + radius * np.cos(theta), center_xy[1] + radius * np.sin(theta), z], axis=1)


def _disk_slab_area(radius, thickness):
    return 2 * np.pi * radius ** 2 + 2 * np.pi * radius * thickness


def _sample_disk_slab(center, radius, thickness, n, rng):
    caps = 2 * np.pi * radius ** 2
    rim = 2 * np.pi * radius * thickness
    on_rim = rng.random(n) < rim / (caps + rim)
    theta = rng.random(n) * 2 * np.pi
    r = np.where(on_rim, radius, radius * np.sqrt(rng.random(n)))
    top = rng.random(n) < 0.5
    z = np.where(on_rim, (rng.random(n) - 0.5) * thickness, np.where(top, 0.5, -0.5) * thickness)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1) + np.asarray(center)


@dataclass
class _Part:
    name: str
    role: str  # "primary" or "secondary" color
    area: float
    sampler: object  # callable(n, rng) -> (n, 3)


@dataclass
class GeneratedShape:
    """Raw (un-normalized, floor at z=0) shape with per-point part labels."""

    points: np.ndarray
    colors: np.ndarray
    parts: np.ndarray
    regions: Dict[str, dict] = field(default_factory=dict)

    def cloud(self, shape_id: Optional[str] = None) -> ColoredPointCloud:
        return normalize_cloud(ColoredPointCloud(self.points, self.colors, shape_id))


def _leg_radius(material: str, pedestal: bool = False) -> float:
    if pedestal:
        return 0.07 if material == "wooden" else 0.04
    return 0.03 if material == "wooden" else 0.012


def _chair_parts(a: ShapeAttributes, rng) -> Tuple[List[_Part], Dict[str, dict]]:
    w, d = rng.uniform(0.42, 0.55), rng.uniform(0.40, 0.50)
    seat_top = rng.uniform(0.42, 0.50)
    thick = 0.05
    back_h = rng.uniform(0.45, 0.55) if a.backrest == "high" else rng.uniform(0.18, 0.26)
    r = _leg_radius(a.material)
    inset = 0.04
    if a.leg_count == 4:
        feet = [(sx * (w / 2 - inset), sy * (d / 2 - inset)) for sx in (-1, 1) for sy in (-1, 1)]
    else:
        feet = [(-(w / 2 - inset), d / 2 - inset), (w / 2 - inset, d / 2 - inset), (0.0, -(d / 2 - inset))]
    leg_top = seat_top - thick
    parts = [
        _Part("seat", "primary", _box_area((w, d, thick)),
              lambda n, g: _sample_box((0, 0, seat_top - thick / 2), (w, d, thick), n, g)),
        _Part("backrest", "primary", _box_area((w, 0.04, back_h)),
              lambda n, g: _sample_box((0, -d / 2 + 0.02, seat_top + back_h / 2), (w, 0.04, back_h), n, g)),
    ]
    for i, (fx, fy) in enumerate(feet):
        parts.append(_Part(f"leg{i}", "secondary", _cylinder_area(r, leg_top),
                           lambda n, g, fx=fx, fy=fy: _sample_cylinder((fx, fy), 0.0, leg_top, r, n, g)))
    arm_h = 0.2
    if a.armrests:
        for sx in (-1, 1):
            cx = sx * (w / 2 + 0.03)
            parts.append(_Part(f"armrest{sx}", "secondary", _box_area((0.04, d, 0.03)),
                               lambda n, g, cx=cx: _sample_box((cx, 0, seat_top + arm_h), (0.04, d, 0.03), n, g)))
            parts.append(_Part(f"armpost{sx}", "secondary", _box_area((0.03, 0.03, arm_h)),
                               lambda n, g, cx=cx: _sample_box((cx, d / 2 - 0.03, seat_top + arm_h / 2),
                                                               (0.03, 0.03, arm_h), n, g)))
    regions = {
        "armrest": {"min_abs_x": w / 2 + 0.005, "min_z": seat_top + 0.01},
        "legs": {"max_z": leg_top, "feet": feet, "radius": r},
    }
    return parts, regions


def _table_parts(a: ShapeAttributes, rng) -> Tuple[List[_Part], Dict[str, dict]]:
    height = rng.uniform(0.70, 0.78)
    thick = 0.04
    zc = height - thick / 2
    if a.top_shape == "round":
        rad = rng.uniform(0.45, 0.60)
        top = _Part("top", "primary", _disk_slab_area(rad, thick),
                    lambda n, g: _sample_disk_slab((0, 0, zc), rad, thick, n, g))
        hx = hy = rad / np.sqrt(2)
    else:
        if a.top_shape == "square":
            lx = ly = rng.uniform(0.8, 1.0)
        else:
            lx, ly = rng.uniform(1.1, 1.4), rng.uniform(0.55, 0.75)
        top = _Part("top", "primary", _box_area((lx, ly, thick)),
                    lambda n, g: _sample_box((0, 0, zc), (lx, ly, thick), n, g))
        hx, hy = lx / 2, ly / 2
    inset = 0.08
    if a.leg_count == 1:
        feet = [(0.0, 0.0)]
    elif a.leg_count == 3:
        if a.top_shape == "round":
            rr = hx * np.sqrt(2) * 0.7
            feet = [(rr * np.cos(t), rr * np.sin(t)) for t in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3,
                                                                np.pi / 2 + 4 * np.pi / 3)]
        else:
            feet = [(-(hx - inset), hy - inset), (hx - inset, hy - inset), (0.0, -(hy - inset))]
    else:
        feet = [(sx * (hx - inset), sy * (hy - inset)) for sx in (-1, 1) for sy in (-1, 1)]
    r = _leg_radius(a.material, pedestal=a.leg_count == 1)
    leg_top = height - thick
    parts = [top]
    for i, (fx, fy) in enumerate(feet):
        parts.append(_Part(f"leg{i}", "secondary", _cylinder_area(r, leg_top),
                           lambda n, g, fx=fx, fy=fy: _sample_cylinder((fx, fy), 0.0, leg_top, r, n, g)))
    return parts, {"legs": {"max_z": leg_top, "feet": feet, "radius": r}}


def _allocate(areas: Sequence[float], n: int, min_points: int) -> List[int]:
    k = len(areas)
    if n < k * min_points:
        min_points = n // k
    rest = n - k * min_points
    raw = np.asarray(areas) / np.sum(areas) * rest
    counts = np.floor(raw).astype(int)
    frac_order = np.argsort(-(raw - counts), kind="stable")
    counts[frac_order[: rest - counts.sum()]] += 1
    return [int(c) + min_points for c in counts]


def _shade(points, base, material, rng):
    rgb = np.tile(np.asarray(base), (len(points), 1))
    if material == "wooden":
        # grain: luminance stripes along x and y
        grain = 0.85 + 0.15 * np.sin(2 * np.pi * (points[:, 0] + 0.5 * points[:, 1]) / 0.08)
        rgb = rgb * grain[:, None] + 0.04
    rgb = rgb + rng.normal(0.0, 0.02, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def build_shape(attrs: ShapeAttributes, n_points: int, rng: np.random.Generator,
                min_part_points: int = 12) -> GeneratedShape:
    parts, regions = (_chair_parts if attrs.class_label == "chair" else _table_parts)(attrs, rng)
    counts = _allocate([p.area for p in parts], n_points, min_part_points)
    pts, cols, labels = [], [], []
    for i, (part, c) in enumerate(zip(parts, counts)):
        p = part.sampler(c, rng)
        base = COLORS[attrs.primary_color if part.role == "primary" else attrs.secondary_color]
        pts.append(p)
        cols.append(_shade(p, base, attrs.material, rng))
        labels.append(np.full(c, i))
    return GeneratedShape(np.concatenate(pts), np.concatenate(cols), np.concatenate(labels),
                          {**regions, "part_names": [p.name for p in parts]})


# ---------------------------------------------------------------------------
# captions


def _legs_phrase(a: ShapeAttributes, rng) -> str:
    verb = ("in", "painted", "colored")[rng.integers(3)]
    noun = "leg" if a.leg_count == 1 else "legs"
    return f"{NUMBER_WORDS[a.leg_count]} {noun} {verb} {a.secondary_color}"


def _chair_templates(a: ShapeAttributes, rng) -> List[str]:
    legs = _legs_phrase(a, rng)
    arms_with = "with armrests" if a.armrests else "without armrests"
    arms_short = "armrests" if a.armrests else "no armrests"
    mat_noun = "wood" if a.material == "wooden" else "metal"
    p, b, m = a.primary_color, a.backrest, a.material
    armless = "an armless" if not a.armrests else "a"
    return [
        f"A {m} chair with a {p} seat, a {b} backrest and {legs}, {arms_with}.",
        f"This is {armless} {m} chair that has {legs}, a {p} seat, a {b} backrest and {arms_short}.",
        f"{legs.capitalize()} hold up the {p} seat of this {m} chair, which has a {b} backrest and {arms_short}.",
        f"{m.capitalize()} chair, {p} seat, {b} backrest, {legs}, {arms_with}.",
        f"A chair made of {mat_noun} with {legs}, a {p} seat, a {b} backrest and {arms_short}.",
    ]


def _table_templates(a: ShapeAttributes, rng) -> List[str]:
    legs = _legs_phrase(a, rng)
    mat_noun = "wood" if a.material == "wooden" else "metal"
    top = f"{a.top_shape} {a.primary_color} top"
    m = a.material
    return [
        f"A {m} table with a {top} and {legs}.",
        f"This {m} table has a {top} supported by {legs}.",
        f"{legs.capitalize()} hold up the {top} of this {m} table.",
        f"{m.capitalize()} table, {top}, {legs}.",
        f"A table made of {mat_noun} with a {top} and {legs}.",
    ]


def _templates(a: ShapeAttributes, rng) -> List[str]:
    return (_chair_templates if a.class_label == "chair" else _table_templates)(a, rng)


def caption_from_attributes(attrs: ShapeAttributes, rng: np.random.Generator) -> str:
    """One templated caption mentioning every attribute of ``attrs``."""
    templates = _templates(attrs, rng)
    return templates[rng.integers(len(templates))]


def captions_from_attributes(attrs: ShapeAttributes, k: int, rng: np.random.Generator) -> List[str]:
    """``k`` captions from distinct templates."""
    templates = _templates(attrs, rng)
    picks = rng.choice(len(templates), size=min(k, len(templates)), replace=False)
    return [templates[int(i)] for i in picks]


_NUM = {"one": 1, "three": 3, "four": 4}
_COLOR_RE = "|".join(COLORS)


def parse_caption(text: str) -> Dict[str, object]:
    """Attributes mentioned in a caption, recovered by pattern matching."""
    t = text.lower()
    found: Dict[str, object] = {}
    m = re.search(r"\b(chair|table)\b", t)
    if m:
        found["class_label"] = m.group(1)
    if re.search(r"\b(wooden|wood)\b", t):
        found["material"] = "wooden"
    elif re.search(r"\bmetal\b", t):
        found["material"] = "metal"
    m = re.search(r"\b(one|three|four) legs?\b", t)
    if m:
        found["leg_count"] = _NUM[m.group(1)]
    m = re.search(rf"\blegs? (?:in|painted|colored) ({_COLOR_RE})\b", t)
    if m:
        found["secondary_color"] = m.group(1)
    m = re.search(rf"\b({_COLOR_RE}) seat\b", t) or re.search(rf"\b(?:round|square|rectangular) ({_COLOR_RE}) top\b", t)
    if m:
        found["primary_color"] = m.group(1)
    m = re.search(r"\b(high|low) backrest\b", t)
    if m:
        found["backrest"] = m.group(1)
    m = re.search(r"\b(round|square|rectangular) (?:\w+ )?top\b", t)
    if m:
        found["top_shape"] = m.group(1)
    if re.search(r"\b(without armrests|no armrests|armless)\b", t):
        found["armrests"] = False
    elif re.search(r"\barmrests\b", t):
        found["armrests"] = True
    return found


VOCABULARY_SCAN = {
    "class_label": set(CLASSES),
    "primary_or_secondary": set(COLORS),
    "leg_count": set(_NUM),
    "material": {"wooden", "wood", "metal"},
    "backrest": set(BACKRESTS),
    "top_shape": set(TOP_SHAPES),
}


def caption_violations(text: str, attrs: ShapeAttributes) -> List[str]:
    """Attribute words in ``text`` that are not true of ``attrs`` (empty when consistent)."""
    words = re.findall(r"[a-z]+", text.lower())
    bad = []
    for w in words:
        if w in VOCABULARY_SCAN["class_label"] and w != attrs.class_label:
            bad.append(w)
        elif w in VOCABULARY_SCAN["primary_or_secondary"] and w not in (attrs.primary_color, attrs.secondary_color):
            bad.append(w)
        elif w in VOCABULARY_SCAN["leg_count"] and _NUM[w] != attrs.leg_count:
            bad.append(w)
        elif w in VOCABULARY_SCAN["material"] and ("metal" if w == "metal" else "wooden") != attrs.material:
            bad.append(w)
        elif w in VOCABULARY_SCAN["backrest"] and w != attrs.backrest:
            bad.append(w)
        elif w in VOCABULARY_SCAN["top_shape"] and w != attrs.top_shape:
            bad.append(w)
    mentioned = parse_caption(text)
    if "armrests" in mentioned and mentioned["armrests"] != attrs.armrests:
        bad.append("armrests")
    return bad


def attribute_match_score(text: str, attrs: ShapeAttributes) -> float:
    """Number of mentioned attributes that are true of ``attrs``."""
    d = attrs.to_dict()
    return float(sum(1 for k, v in parse_caption(text).items() if d.get(k) == v))


class AttributeOracle:
    """Scorer reading ground-truth attributes by ``cloud.shape_id``."""

    def __init__(self, attributes: Mapping[str, ShapeAttributes]):
        self.attributes = dict(attributes)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "AttributeOracle":
        return cls({r.shape_id: ShapeAttributes.from_dict(r.attributes)
                    for r in manifest.records if r.attributes})

    def __call__(self, cloud: ColoredPointCloud, text: str) -> float:
        try:
            attrs = self.attributes[cloud.shape_id]
        except KeyError:
            raise KeyError(f"oracle has no attributes for shape {cloud.shape_id!r}") from None
        return attribute_match_score(text, attrs)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class SyntheticConfig:
    n_chairs: int = 300
    n_tables: int = 300
    n_points: int = 2048
    captions_per_shape: int = 5
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.n_chairs < 0 or self.n_tables < 0 or self.n_chairs + self.n_tables < 1:
            raise ValueError("need at least one shape")
        self.split_fractions = tuple(float(f) for f in self.split_fractions)


def _unique_attributes(class_label: str, count: int, rng) -> List[ShapeAttributes]:
    seen, out = set(), []
    tries = 0
    while len(out) < count:
        a = sample_attributes(class_label, rng)
        tries += 1
        if a in seen:
            if tries > 200 * max(count, 1):
                raise ValueError(f"cannot draw {count} distinct {class_label} attribute sets")
            continue
        seen.add(a)
        out.append(a)
    return out


def _assign_splits(count: int, fractions, rng) -> List[str]:
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val)
    return [labels[i] for i in rng.permutation(count)]


def generate_synthetic(config: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write ``clouds/*.cpc`` and ``manifest.jsonl`` under ``out_dir``.

    Attributes and splits come from the master seed sequentially; each
    shape's geometry uses its own generator seeded by ``(seed, index)``.
    """
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(config.seed)
    records: List[ShapeRecord] = []
    index = 0
    for label, count in (("chair", config.n_chairs), ("table", config.n_tables)):
        attrs_list = _unique_attributes(label, count, master)
        splits = _assign_splits(count, config.split_fractions, master)
        for i, (attrs, split) in enumerate(zip(attrs_list, splits)):
            rng = np.random.default_rng([config.seed, index])
            sid = f"{label}_{i:05d}"
            shape = build_shape(attrs, config.n_points, rng)
            rel = f"clouds/{sid}.cpc"
            write_cloud(out_dir / rel, shape.cloud(sid))
            caps = captions_from_attributes(attrs, config.captions_per_shape, rng)
            records.append(ShapeRecord(sid, rel, label, caps, split, attrs.to_dict()))
            index += 1
    manifest = DatasetManifest(records, out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    log.info("generated %d shapes in %s", len(records), out_dir)
    return manifest
