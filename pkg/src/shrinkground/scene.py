"""Synthetic scenes, grounded queries and the multi-scale patch encoder.

Scenes are layouts of categorized, attributed boxes. Queries are generated
from a small closed grammar together with the parse the query module is
expected to recover, and the generator guarantees by brute force that exactly
one object satisfies each query.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .geometry import Box, ImageFrame, iou

CATEGORIES = ("cat", "dog", "lady", "man", "shelf", "table", "box", "ball")
COLORS = ("red", "green", "blue", "white", "orange", "black")
SIZES = ("small", "large")
ATTRIBUTES = COLORS + SIZES
LOCATIONS = ("left", "right", "top", "bottom")
SPATIAL_RELATIONS = ("left", "right", "above", "below", "inside", "bigger", "smaller")
# location word -> relation that must hold against every same-category distractor
LOCATION_RELATION = {"left": "left", "right": "right", "top": "above", "bottom": "below"}
RELATION_PHRASES = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
    "inside": ("inside",),
    "bigger": ("bigger", "than"),
    "smaller": ("smaller", "than"),
}
TEMPLATES = ("bare", "attribute", "location", "relation", "conjunction")
RELATION_TEMPLATES = ("relation", "conjunction")

SELF = "SELF"
UKN = "UKN"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    id: int
    category: str
    attributes: frozenset[str]
    box: Box

    def to_json(self) -> dict:
        return {"id": self.id, "category": self.category,
                "attributes": sorted(self.attributes), "box": self.box.to_list()}

    @classmethod
    def from_json(cls, d: dict) -> "SceneObject":
        return cls(int(d["id"]), d["category"], frozenset(d["attributes"]), Box.from_list(d["box"]))


@dataclass(frozen=True)
class Scene:
    frame: ImageFrame
    objects: tuple[SceneObject, ...]
    seed: int

    def __post_init__(self) -> None:
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")

    def object(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    @cached_property
    def box_array(self) -> np.ndarray:
        return np.array([o.box.to_list() for o in self.objects], dtype=float).reshape(-1, 4)

    def to_json(self) -> dict:
        return {"frame": [self.frame.W, self.frame.H], "seed": self.seed,
                "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(ImageFrame(*d["frame"]), tuple(SceneObject.from_json(o) for o in d["objects"]),
                   int(d["seed"]))


@dataclass(frozen=True)
class Relation:
    rel: str
    ref_category: str
    ref_attributes: tuple[str, ...] = ()


@dataclass(frozen=True)
class QueryForm:
    """Structured meaning of a generated query; text and triads are rendered from it."""

    category: str
    attributes: tuple[str, ...] = ()
    location: str | None = None
    relations: tuple[Relation, ...] = ()

    def to_json(self) -> dict:
        return {"category": self.category, "attributes": list(self.attributes),
                "location": self.location,
                "relations": [[r.rel, r.ref_category, list(r.ref_attributes)] for r in self.relations]}

    @classmethod
    def from_json(cls, d: dict) -> "QueryForm":
        rels = tuple(Relation(r, c, tuple(a)) for r, c, a in d["relations"])
        return cls(d["category"], tuple(d["attributes"]), d["location"], rels)


@dataclass(frozen=True)
class GroundedQuery:
    text: tuple[str, ...]
    target_id: int
    gold_triads: tuple[tuple[str, str, str], ...]
    kind: str = "bare"
    form: QueryForm | None = None

    @property
    def has_reference(self) -> bool:
        return self.kind in RELATION_TEMPLATES

    def to_json(self) -> dict:
        return {"text": " ".join(self.text), "target_id": self.target_id,
                "gold_triads": [list(t) for t in self.gold_triads], "kind": self.kind,
                "form": None if self.form is None else self.form.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "GroundedQuery":
        form = None if d.get("form") is None else QueryForm.from_json(d["form"])
        return cls(tuple(d["text"].split()), int(d["target_id"]),
                   tuple(tuple(t) for t in d["gold_triads"]), d.get("kind", "bare"), form)


@dataclass(frozen=True)
class GenConfig:
    frame: tuple[float, float] = (100.0, 100.0)
    min_objects: int = 2
    max_objects: int = 6
    min_side: float = 16.0
    max_side: float = 40.0
    overlap_cap: float = 0.3
    allow_heavy_overlap: bool = False
    templates: tuple[str, ...] = TEMPLATES
    template_weights: tuple[float, ...] | None = None
    categories: tuple[str, ...] = CATEGORIES
    colors: tuple[str, ...] = COLORS
    relations: tuple[str, ...] = ("left", "right", "above", "below", "bigger", "smaller")
    small_area: float = 784.0  # below this the object is tagged "small", else "large"
    margin: float = 1.0
    max_retries: int = 200

    def __post_init__(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object-count range is empty")
        if self.min_objects < 2 and any(t != "bare" for t in self.templates):
            raise ValueError("discriminative templates need at least two objects")
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown:
            raise ValueError(f"unknown templates {sorted(unknown)}")
        if self.template_weights is not None and len(self.template_weights) != len(self.templates):
            raise ValueError("template_weights must align with templates")


def relation_holds(a: SceneObject, b: SceneObject, rel: str, margin: float = 1.0) -> bool:
    """Whether ``a rel b`` holds; attribute tokens test ``a`` alone."""
    if rel in ATTRIBUTES:
        return rel in a.attributes
    ax, ay = a.box.center
    bx, by = b.box.center
    if rel == "left":
        return ax < bx - margin
    if rel == "right":
        return ax > bx + margin
    if rel == "above":
        return ay < by - margin
    if rel == "below":
        return ay > by + margin
    if rel == "inside":
        return b.box.contains(a.box) and a.id != b.id
    if rel == "bigger":
        return a.box.area > b.box.area + margin
    if rel == "smaller":
        return a.box.area < b.box.area - margin
    raise ValueError(f"unknown relation token {rel!r}")


def _matches_ref(o: SceneObject, category: str, attributes: Sequence[str]) -> bool:
    return o.category == category and all(a in o.attributes for a in attributes)


def satisfies(scene: Scene, obj: SceneObject, form: QueryForm, margin: float = 1.0) -> bool:
    if not _matches_ref(obj, form.category, form.attributes):
        return False
    if form.location is not None:
        rel = LOCATION_RELATION[form.location]
        others = [o for o in scene.objects if o.id != obj.id and o.category == obj.category]
        if not all(relation_holds(obj, o, rel, margin) for o in others):
            return False
    for r in form.relations:
        if not any(o.id != obj.id and _matches_ref(o, r.ref_category, r.ref_attributes)
                   and relation_holds(obj, o, r.rel, margin) for o in scene.objects):
            return False
    return True


def referents(scene: Scene, form: QueryForm, margin: float = 1.0) -> list[int]:
    """Brute-force list of object ids satisfying ``form``."""
    return [o.id for o in scene.objects if satisfies(scene, o, form, margin)]


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def render_text(form: QueryForm) -> tuple[str, ...]:
    words: list[str] = []
    if form.location:
        words.append(form.location)
    words.extend(form.attributes)
    words.append(form.category)
    for i, r in enumerate(form.relations):
        if i:
            words.append("and")
        words.extend(RELATION_PHRASES[r.rel])
        np_words = [*r.ref_attributes, r.ref_category]
        words.append(_article(np_words[0]))
        words.extend(np_words)
    return tuple(words)


def render_triads(form: QueryForm) -> tuple[tuple[str, str, str], ...]:
    c = form.category
    triads: list[tuple[str, str, str]] = []
    if form.location:
        triads.append((c, c, form.location))
    triads.extend((c, c, a) for a in form.attributes)
    for r in form.relations:
        triads.append((c, r.ref_category, r.rel))
        triads.extend((r.ref_category, r.ref_category, a) for a in r.ref_attributes)
    if not triads:
        triads.append((c, c, SELF))
    return tuple(triads)


def _sample_objects(rng: np.random.Generator, cfg: GenConfig, n: int,
                    categories: Sequence[str]) -> list[SceneObject] | None:
    W, H = cfg.frame
    objs: list[SceneObject] = []
    for cat in categories[:n]:
        for _ in range(50):
            w = rng.uniform(cfg.min_side, cfg.max_side)
            h = rng.uniform(cfg.min_side, cfg.max_side)
            x = rng.uniform(0.0, W - w)
            y = rng.uniform(0.0, H - h)
            box = Box(x, y, x + w, y + h)
            if cfg.allow_heavy_overlap or all(iou(box, o.box) <= cfg.overlap_cap for o in objs):
                break
        else:
            return None
        color = cfg.colors[rng.integers(len(cfg.colors))]
        size = "small" if box.area < cfg.small_area else "large"
        objs.append(SceneObject(len(objs), cat, frozenset((color, size)), box))
    return objs


def _candidate_forms(scene: Scene, target: SceneObject, template: str,
                     cfg: GenConfig) -> list[QueryForm]:
    c = target.category
    if template == "bare":
        return [QueryForm(c)]
    if template == "attribute":
        return [QueryForm(c, (a,)) for a in sorted(target.attributes)]
    if template == "location":
        return [QueryForm(c, location=loc) for loc in LOCATIONS]
    rels = []
    for o in scene.objects:
        if o.id == target.id or o.category == c:
            continue
        for rel in cfg.relations:
            if relation_holds(target, o, rel, cfg.margin):
                rels.append(Relation(rel, o.category))
    if template == "relation":
        return [QueryForm(c, relations=(r,)) for r in rels]
    # conjunction: two relations, or an attribute plus a relation
    forms = [QueryForm(c, (a,), relations=(r,)) for a in sorted(target.attributes) for r in rels]
    forms += [QueryForm(c, relations=(r1, r2)) for i, r1 in enumerate(rels) for r2 in rels[i + 1:]
              if r1.rel != r2.rel]
    return forms


def generate_scene(seed: int, cfg: GenConfig = GenConfig()) -> tuple[Scene, GroundedQuery]:
    """Sample a scene and a query that uniquely identifies one of its objects.

    Discriminative templates always place a same-category distractor, so the
    query cannot be answered by category alone. Raises GenerationError after
    ``cfg.max_retries`` failed attempts.
    """
    rng = np.random.default_rng(seed)
    frame = ImageFrame(*cfg.frame)
    weights = None
    if cfg.template_weights is not None:
        weights = np.asarray(cfg.template_weights, dtype=float)
        weights = weights / weights.sum()
    for _ in range(cfg.max_retries):
        template = cfg.templates[rng.choice(len(cfg.templates), p=weights)]
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        if template in RELATION_TEMPLATES and n < 3:
            n = 3 if cfg.max_objects >= 3 else n
        cats = [cfg.categories[i] for i in rng.permutation(len(cfg.categories))]
        if template == "bare":
            layout = [cats[i % len(cats)] for i in range(n)]
        elif template in RELATION_TEMPLATES and n == 2:
            # no room for a distractor: target plus reference only
            layout = [cats[0], cats[1]]
        else:
            # target and distractor share category 0; the rest are drawn with replacement
            layout = [cats[0], cats[0]]
            pool = cats[1:]
            layout += [pool[rng.integers(len(pool))] for _ in range(n - 2)]
            if template in RELATION_TEMPLATES and n >= 3:
                layout[2] = pool[0]
        objs = _sample_objects(rng, cfg, n, layout)
        if objs is None:
            continue
        scene = Scene(frame, tuple(objs), seed)
        target = objs[0] if template != "bare" else objs[int(rng.integers(n))]
        forms = _candidate_forms(scene, target, template, cfg)
        forms = [f for f in forms if referents(scene, f, cfg.margin) == [target.id]]
        if not forms:
            continue
        form = forms[int(rng.integers(len(forms)))]
        query = GroundedQuery(render_text(form), target.id, render_triads(form), template, form)
        return scene, query
    raise GenerationError(f"could not generate a uniquely grounded query for seed {seed}")


@dataclass(frozen=True)
class EncoderConfig:
    grid_sizes: tuple[int, int, int] = (8, 4, 2)
    object_dim: int = 16
    visual_dim: int = 64
    seed: int = 1


class PatchEncoder:
    """Overlap-weighted object-embedding grids followed by a fixed random projection.

    Each cell of a ``G x G`` partition of the patch holds the sum of object
    embeddings weighted by the fraction of the cell the object covers. The
    flattened grid is projected to ``visual_dim`` with a seeded Gaussian matrix.
    The map is linear in the set of objects.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(),
                 categories: Sequence[str] = CATEGORIES, attributes: Sequence[str] = ATTRIBUTES):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.object_dim
        self.token_index = {t: i for i, t in enumerate([*categories, *attributes])}
        self.token_embedding = rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(self.token_index), d))
        self.projections = [
            rng.normal(0.0, 1.0 / g, size=(g * g * d, cfg.visual_dim)) for g in cfg.grid_sizes
        ]
        self._cached_scene: Scene | None = None
        self._cached_matrix: np.ndarray | None = None

    def object_embedding(self, obj: SceneObject) -> np.ndarray:
        idx = [self.token_index[obj.category]] + [self.token_index[a] for a in sorted(obj.attributes)]
        return self.token_embedding[idx].sum(axis=0)

    def object_matrix(self, scene: Scene) -> np.ndarray:
        if self._cached_scene is not scene:
            mat = np.array([self.object_embedding(o) for o in scene.objects]).reshape(
                -1, self.cfg.object_dim)
            self._cached_scene, self._cached_matrix = scene, mat
        return self._cached_matrix

    def grid(self, scene: Scene, p: Box, scale: int) -> np.ndarray:
        """Raw ``G x G x object_dim`` descriptor grid for scale 1, 2 or 3."""
        if scale not in (1, 2, 3):
            raise ValueError(f"scale must be 1, 2 or 3, got {scale}")
        if not scene.frame.contains(p):
            raise ValueError(f"patch {p.to_list()} lies outside the frame")
        g = self.cfg.grid_sizes[scale - 1]
        boxes = scene.box_array
        emb = self.object_matrix(scene)
        if len(boxes) == 0:
            return np.zeros((g, g, self.cfg.object_dim))
        xs = np.linspace(p.x_tl, p.x_br, g + 1)
        ys = np.linspace(p.y_tl, p.y_br, g + 1)
        ox = np.minimum(boxes[:, 2:3], xs[None, 1:]) - np.maximum(boxes[:, 0:1], xs[None, :-1])
        oy = np.minimum(boxes[:, 3:4], ys[None, 1:]) - np.maximum(boxes[:, 1:2], ys[None, :-1])
        np.maximum(ox, 0.0, out=ox)
        np.maximum(oy, 0.0, out=oy)
        cell_area = (p.w / g) * (p.h / g)
        weights = oy[:, :, None] * ox[:, None, :] / cell_area  # (n, rows, cols)
        return np.einsum("nij,nd->ijd", weights, emb)

    def encode(self, scene: Scene, p: Box, scale: int) -> np.ndarray:
        return self.grid(scene, p, scale).reshape(-1) @ self.projections[scale - 1]

    def encode_all(self, scene: Scene, p: Box) -> list[np.ndarray]:
        return [self.encode(scene, p, c) for c in (1, 2, 3)]


def encode_patch(scene: Scene, p: Box, scale: int, encoder: PatchEncoder) -> np.ndarray:
    return encoder.encode(scene, p, scale)
