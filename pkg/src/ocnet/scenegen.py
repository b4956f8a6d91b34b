"""Procedural multi-object scenes rendered under two perturbed views.

Each object is a coloured glyph (one of twelve shapes) on a noisy
background.  A scene holds 2..20 objects; every object is rendered once per
view with independently drawn scale, lighting, translation and pixel noise.
All randomness for a scene is keyed by ``(seed, scene_id)`` so scenes can be
produced in any order and still give byte-identical datasets.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, ShapeError
from .seeding import child_seed, substream

GLYPHS = (
    "circle", "square", "triangle", "cross", "ring", "bar",
    "L", "T", "diamond", "star", "U", "H",
)

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],  # red
        [0.10, 0.75, 0.15],  # green
        [0.15, 0.25, 0.90],  # blue
        [0.90, 0.85, 0.10],  # yellow
        [0.80, 0.10, 0.80],  # magenta
        [0.10, 0.80, 0.80],  # cyan
        [0.95, 0.55, 0.10],  # orange
        [0.90, 0.90, 0.90],  # white
    ]
)

# category -> binary attributes; every column is true for exactly 6 of 12
# categories so each attribute is balanced under uniform category sampling.
ATTRIBUTE_TABLE = np.zeros((12, 4), dtype=bool)
for _col, _cats in enumerate(
    [(0, 3, 4, 7, 10, 11), (0, 1, 4, 5, 8, 9), (1, 2, 3, 6, 8, 10), (2, 5, 6, 7, 9, 11)]
):
    ATTRIBUTE_TABLE[list(_cats), _col] = True

SPLITS = ("train", "val", "test")
MAX_OBJECTS = 20


@dataclass(frozen=True)
class GenConfig:
    num_scenes: int = 2000
    split_fractions: tuple = (0.8, 0.1, 0.1)
    min_objects: int = 2
    max_objects: int = MAX_OBJECTS
    num_categories: int = 12
    num_colors: int = 8
    patch_size: int = 16
    num_binary_attrs: int = 4
    background_max: float = 0.35
    noise_sigma_max: float = 0.05

    def validate(self):
        if self.num_scenes < 1:
            raise ConfigError(f"num_scenes must be >= 1, got {self.num_scenes}")
        if not 2 <= self.num_categories <= len(GLYPHS):
            raise ConfigError(f"num_categories must be in [2, {len(GLYPHS)}]")
        if not 1 <= self.num_colors <= len(PALETTE):
            raise ConfigError(f"num_colors must be in [1, {len(PALETTE)}]")
        if self.patch_size < 4:
            raise ConfigError(f"patch_size must be >= 4, got {self.patch_size}")
        if not 0 <= self.num_binary_attrs <= ATTRIBUTE_TABLE.shape[1]:
            raise ConfigError("num_binary_attrs out of range")
        if not 2 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ConfigError("object counts must satisfy 2 <= min <= max <= 20")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three non-negative values summing to 1")
        if not 0 <= self.background_max <= 1 or self.noise_sigma_max < 0:
            raise ConfigError("background_max must be in [0,1] and noise_sigma_max >= 0")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown generation config keys: {unknown}")
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d).validate()

    def split_counts(self):
        n = self.num_scenes
        n_val = int(np.floor(n * self.split_fractions[1] + 1e-9))
        n_test = int(np.floor(n * self.split_fractions[2] + 1e-9))
        return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    category: int
    color: int
    binary_attrs: tuple
    base_scale: float


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    objects: tuple
    rng_seed: int


@dataclass(frozen=True)
class ViewParams:
    scale_jitter: float = 1.0
    gain: float = 1.0
    noise_sigma: float = 0.0
    translation: tuple = (0, 0)

    @classmethod
    def draw(cls, rng, noise_sigma_max=0.05):
        return cls(
            scale_jitter=float(np.exp(rng.uniform(np.log(0.8), np.log(1.25)))),
            gain=float(rng.uniform(0.7, 1.3)),
            noise_sigma=float(rng.uniform(0.0, noise_sigma_max)),
            translation=(int(rng.integers(-2, 3)), int(rng.integers(-2, 3))),
        )


@dataclass
class Patch:
    pixels: np.ndarray  # (P, P, 3)
    object_id: int
    view_index: int


@dataclass
class Frame:
    """Flattened object crops observed together in one view."""

    pixels: np.ndarray  # (n, 3*P*P), channel-major like the patch store
    object_ids: np.ndarray
    categories: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return len(self.object_ids)

    def subset(self, keep):
        return Frame(self.pixels[keep], self.object_ids[keep], self.categories[keep], self.colors[keep])


@dataclass
class PairBatch:
    first: Frame
    second: Frame


@dataclass
class Sequence:
    """An ordered run of frames over one fixed set of objects."""

    objects: tuple
    frames: list


def _glyph_mask(category, u, v):
    """Boolean silhouette of glyph ``category`` on normalised coords (v points down)."""
    au, av = np.abs(u), np.abs(v)
    r2 = u * u + v * v
    name = GLYPHS[category]
    if name == "circle":
        return r2 <= 0.6**2
    if name == "square":
        return (au <= 0.7) & (av <= 0.7)
    if name == "triangle":
        return (v >= -0.8) & (v <= 0.75) & (au <= 0.55 * (v + 0.8))
    if name == "cross":
        return ((au <= 0.25) & (av <= 0.9)) | ((av <= 0.25) & (au <= 0.9))
    if name == "ring":
        return (r2 <= 0.9**2) & (r2 >= 0.5**2)
    if name == "bar":
        return (au <= 0.9) & (av <= 0.3)
    if name == "L":
        return ((u >= -0.7) & (u <= -0.2) & (av <= 0.85)) | (
            (u >= -0.7) & (u <= 0.75) & (v >= 0.35) & (v <= 0.85)
        )
    if name == "T":
        return ((v >= -0.85) & (v <= -0.35) & (au <= 0.85)) | ((au <= 0.25) & (av <= 0.85))
    if name == "diamond":
        return au + av <= 0.95
    if name == "star":
        theta = np.arctan2(u, -v)
        sector = 2 * np.pi / 5
        t = np.abs(2 * ((theta % sector) / sector) - 1)
        return np.sqrt(r2) <= 0.35 + 0.6 * t
    if name == "U":
        return ((au >= 0.3) & (au <= 0.8) & (av <= 0.85)) | ((au <= 0.8) & (v >= 0.3) & (v <= 0.85))
    if name == "H":
        return ((au >= 0.3) & (au <= 0.8) & (av <= 0.85)) | ((au <= 0.8) & (av <= 0.2))
    raise ConfigError(f"unknown category {category}")


def render_object(spec, view, seed, patch_size=16, background_max=0.35):
    """Render one object under ``view``; returns a :class:`Patch` with (P, P, 3) pixels."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))
    p = patch_size
    background = rng.uniform(0.0, background_max, size=(p, p, 3))
    noise = rng.standard_normal((p, p, 3))

    scale = spec.base_scale * view.scale_jitter * p / 2
    centers = np.arange(p) + 0.5 - p / 2
    ty, tx = view.translation
    v = ((centers - ty) / scale)[:, None]
    u = ((centers - tx) / scale)[None, :]
    mask = _glyph_mask(spec.category, u, v)

    fg = PALETTE[spec.color] * view.gain
    pixels = np.where(mask[:, :, None], fg, background)
    if view.noise_sigma > 0:
        pixels = pixels + view.noise_sigma * noise
    pixels = np.clip(pixels, 0.0, 1.0)
    return Patch(pixels=pixels, object_id=spec.object_id, view_index=-1)


def _draw_objects(rng, config, count):
    n_combo = config.num_categories * config.num_colors
    if count <= n_combo:
        combos = rng.choice(n_combo, size=count, replace=False)
    else:
        combos = rng.integers(0, n_combo, size=count)
    objects = []
    for combo in combos:
        cat, col = divmod(int(combo), config.num_colors)
        attrs = tuple(bool(a) for a in ATTRIBUTE_TABLE[cat, : config.num_binary_attrs])
        objects.append((cat, col, attrs, float(rng.uniform(0.5, 1.0))))
    return objects


def _render_views(objects, rng, config, num_views):
    """Pixels of shape (num_views, n_objects, 3, P, P) in float32."""
    p = config.patch_size
    out = np.empty((num_views, len(objects), 3, p, p), dtype=np.float32)
    for k, obj in enumerate(objects):
        for view in range(num_views):
            params = ViewParams.draw(rng, config.noise_sigma_max)
            patch = render_object(obj, params, child_seed(rng), p, config.background_max)
            out[view, k] = patch.pixels.transpose(2, 0, 1)
    return out


def _generate_scene(config, seed, scene_id):
    """Scene objects (without global ids) and their two-view rendering."""
    rng = substream(seed, "scene", scene_id)
    rng_seed = child_seed(rng)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    drawn = _draw_objects(rng, config, count)
    specs = [ObjectSpec(-1, c, col, a, s) for c, col, a, s in drawn]
    return rng_seed, specs, _render_views(specs, rng, config, 2)


@dataclass
class Dataset:
    config: GenConfig
    seed: int
    splits: dict  # split name -> list[SceneSpec]
    patches: np.ndarray  # (n, 3, P, P) float32
    object_id: np.ndarray
    scene_id: np.ndarray
    view: np.ndarray
    category: np.ndarray
    color: np.ndarray
    binary_attrs: np.ndarray  # (n, B) uint8
    split: np.ndarray  # (n,) str
    _scene_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._scene_index = {s.scene_id: s for scenes in self.splits.values() for s in scenes}
        order = np.lexsort((self.view, self.object_id, self.scene_id))
        self._rows = {}
        for idx in order:
            self._rows.setdefault((int(self.scene_id[idx]), int(self.view[idx])), []).append(int(idx))

    def __len__(self):
        return len(self.object_id)

    @property
    def patch_size(self):
        return self.patches.shape[-1]

    @property
    def input_dim(self):
        return int(np.prod(self.patches.shape[1:]))

    def scene(self, scene_id):
        try:
            return self._scene_index[int(scene_id)]
        except KeyError:
            raise LookupError(f"unknown scene_id {scene_id}") from None

    def scene_ids(self, split="train"):
        return [s.scene_id for s in self.splits[split]]

    def rows(self, scene_id, view):
        self.scene(scene_id)
        return np.asarray(self._rows.get((int(scene_id), int(view)), []), dtype=np.int64)

    def frame(self, scene_id, view):
        rows = self.rows(scene_id, view)
        return Frame(
            self.patches[rows].reshape(len(rows), -1),
            self.object_id[rows],
            self.category[rows],
            self.color[rows],
        )

    def split_rows(self, split):
        return np.flatnonzero(self.split == split)

    def attribute_labels(self, attribute):
        """Integer labels for ``category``, ``color`` or ``attr<k>``, and the number of values."""
        if attribute == "category":
            return self.category, self.config.num_categories
        if attribute == "color":
            return self.color, self.config.num_colors
        if attribute.startswith("attr") and attribute[4:].isdigit():
            k = int(attribute[4:])
            if k < self.binary_attrs.shape[1]:
                return self.binary_attrs[:, k].astype(np.int64), 2
        raise ConfigError(f"unknown attribute {attribute!r}")

    def attribute_names(self):
        return ["category", "color"] + [f"attr{k}" for k in range(self.binary_attrs.shape[1])]

    def manifest_records(self):
        patch_bytes = self.input_dim * 4
        for i in range(len(self)):
            yield {
                "index": i,
                "offset_bytes": i * patch_bytes,
                "object_id": int(self.object_id[i]),
                "scene_id": int(self.scene_id[i]),
                "view": int(self.view[i]),
                "category": int(self.category[i]),
                "color": int(self.color[i]),
                "binary_attrs": [int(b) for b in self.binary_attrs[i]],
                "split": str(self.split[i]),
            }


def generate_dataset(config, seed):
    """Generate every scene of ``config`` and its two-view patch store."""
    config.validate()
    counts = config.split_counts()
    split_of = []
    for name in SPLITS:
        split_of += [name] * counts[name]

    splits = {name: [] for name in SPLITS}
    blocks, cols = [], {k: [] for k in ("object_id", "scene_id", "view", "category", "color", "attrs", "split")}
    next_id = 0
    for scene_id in range(config.num_scenes):
        rng_seed, specs, pixels = _generate_scene(config, seed, scene_id)
        specs = [dataclasses.replace(s, object_id=next_id + k) for k, s in enumerate(specs)]
        next_id += len(specs)
        splits[split_of[scene_id]].append(SceneSpec(scene_id, tuple(specs), rng_seed))
        for k, spec in enumerate(specs):
            for view in (0, 1):
                blocks.append(pixels[view, k])
                cols["object_id"].append(spec.object_id)
                cols["scene_id"].append(scene_id)
                cols["view"].append(view)
                cols["category"].append(spec.category)
                cols["color"].append(spec.color)
                cols["attrs"].append(spec.binary_attrs)
                cols["split"].append(split_of[scene_id])

    return Dataset(
        config=config,
        seed=int(seed),
        splits=splits,
        patches=np.stack(blocks).astype(np.float32),
        object_id=np.asarray(cols["object_id"], dtype=np.int64),
        scene_id=np.asarray(cols["scene_id"], dtype=np.int64),
        view=np.asarray(cols["view"], dtype=np.int64),
        category=np.asarray(cols["category"], dtype=np.int64),
        color=np.asarray(cols["color"], dtype=np.int64),
        binary_attrs=np.asarray(cols["attrs"], dtype=np.uint8).reshape(len(blocks), config.num_binary_attrs),
        split=np.asarray(cols["split"]),
    )


def dropout_mask(n, p_occ, rng, min_survivors=2):
    """Keep each of ``n`` objects with probability ``1 - p_occ``; at least ``min_survivors`` stay."""
    if not 0.0 <= p_occ < 1.0:
        raise ConfigError(f"p_occ must be in [0, 1), got {p_occ}")
    keep = rng.random(n) >= p_occ
    short = min(min_survivors, n) - int(keep.sum())
    if short > 0:
        dropped = np.flatnonzero(~keep)
        keep[rng.choice(dropped, size=short, replace=False)] = True
    return keep


def sample_frame_pair(dataset, scene_id, seed, p_occ=0.1):
    """Both views of one scene, each with independent per-object dropout."""
    first, second = dataset.frame(scene_id, 0), dataset.frame(scene_id, 1)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))
    if p_occ == 0:
        return PairBatch(first, second)
    return PairBatch(
        first.subset(dropout_mask(len(first), p_occ, rng)),
        second.subset(dropout_mask(len(second), p_occ, rng)),
    )


def generate_sequence(config, seed, num_objects=20, num_frames=300, p_occ=0.1):
    """A "video" of one scene: every frame re-renders the objects with fresh view parameters."""
    config.validate()
    if not 2 <= num_objects <= MAX_OBJECTS:
        raise ConfigError("num_objects must be in [2, 20]")
    if num_frames < 2:
        raise ConfigError("num_frames must be >= 2")
    rng = substream(seed, "sequence")
    drawn = _draw_objects(rng, config, num_objects)
    objects = tuple(ObjectSpec(k, c, col, a, s) for k, (c, col, a, s) in enumerate(drawn))
    ids = np.arange(num_objects, dtype=np.int64)
    cats = np.array([o.category for o in objects], dtype=np.int64)
    cols = np.array([o.color for o in objects], dtype=np.int64)
    frames = []
    for t in range(num_frames):
        frng = substream(seed, "frame", t)
        pixels = _render_views(objects, frng, config, 1)[0].reshape(num_objects, -1)
        keep = dropout_mask(num_objects, p_occ, frng)
        frames.append(Frame(pixels[keep], ids[keep], cats[keep], cols[keep]))
    return Sequence(objects, frames)


# -- persistence ------------------------------------------------------------

def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_dataset(dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "patches.bin", dataset.patches.astype("<f4").tobytes(order="C"))
    lines = "".join(json.dumps(r) + "\n" for r in dataset.manifest_records())
    _atomic_write(out / "manifest.jsonl", lines.encode("utf-8"))
    meta = {"seed": dataset.seed, "config": dataset.config.to_dict()}
    _atomic_write(out / "gen_config.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    scenes = {
        name: [
            {
                "scene_id": s.scene_id,
                "rng_seed": s.rng_seed,
                "objects": [dataclasses.asdict(o) for o in s.objects],
            }
            for s in dataset.splits[name]
        ]
        for name in SPLITS
    }
    _atomic_write(out / "scenes.json", (json.dumps(scenes) + "\n").encode())


def load_dataset(path):
    root = Path(path)
    try:
        meta = json.loads((root / "gen_config.json").read_text())
        scene_doc = json.loads((root / "scenes.json").read_text())
        manifest = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line]
        raw = (root / "patches.bin").read_bytes()
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"unreadable dataset metadata in {root}: {exc}") from exc
    config = GenConfig.from_dict(meta["config"])
    p = config.patch_size
    patch_bytes = 3 * p * p * 4
    if len(raw) != patch_bytes * len(manifest):
        raise CorruptFileError(
            f"patches.bin holds {len(raw)} bytes, manifest expects {patch_bytes * len(manifest)}"
        )
    for i, rec in enumerate(manifest):
        if rec["index"] != i or rec["offset_bytes"] != i * patch_bytes:
            raise CorruptFileError(f"manifest record {i} has an invalid offset")
    patches = np.frombuffer(raw, dtype="<f4").reshape(len(manifest), 3, p, p).astype(np.float32)
    splits = {
        name: [
            SceneSpec(
                s["scene_id"],
                tuple(ObjectSpec(**{**o, "binary_attrs": tuple(o["binary_attrs"])}) for o in s["objects"]),
                s["rng_seed"],
            )
            for s in scene_doc[name]
        ]
        for name in SPLITS
    }
    b = config.num_binary_attrs
    return Dataset(
        config=config,
        seed=int(meta["seed"]),
        splits=splits,
        patches=patches,
        object_id=np.array([r["object_id"] for r in manifest], dtype=np.int64),
        scene_id=np.array([r["scene_id"] for r in manifest], dtype=np.int64),
        view=np.array([r["view"] for r in manifest], dtype=np.int64),
        category=np.array([r["category"] for r in manifest], dtype=np.int64),
        color=np.array([r["color"] for r in manifest], dtype=np.int64),
        binary_attrs=np.array([r["binary_attrs"] for r in manifest], dtype=np.uint8).reshape(len(manifest), b),
        split=np.array([r["split"] for r in manifest]),
    )


def check_input_dim(dataset, net):
    if dataset.input_dim != net.dims[0]:
        raise ShapeError(f"network expects inputs of size {net.dims[0]}, dataset patches have {dataset.input_dim}")
