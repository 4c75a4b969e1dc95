"""File formats (JSON scene descriptors, PGM masks, OBJ meshes, CSV tables)
and synthetic dataset generation.

A generated dataset looks like::

    out/manifest.json
    out/scene_0000/{scene.json, shadow.pgm, shadow.valid.pgm, seg.pgm, gt.obj}

Floats are written with ``repr`` so every scalar reads back bit-exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateScene, EmptyLevelSet, ParseError, SchemaVersionMismatch
from .generator import CATEGORIES, GeneratorSpec, decode, sample_latent
from .geometry import CameraModel, Plane, PoseSE3, spherical_to_cartesian
from .occfield import BOX, KIND_CODES, KIND_NAMES, Mesh, Primitive, ShapeSpec, extract_mesh
from .shadow import (
    DEFAULT_SAMPLES,
    LIGHT_RADIUS,
    LightSource,
    Scene,
    ShadowImage,
    render_segmentation,
    render_shadow,
)

SCHEMA_VERSION = 1
CAMERA_RADIUS = 2.0
MAX_ATTEMPTS = 10
SCENE_FILES = {
    "shadow": "shadow.pgm",
    "valid": "shadow.valid.pgm",
    "segmentation": "seg.pgm",
    "mesh": "gt.obj",
}


# --------------------------------------------------------------------------- PGM

def write_pgm(path, image) -> None:
    """Write an ``(H, W)`` array as binary PGM (P5, maxval 255).

    Boolean arrays map to 0/255; floats in [0, 1] are scaled and rounded.
    """
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError("PGM images must be two-dimensional")
    if a.dtype == bool:
        data = a.astype(np.uint8) * 255
    elif np.issubdtype(a.dtype, np.integer):
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise ValueError("integer PGM values must lie in [0, 255]")
        data = a.astype(np.uint8)
    else:
        if np.any(~np.isfinite(a)) or a.min(initial=0) < 0 or a.max(initial=0) > 1:
            raise ValueError("float PGM values must lie in [0, 1]")
        data = np.rint(a * 255.0).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError(f"unexpected end of PGM header at byte {pos}", pos)
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode P5 bytes into a ``uint8`` array of shape ``(H, W)``."""
    if buf[:2] != b"P5":
        raise ParseError("not a binary PGM: missing P5 magic at byte 0", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, end = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad PGM {name} {tok!r} at byte {end - len(tok)}", end - len(tok))
        fields.append(int(tok))
        pos = end
    W, H, maxval = fields
    if W < 1 or H < 1 or not 1 <= maxval <= 255:
        raise ParseError(f"unsupported PGM geometry {W}x{H} maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError(f"missing whitespace after PGM header at byte {pos}", pos)
    pos += 1
    need = W * H
    have = len(buf) - pos
    if have < need:
        raise ParseError(f"truncated PGM: pixel data ends at byte {len(buf)}, expected {pos + need}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(H, W).copy()
    if maxval != 255:
        if data.max(initial=0) > maxval:
            raise ParseError("PGM sample exceeds maxval", pos)
        data = np.rint(data.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return data


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def valid_path(path) -> Path:
    """``x/shadow.pgm`` -> ``x/shadow.valid.pgm``."""
    p = Path(path)
    stem = p.name[:-4] if p.name.endswith(".pgm") else p.name
    return p.with_name(stem + ".valid.pgm")


def write_shadow(path, image: ShadowImage) -> None:
    """Shadow values plus the ``.valid.pgm`` companion mask."""
    write_pgm(path, image.values)
    write_pgm(valid_path(path), image.valid)


def read_shadow(path) -> ShadowImage:
    values = read_pgm(path)
    vpath = valid_path(path)
    valid = read_pgm(vpath) > 127 if vpath.exists() else np.ones(values.shape, dtype=bool)
    if valid.shape != values.shape:
        raise ParseError("shadow and validity masks differ in size")
    return ShadowImage(values.astype(np.float64) / 255.0, valid)


# --------------------------------------------------------------------------- OBJ

def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(mesh.vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(mesh.faces).tolist()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(t) for t in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError
                elif parts[0] == "f":
                    idx = [int(t.split("/")[0]) for t in parts[1:]]
                    if len(idx) != 3 or min(idx) < 1:
                        raise ValueError
                    faces.append([i - 1 for i in idx])
            except ValueError:
                raise ParseError(f"malformed OBJ record on line {lineno}: {line.strip()!r}", lineno) from None
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        raise ParseError("OBJ face references a missing vertex")
    return Mesh(v, f)


# --------------------------------------------------------------------------- CSV

RESULT_COLUMNS = ("method", "category", "scene", "iou")
LOSS_COLUMNS = ("restart", "step", "loss")


def write_results_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["category"], r["scene"], repr(float(r["iou"]))])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != RESULT_COLUMNS:
            raise ParseError(f"unexpected CSV header {header}", 1)
        out = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != 4:
                raise ParseError(f"expected 4 columns on line {lineno}", lineno)
            try:
                out.append({"method": row[0], "category": row[1], "scene": row[2], "iou": float(row[3])})
            except ValueError:
                raise ParseError(f"bad IoU value on line {lineno}", lineno) from None
        return out


def write_losses_csv(path, losses_by_restart: dict[int, Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for restart in sorted(losses_by_restart):
            for step, loss in enumerate(losses_by_restart[restart], 1):
                w.writerow([restart, step, repr(float(loss))])


# --------------------------------------------------------------------------- JSON

def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def shape_to_dict(shape: ShapeSpec) -> dict:
    return {
        "kinds": [KIND_NAMES[int(k)] for k in shape.kinds],
        "centers": _floats(shape.centers),
        "half_extents": _floats(shape.half_extents),
        "exponents": _floats(shape.exponents),
        "sharpness": float(shape.sharpness),
    }


def shape_from_dict(d: dict) -> ShapeSpec:
    return ShapeSpec([KIND_CODES[k] for k in d["kinds"]], np.array(d["centers"], dtype=np.float64),
                     np.array(d["half_extents"], dtype=np.float64), np.array(d["exponents"], dtype=np.float64),
                     float(d["sharpness"]))


@dataclass
class SceneDescriptor:
    """Everything needed to re-render or reconstruct one scene."""

    camera: dict
    light: list
    pose: dict
    generator: dict
    latent: list | None = None
    shape: dict | None = None
    plane: dict = field(default_factory=lambda: {"normal": [0.0, 0.0, 1.0], "point": [0.0, 0.0, 0.0]})
    files: dict = field(default_factory=lambda: dict(SCENE_FILES))
    ray_samples: int = DEFAULT_SAMPLES
    category: str = ""
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def build(cls, *, eye, focal: float, light, pose: PoseSE3, gen: GeneratorSpec, latent=None,
              shape: ShapeSpec | None = None, width: int = 128, height: int = 128, target=(0.0, 0.0, 0.0),
              up=(0.0, 0.0, 1.0), ray_samples: int = DEFAULT_SAMPLES, category: str = "") -> "SceneDescriptor":
        camera = {
            "focal": float(focal), "cu": width / 2, "cv": height / 2,
            "position": _floats(eye), "look_at": _floats(target), "up": _floats(up),
            "width": int(width), "height": int(height),
        }
        return cls(
            camera=camera,
            light=_floats(light),
            pose={"translation": _floats(pose.translation), "quaternion": _floats(pose.quaternion)},
            generator=gen.to_dict(),
            latent=None if latent is None else _floats(latent),
            shape=None if shape is None else shape_to_dict(shape),
            ray_samples=int(ray_samples),
            category=category or gen.category,
        )

    def camera_model(self) -> CameraModel:
        c = self.camera
        return CameraModel.look_at(c["position"], c["look_at"], c["up"], focal=c["focal"], width=c["width"],
                                   height=c["height"], cu=c["cu"], cv=c["cv"])

    def pose_se3(self) -> PoseSE3:
        return PoseSE3(self.pose["translation"], self.pose["quaternion"])

    def to_scene(self) -> Scene:
        return Scene(self.camera_model(), LightSource(self.light), self.pose_se3(),
                     Plane(self.plane["normal"], self.plane["point"]), self.ray_samples)

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec.from_dict(self.generator)

    def truth_shape(self) -> ShapeSpec | None:
        """Canonical ground-truth shape: explicit primitives, else the decoded latent."""
        if self.shape is not None:
            return shape_from_dict(self.shape)
        if self.latent is not None:
            return decode(self.generator_spec(), np.array(self.latent))
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDescriptor":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(f"scene schema version {version!r}, expected {SCHEMA_VERSION}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParseError(f"bad scene descriptor: {exc}") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, SceneDescriptor) and self.to_dict() == other.to_dict()


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_scene(path, desc: SceneDescriptor) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_json(desc.to_dict()))


def read_scene(path, check_files: bool = True) -> SceneDescriptor:
    path = Path(path)
    text = path.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} at line {exc.lineno}", exc.lineno) from None
    if not isinstance(d, dict):
        raise ParseError(f"{path}: scene descriptor must be a JSON object", 1)
    desc = SceneDescriptor.from_dict(d)
    if check_files:
        for key, name in desc.files.items():
            if not (path.parent / name).exists():
                raise FileNotFoundError(f"{path}: referenced {key} file {name} is missing")
    q = np.asarray(desc.pose["quaternion"], dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ParseError(f"{path}: pose quaternion is not unit norm")
    return desc


# --------------------------------------------------------------------------- composites

def _box(center, half, exponent=8.0) -> Primitive:
    return Primitive(BOX, tuple(center), tuple(half), exponent)


def _legs(x: float, y: float, height: float, width: float = 0.05) -> list[Primitive]:
    return [_box((sx * x, sy * y, height / 2), (width, width, height / 2))
            for sx in (-1, 1) for sy in (-1, 1)]


def held_out_composites() -> dict[str, ShapeSpec]:
    """Hand-built multi-box furniture that the decoders cannot reproduce.

    Shapes are in canonical frame with their base near ``z = 0``; scenes
    lift them by the rest height like every other shape.
    """
    chair = [_box((0.0, 0.0, 0.45), (0.3, 0.3, 0.05)), _box((0.0, 0.25, 0.8), (0.3, 0.05, 0.3))]
    chair += _legs(0.25, 0.25, 0.4)
    table = [_box((0.0, 0.0, 0.6), (0.5, 0.35, 0.05))] + _legs(0.42, 0.28, 0.55)
    stool = [_box((0.0, 0.0, 0.5), (0.22, 0.22, 0.06))] + _legs(0.16, 0.16, 0.45)
    bench = [_box((0.0, 0.0, 0.35), (0.6, 0.2, 0.05)), _box((-0.5, 0.0, 0.15), (0.06, 0.18, 0.15)),
             _box((0.5, 0.0, 0.15), (0.06, 0.18, 0.15))]
    shelf = [_box((0.0, 0.0, 0.45), (0.4, 0.15, 0.45), 4.0), _box((0.0, -0.2, 0.95), (0.42, 0.2, 0.05))]
    shapes = {"chair": chair, "table": table, "stool": stool, "bench": bench, "shelf": shelf}
    return {name: ShapeSpec.from_primitives(prims) for name, prims in shapes.items()}


COMPOSITE_CATEGORY = "composite"
COMPOSITE_DECODER = "table"


# --------------------------------------------------------------------------- datasets

@dataclass(frozen=True)
class DatasetConfig:
    """Sampling choices for synthetic scenes (all recorded in the manifest)."""

    focal: float = 120.0
    width: int = 128
    height: int = 128
    light_elevation: tuple[float, float] = (30.0, 60.0)  # degrees
    camera_elevation: tuple[float, float] = (40.0, 80.0)  # degrees
    min_shadow_fraction: float = 0.005
    max_shadow_fraction: float = 0.6
    reject_clipped: bool = True
    ray_samples: int = DEFAULT_SAMPLES
    max_attempts: int = MAX_ATTEMPTS
    mesh_resolution: int = 48

    def to_dict(self) -> dict:
        d = asdict(self)
        d["light_elevation"] = list(self.light_elevation)
        d["camera_elevation"] = list(self.camera_elevation)
        return d


def band_sample(rng: np.random.Generator, radius: float, elevation_deg: tuple[float, float]) -> np.ndarray:
    """Area-uniform point on the sphere zone between two elevations (degrees)."""
    lo, hi = (math.radians(e) for e in elevation_deg)
    if not 0.0 <= lo < hi <= math.pi / 2:
        raise ValueError("elevation band must satisfy 0 <= lo < hi <= 90 degrees")
    s = math.sin(lo) + (math.sin(hi) - math.sin(lo)) * rng.random()
    az = 2.0 * math.pi * rng.random()
    return spherical_to_cartesian(az, math.asin(s), radius)


def split_of(index: int) -> str:
    """Deterministic 80/20 train/test split from a hash of the scene index."""
    h = hashlib.sha256(f"scene-{index}".encode()).digest()
    return "test" if int.from_bytes(h[:4], "big") % 5 == 0 else "train"


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass
class SampledScene:
    descriptor: SceneDescriptor
    shape: ShapeSpec  # canonical
    scene: Scene
    shadow: ShadowImage
    segmentation: np.ndarray


def degeneracy(shadow: ShadowImage, config: DatasetConfig) -> str | None:
    """Reason a rendered shadow mask is unusable, or ``None``."""
    s = shadow.values > 0.5
    frac = float(s.mean())
    if not config.min_shadow_fraction <= frac <= config.max_shadow_fraction:
        return f"shadow fraction {frac:.4f} outside [{config.min_shadow_fraction}, {config.max_shadow_fraction}]"
    return None


def is_clipped(shadow: ShadowImage) -> bool:
    s = shadow.values > 0.5
    return bool(s[0].any() or s[-1].any() or s[:, 0].any() or s[:, -1].any())


def sample_scene(rng: np.random.Generator, category: str, config: DatasetConfig = DatasetConfig(),
                 gen: GeneratorSpec | None = None) -> SampledScene:
    """Draw one non-degenerate scene, resampling up to ``config.max_attempts`` times."""
    composites = None
    if category == COMPOSITE_CATEGORY:
        composites = held_out_composites()
        gen = gen or GeneratorSpec.for_category(COMPOSITE_DECODER)
    elif gen is None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        gen = GeneratorSpec.for_category(category)
    reason, sampled, fallback = "", None, None
    for _ in range(config.max_attempts):
        if composites is None:
            z = sample_latent(rng, gen.latent_dim, gen.sphere_radius)
            shape = decode(gen, z)
        else:
            names = sorted(composites)
            z = None
            shape = composites[names[int(rng.integers(len(names)))]]
        light = band_sample(rng, LIGHT_RADIUS, config.light_elevation)
        eye = band_sample(rng, CAMERA_RADIUS, config.camera_elevation)
        yaw = 2.0 * math.pi * rng.random()
        pose = PoseSE3.from_yaw(yaw, (0.0, 0.0, shape.rest_height()))
        camera = CameraModel.look_at(eye, focal=config.focal, width=config.width, height=config.height)
        scene = Scene(camera, LightSource(light), pose, ray_samples=config.ray_samples)
        hard = render_shadow(scene, shape, "hard")
        shadow = hard.binarized()
        reason = degeneracy(shadow, config)
        if reason is None:
            desc = SceneDescriptor.build(
                eye=eye, focal=config.focal, light=light, pose=pose, gen=gen, latent=z,
                shape=shape if composites is not None else None, width=config.width, height=config.height,
                ray_samples=config.ray_samples, category=category)
            sampled = (desc, shape, scene, shadow)
            if not (config.reject_clipped and is_clipped(shadow)):
                break
            # clipped shadows are usable but a fully framed one is preferred
            fallback = fallback or sampled
            sampled, reason = None, "shadow touches the image border"
    else:
        sampled = fallback
    if sampled is None:
        raise DegenerateScene(f"no usable scene after {config.max_attempts} attempts ({reason})")
    desc, shape, scene, shadow = sampled
    return SampledScene(desc, shape, scene, shadow, render_segmentation(scene, shape))


def _write_scene_dir(directory: Path, sampled: SampledScene, mesh_resolution: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    files = sampled.descriptor.files
    write_pgm(directory / files["shadow"], sampled.shadow.values)
    write_pgm(directory / files["valid"], sampled.shadow.valid)
    write_pgm(directory / files["segmentation"], sampled.segmentation)
    try:
        mesh = extract_mesh(sampled.shape, mesh_resolution)
    except EmptyLevelSet:
        mesh = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    write_obj(directory / files["mesh"], mesh)
    write_scene(directory / "scene.json", sampled.descriptor)


def scene_dirname(index: int) -> str:
    return f"scene_{index:04d}"


def generate_dataset(out, n: int, category: str = "mixed", seed: int = 0, config: DatasetConfig = DatasetConfig(),
                     threads: int = 1) -> dict:
    """Write ``n`` scenes and ``manifest.json`` under ``out``; returns the manifest.

    Scene ``i`` draws from its own rng stream ``(seed, i)``, so the output
    is identical for any ``threads``.
    """
    if n < 1:
        raise ValueError("need at least one scene")
    if category != COMPOSITE_CATEGORY and category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")

    def work(i: int) -> None:
        sampled = sample_scene(scene_rng(seed, i), category, config)
        _write_scene_dir(out / scene_dirname(i), sampled, config.mesh_resolution)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n)))
    else:
        for i in range(n):
            work(i)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "category": category,
        "seed": int(seed),
        "n": int(n),
        "config": config.to_dict(),
        "scenes": [{"index": i, "dir": scene_dirname(i), "split": split_of(i)} for i in range(n)],
    }
    with open(out / "manifest.json", "w") as fh:
        fh.write(dumps_json(manifest))
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"manifest schema version {d.get('schema_version')!r}")
    return d


@dataclass
class LoadedScene:
    index: int
    split: str
    descriptor: SceneDescriptor
    shadow: ShadowImage

    @property
    def scene(self) -> Scene:
        return self.descriptor.to_scene()

    @property
    def truth(self) -> ShapeSpec | None:
        return self.descriptor.truth_shape()


def load_dataset(directory, split: str | None = None) -> list[LoadedScene]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    out = []
    for entry in manifest["scenes"]:
        if split is not None and entry["split"] != split:
            continue
        sdir = directory / entry["dir"]
        desc = read_scene(sdir / "scene.json")
        shadow = ShadowImage(read_pgm(sdir / desc.files["shadow"]) / 255.0,
                             read_pgm(sdir / desc.files["valid"]) > 127)
        out.append(LoadedScene(int(entry["index"]), entry["split"], desc, shadow))
    return out
