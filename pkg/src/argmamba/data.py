"""Synthetic optical + DSM scenes, raster I/O, patch tiling and dataset layout."""
import dataclasses
import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ParseError
from .netpbm import read_netpbm, write_pgm, write_ppm

CLASS_NAMES = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"]
IMPERVIOUS, BUILDING, LOW_VEG, TREE, CAR, CLUTTER = range(6)

# model input normalization
OPTICAL_MEAN, OPTICAL_STD = 0.5, 0.25
DSM_SCALE_M = 10.0


@dataclass
class GeneratorSpec:
    """Scene generator parameters. Object counts are per 64x64 pixels of area."""

    H: int = 64
    W: int = 64
    counts: dict = field(default_factory=lambda: {"low_vegetation": 2.0, "building": 2.0, "tree": 3.0,
                                                  "car": 3.0, "clutter": 1.5})
    # (mean, std) in meters; buildings/trees draw a per-object height in [lo, hi]
    heights: dict = field(default_factory=lambda: {"impervious": [0.0, 0.1], "building": [6.0, 25.0],
                                                   "low_vegetation": [0.2, 0.1], "tree": [3.0, 10.0],
                                                   "car": [1.5, 0.2], "clutter": [0.0, 3.0]})
    colors: dict = field(default_factory=lambda: {"impervious": [0.55, 0.55, 0.55],
                                                  "building": [0.72, 0.38, 0.30],
                                                  "low_vegetation": [0.55, 0.78, 0.35],
                                                  "tree": [0.12, 0.42, 0.14],
                                                  "car": [0.15, 0.25, 0.85],
                                                  "clutter": [0.85, 0.20, 0.75]})
    color_jitter: float = 0.05
    optical_noise: float = 0.03
    dsm_noise: float = 0.15
    building_size: list = field(default_factory=lambda: [10, 22])
    tree_radius: list = field(default_factory=lambda: [3, 7])
    low_veg_radius: list = field(default_factory=lambda: [6, 12])
    car_size: list = field(default_factory=lambda: [3, 6])
    clutter_size: list = field(default_factory=lambda: [3, 8])

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneSample:
    optical: np.ndarray     # (3, H, W) float32 in [0, 1], multiples of 1/255
    dsm: np.ndarray         # (1, H, W) float32, meters
    labels: np.ndarray      # (H, W) uint8
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.labels.shape


def _count(rng, mean, area_scale):
    return int(rng.poisson(mean * area_scale)) if mean > 0 else 0


def _paint(labels, dsm, rgb, mask, cls, height, color):
    labels[mask] = cls
    dsm[mask] = height[mask] if np.ndim(height) else height
    rgb[:, mask] = np.asarray(color, dtype=np.float64)[:, None] if np.ndim(color) == 1 else color[:, mask]


def generate_scene(spec=None, seed=0):
    """Draw one labelled scene; identical ``(spec, seed)`` give identical arrays.

    Background is impervious; low vegetation blobs, buildings (rectangles),
    trees (discs with domed crowns), cars (small rectangles) and clutter
    (textured patches) are drawn in that order, later objects occluding.
    """
    spec = spec or GeneratorSpec()
    H, W = spec.H, spec.W
    if H < 32 or W < 32:
        raise ConfigError(f"scenes must be at least 32x32, got {H}x{W}")
    rng = np.random.default_rng(seed)
    area = H * W / 4096.0
    yy, xx = np.mgrid[0:H, 0:W]
    labels = np.full((H, W), IMPERVIOUS, dtype=np.uint8)
    dsm = np.zeros((H, W), dtype=np.float64)
    rgb = np.empty((3, H, W), dtype=np.float64)
    rgb[:] = np.asarray(spec.colors["impervious"])[:, None, None]

    def jitter(name):
        return np.clip(np.asarray(spec.colors[name]) + rng.normal(0, spec.color_jitter, 3), 0, 1)

    for _ in range(_count(rng, spec.counts.get("low_vegetation", 0), area)):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        ry, rx = rng.uniform(*spec.low_veg_radius, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        _paint(labels, dsm, rgb, mask, LOW_VEG, spec.heights["low_vegetation"][0], jitter("low_vegetation"))

    for _ in range(_count(rng, spec.counts.get("building", 0), area)):
        h, w = rng.integers(spec.building_size[0], spec.building_size[1] + 1, size=2)
        y0, x0 = rng.integers(-h // 3, H - 2 * h // 3), rng.integers(-w // 3, W - 2 * w // 3)
        mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        _paint(labels, dsm, rgb, mask, BUILDING, rng.uniform(*spec.heights["building"]), jitter("building"))

    for _ in range(_count(rng, spec.counts.get("tree", 0), area)):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(*spec.tree_radius)
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2
        mask = d2 <= 1
        top = rng.uniform(*spec.heights["tree"])
        crown = top * (0.6 + 0.4 * np.sqrt(np.clip(1 - d2, 0, 1)))
        _paint(labels, dsm, rgb, mask, TREE, crown, jitter("tree"))

    for _ in range(_count(rng, spec.counts.get("car", 0), area)):
        a, b = spec.car_size
        h, w = (a, b) if rng.random() < 0.5 else (b, a)
        y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        mu, sd = spec.heights["car"]
        _paint(labels, dsm, rgb, mask, CAR, mu + sd * rng.standard_normal(), jitter("car"))

    for _ in range(_count(rng, spec.counts.get("clutter", 0), area)):
        h, w = rng.integers(spec.clutter_size[0], spec.clutter_size[1] + 1, size=2)
        y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        base = jitter("clutter")
        texture = np.clip(base[:, None, None] + rng.normal(0, 0.12, (3, H, W)), 0, 1)
        lo, hi = spec.heights["clutter"]
        _paint(labels, dsm, rgb, mask, CLUTTER, rng.uniform(lo, hi, (H, W)), texture)

    rgb += rng.normal(0, spec.optical_noise, rgb.shape)
    optical = (np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8).astype(np.float32) / np.float32(255))
    dsm = (dsm + rng.normal(0, spec.dsm_noise, dsm.shape)).astype(np.float32)[None]
    meta = {"class_names": list(CLASS_NAMES), "generator": spec.to_dict(), "seed": int(seed)}
    return SceneSample(optical, dsm, labels, int(seed), meta)


# ---------------------------------------------------------------------------
# single-sample I/O


def _quantize_dsm(dsm):
    lo, hi = float(dsm.min()), float(dsm.max())
    scale = (hi - lo) / 65535.0 if hi > lo else 1e-3
    q = np.clip(np.round((dsm.astype(np.float64) - lo) / scale), 0, 65535).astype(np.uint16)
    return q, scale, lo


def save_sample(sample, directory):
    os.makedirs(directory, exist_ok=True)
    rgb = np.round(sample.optical.transpose(1, 2, 0).astype(np.float64) * 255).astype(np.uint8)
    write_ppm(os.path.join(directory, "optical.ppm"), rgb)
    q, scale, offset = _quantize_dsm(sample.dsm[0])
    write_pgm(os.path.join(directory, "dsm.pgm"), q)
    write_pgm(os.path.join(directory, "labels.pgm"), sample.labels.astype(np.uint8))
    meta = dict(sample.meta)
    meta.update({"seed": int(sample.seed), "dsm_scale": scale, "dsm_offset": offset, "dsm_units": "m",
                 "height": int(sample.shape[0]), "width": int(sample.shape[1])})
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_sample(directory):
    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    rgb, maxval = read_netpbm(os.path.join(directory, "optical.ppm"))
    if rgb.ndim != 3:
        raise ParseError("optical.ppm is not a pixmap")
    optical = (rgb.astype(np.float32) / np.float32(maxval)).transpose(2, 0, 1).copy()
    q, _ = read_netpbm(os.path.join(directory, "dsm.pgm"))
    dsm = (meta["dsm_offset"] + meta["dsm_scale"] * q.astype(np.float64)).astype(np.float32)[None]
    labels, _ = read_netpbm(os.path.join(directory, "labels.pgm"))
    if labels.ndim != 2 or labels.shape != optical.shape[1:] or q.shape != labels.shape:
        raise ParseError("raster dimensions disagree between optical, dsm and labels")
    return SceneSample(optical, dsm, labels.astype(np.uint8), int(meta.get("seed", 0)), meta)


# ---------------------------------------------------------------------------
# tiling


def _grid(n, patch, stride, remainder):
    pos = list(range(0, n - patch + 1, stride))
    if pos[-1] + patch < n:
        pos.append(n - patch if remainder == "shift" else pos[-1] + stride)
    return pos


def patchify(sample, patch=512, stride=None, remainder="shift"):
    """Cut a sample into ``patch x patch`` tiles on a regular grid.

    A right/bottom remainder gets one extra tile: ``remainder='shift'`` anchors
    it flush with the border (no padding); ``'mirror'`` keeps the grid spacing
    and fills the overhang by mirrored padding.
    """
    stride = stride or patch
    H, W = sample.shape
    if patch > H or patch > W:
        raise ConfigError(f"patch {patch} larger than image {H}x{W}")
    if remainder not in ("shift", "mirror"):
        raise ConfigError(f"remainder must be 'shift' or 'mirror', got {remainder!r}")
    ys, xs = _grid(H, patch, stride, remainder), _grid(W, patch, stride, remainder)
    ph, pw = max(ys) + patch - H, max(xs) + patch - W
    opt, dsm, lab = sample.optical, sample.dsm, sample.labels
    if ph or pw:
        opt = np.pad(opt, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
        dsm = np.pad(dsm, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
        lab = np.pad(lab, ((0, ph), (0, pw)), mode="symmetric")
    out = []
    for y in ys:
        for x in xs:
            meta = dict(sample.meta)
            meta["patch"] = {"y": y, "x": x, "size": patch, "source_shape": [H, W]}
            out.append(SceneSample(opt[:, y:y + patch, x:x + patch].copy(), dsm[:, y:y + patch, x:x + patch].copy(),
                                   lab[y:y + patch, x:x + patch].copy(), sample.seed, meta))
    return out


# ---------------------------------------------------------------------------
# dataset directories: <root>/<split>/<id>/..., <root>/manifest.json


def sample_seed(seed, split, index):
    ss = np.random.SeedSequence([int(seed), sum(split.encode()), int(index)])
    return int(ss.generate_state(1)[0])


def write_dataset(root, splits, spec=None, seed=0, force=False):
    """Generate and write ``{split: count}`` samples; returns the manifest."""
    spec = spec or GeneratorSpec()
    if os.path.isdir(root) and os.listdir(root):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(root)
    os.makedirs(root, exist_ok=True)
    manifest = {"splits": {}, "generator": spec.to_dict(), "seed": int(seed), "class_names": list(CLASS_NAMES)}
    for split, count in splits.items():
        ids = []
        for i in range(count):
            sid = f"{i:04d}"
            s = generate_scene(spec, sample_seed(seed, split, i))
            save_sample(s, os.path.join(root, split, sid))
            ids.append(sid)
        manifest["splits"][split] = ids
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as f:
        return json.load(f)


def load_split(root, split):
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise ConfigError(f"split {split!r} not in dataset (have {sorted(manifest['splits'])})")
    return [load_sample(os.path.join(root, split, sid)) for sid in manifest["splits"][split]]


def to_model_inputs(samples, dtype=torch.float32):
    """Stack samples into normalized ``(optical, dsm, labels)`` tensors."""
    opt = np.stack([s.optical for s in samples])
    dsm = np.stack([s.dsm for s in samples])
    lab = np.stack([s.labels for s in samples])
    opt = (torch.from_numpy(opt).to(dtype) - OPTICAL_MEAN) / OPTICAL_STD
    dsm = torch.from_numpy(dsm).to(dtype) / DSM_SCALE_M
    return opt, dsm, torch.from_numpy(lab.astype(np.int64))
