"""Dataset ingestion, windowing, downsampling, and the synthetic scene generator.

Directory convention: ``<root>/<source_id>/frame_%05d.ppm`` colour frames,
``<root>/<source_id>/label_%05d.pgm`` binary masks (0/255), and a
``manifest.json`` at the root:

    {"version": 1,
     "sources": [{"id": ..., "frames": [...], "labels": [...],
                  "split": "train"|"val"|"test",
                  "metadata": {"location": ..., "lighting": ..., "motion": ...}}]}

Frames are binary PPM (P6), masks binary PGM (P5); both are codec-free so a
fixed seed regenerates byte-identical datasets. The synthetic scenes put a
green-dominant moving quadrilateral on a non-green textured background, with
global brightness drift, flickering green distractor patches outside the
target, bright in-target line markings (covered by the weak polygon label),
and Gaussian pixel noise.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .color import ColorImage

__all__ = [
    "FrameSequence",
    "SourceRecord",
    "DatasetManifest",
    "ManifestError",
    "SynthSceneParams",
    "load_manifest",
    "save_manifest",
    "window_sequences",
    "load_split_windows",
    "downsample4",
    "synth_generate",
    "rasterize_polygon",
    "read_ppm",
    "write_ppm",
    "read_pgm",
    "write_pgm",
    "write_pgm16",
]

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


# --- netpbm I/O --------------------------------------------------------------


def write_ppm(path, pixels):
    """Write a (3, H, W) [0,1] array as binary PPM (P6, maxval 255)."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {px.shape}")
    h, w = px.shape[1:]
    data = np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def write_pgm(path, mask):
    """Write a (H, W) or (1, H, W) {0,1} mask as binary PGM (P5, 0/255)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W), got {np.shape(mask)}")
    h, w = m.shape
    data = np.where(m > 0.5, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm16(path, values):
    """Write a (H, W) or (1, H, W) [0,1] array as 16-bit PGM (P5, maxval 65535,
    most significant byte first)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W), got {np.shape(values)}")
    h, w = v.shape
    data = np.clip(np.round(v * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm_header(blob, magic):
    if not blob.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    # magic, width, height, maxval, separated by whitespace/comments
    tokens = []
    pos = len(magic)
    while len(tokens) < 3:
        match = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", blob[pos:])
        if match is None:
            raise ValueError("truncated netpbm header")
        tokens.append(int(match.group(1)))
        pos += match.end()
    return tokens[0], tokens[1], tokens[2], pos + 1  # single whitespace after maxval


def read_ppm(path):
    """Read a binary PPM into a (3, H, W) float array in [0, 1]."""
    blob = Path(path).read_bytes()
    w, h, maxval, offset = _read_netpbm_header(blob, b"P6")
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=offset)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def read_pgm(path):
    """Read a binary PGM (8- or 16-bit) into a (1, H, W) float array in [0, 1]."""
    blob = Path(path).read_bytes()
    w, h, maxval, offset = _read_netpbm_header(blob, b"P5")
    if maxval > 255:
        raw = np.frombuffer(blob, dtype=">u2", count=w * h, offset=offset)
    else:
        raw = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=offset)
    return raw.reshape(1, h, w).astype(np.float64) / maxval


# --- manifest ----------------------------------------------------------------


@dataclass
class SourceRecord:
    id: str
    frames: list
    labels: list
    split: str
    metadata: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    sources: list

    def split_sources(self, split):
        return [s for s in self.sources if s.split == split]


def save_manifest(manifest, path=None):
    path = Path(path) if path else Path(manifest.root) / "manifest.json"
    doc = {
        "version": 1,
        "sources": [
            {
                "id": s.id,
                "frames": s.frames,
                "labels": s.labels,
                "split": s.split,
                "metadata": s.metadata,
            }
            for s in manifest.sources
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path):
    """Load and validate a manifest; raises ManifestError naming every missing
    file, any unknown split tag, or duplicated source ids."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest does not parse: {exc}")
    if doc.get("version") != 1:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    root = path.parent
    sources, problems, seen = [], [], set()
    for entry in doc.get("sources", []):
        rec = SourceRecord(
            id=entry["id"],
            frames=list(entry["frames"]),
            labels=list(entry["labels"]),
            split=entry["split"],
            metadata=dict(entry.get("metadata", {})),
        )
        if rec.split not in SPLITS:
            problems.append(f"source {rec.id}: unknown split {rec.split!r}")
        if rec.id in seen:
            problems.append(f"duplicate source id {rec.id!r}")
        seen.add(rec.id)
        if len(rec.frames) != len(rec.labels):
            problems.append(f"source {rec.id}: {len(rec.frames)} frames vs "
                            f"{len(rec.labels)} labels")
        for rel in (*rec.frames, *rec.labels):
            if not (root / rel).exists():
                problems.append(f"missing file: {rel}")
        sources.append(rec)
    if problems:
        raise ManifestError("invalid manifest:\n  " + "\n  ".join(problems))
    return DatasetManifest(root=root, sources=sources)


# --- sequences ----------------------------------------------------------------


@dataclass
class FrameSequence:
    """k+1 ordered colour frames plus the final frame's binary label."""

    frames: list            # list[ColorImage], oldest first
    label: np.ndarray | None
    source_id: str = ""
    frame_indices: tuple = ()

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a frame sequence needs at least one frame")
        dims = (self.frames[0].height, self.frames[0].width)
        for img in self.frames:
            if (img.height, img.width) != dims:
                raise ValueError("all frames in a sequence must share dimensions")
        if self.label is not None and self.label.shape[-2:] != dims:
            raise ValueError(f"label shape {self.label.shape} does not match frames {dims}")
        if self.frame_indices and list(self.frame_indices) != sorted(set(self.frame_indices)):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.frames)


def window_sequences(manifest, k, split=None):
    """Yield sliding windows of k+1 frames (stride 1), never crossing source
    boundaries; sources shorter than k+1 are skipped with a warning. Label is
    the final frame's mask."""
    if k < 0:
        raise ValueError("k must be >= 0")
    need = k + 1
    for src in manifest.sources:
        if split is not None and src.split != split:
            continue
        if len(src.frames) < need:
            warnings.warn(f"source {src.id} has {len(src.frames)} frames, "
                          f"fewer than the k+1={need} a window needs; skipped")
            continue
        frames = [ColorImage(read_ppm(manifest.root / rel), "rgb") for rel in src.frames]
        labels = [read_pgm(manifest.root / rel) for rel in src.labels]
        for start in range(len(frames) - need + 1):
            yield FrameSequence(
                frames=frames[start:start + need],
                label=labels[start + need - 1],
                source_id=src.id,
                frame_indices=tuple(range(start, start + need)),
            )


def load_split_windows(manifest, k):
    """Materialise all windows grouped by split: {'train': [...], ...}."""
    return {split: list(window_sequences(manifest, k, split)) for split in SPLITS}


def downsample4(img, method="box"):
    """Downsample a ColorImage by 4x per axis (box average, or nearest when
    requested). Dimensions must be divisible by 4."""
    px = img.pixels
    h, w = px.shape[1:]
    if h % 4 or w % 4:
        raise ValueError(f"dimensions ({h}, {w}) not divisible by 4")
    if method == "box":
        small = px.reshape(3, h // 4, 4, w // 4, 4).mean(axis=(2, 4))
    elif method == "nearest":
        small = px[:, ::4, ::4].copy()
    else:
        raise ValueError(f"unknown method {method!r}")
    return ColorImage(small, img.space)


# --- synthetic scenes ----------------------------------------------------------


@dataclass(frozen=True)
class SynthSceneParams:
    width: int = 32
    height: int = 32
    seed: int = 0
    brightness_drift: float = 0.1
    distractor_count: int = 2
    flicker_rate: float = 0.5
    noise_level: float = 0.02
    green_margin: float = 0.1
    line_count: int = 1
    motion_amplitude: float = 0.12   # fraction of image size the centre sweeps

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        for name in ("brightness_drift", "flicker_rate", "noise_level",
                     "green_margin", "motion_amplitude"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.distractor_count < 0 or self.line_count < 0:
            raise ValueError("counts must be non-negative")


def rasterize_polygon(vertices, height, width):
    """Exact convex-polygon mask: pixel centres inside or on the boundary.

    ``vertices`` is a (4, 2) array of (x, y) corners in counter-clockwise
    order (y down)."""
    verts = np.asarray(vertices, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    cx = xs + 0.5
    cy = ys + 0.5
    inside = np.ones((height, width), dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        cross = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
        inside &= cross >= 0.0
    return inside.astype(np.float64)[None]


def _convex_quad(rng, cx, cy, radius):
    # one corner per quadrant with jittered angle/radius keeps it convex
    angles = np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi])
    angles = angles + rng.uniform(0.15, 0.85) * 0.5 * np.pi
    radii = radius * rng.uniform(0.75, 1.0, size=4)
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    return np.stack([xs, ys], axis=1)


def _bilinear_field(rng, height, width, grid=5, lo=0.0, hi=1.0):
    coarse = rng.uniform(lo, hi, size=(grid, grid))
    gy = np.linspace(0, grid - 1, height)
    gx = np.linspace(0, grid - 1, width)
    y0 = np.clip(gy.astype(int), 0, grid - 2)
    x0 = np.clip(gx.astype(int), 0, grid - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x0 + 1)]
    bl = coarse[np.ix_(y0 + 1, x0)]
    br = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


def _segment_mask(p0, p1, height, width, thickness=0.8):
    ys, xs = np.mgrid[0:height, 0:width]
    cx = xs + 0.5
    cy = ys + 0.5
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    length2 = dx * dx + dy * dy
    if length2 == 0.0:
        return np.zeros((height, width), dtype=bool)
    t = np.clip(((cx - p0[0]) * dx + (cy - p0[1]) * dy) / length2, 0.0, 1.0)
    dist2 = (cx - (p0[0] + t * dx)) ** 2 + (cy - (p0[1] + t * dy)) ** 2
    return dist2 <= thickness ** 2


def _generate_sequence(params, seq_index, length):
    """All frames and labels for one source, fully determined by the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, seq_index]))
    h, w = params.height, params.width

    # background texture: red/blue vary smoothly, green pinned below both
    base_r = 0.30 + 0.30 * _bilinear_field(rng, h, w)
    base_b = 0.30 + 0.30 * _bilinear_field(rng, h, w)
    base_g = 0.80 * np.minimum(base_r, base_b)

    # target fill: green exceeds the other channels by margin + headroom
    q = rng.uniform(0.25, 0.40)
    fill = np.array([q, q + params.green_margin + 0.15, q])

    radius = rng.uniform(0.26, 0.34) * min(h, w)
    c0 = np.array([w / 2.0, h / 2.0]) + rng.uniform(-0.08, 0.08, size=2) * min(h, w)
    quad0 = _convex_quad(rng, c0[0], c0[1], radius)
    amp = params.motion_amplitude * min(h, w)
    omega = 2.0 * np.pi / max(length, 2)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)

    drift_phase = rng.uniform(0.0, 2.0 * np.pi)

    # line markings inside the target: brighter on all channels equally so
    # green dominance (and therefore the weak label) is unaffected
    line_endpoints = []
    for _ in range(params.line_count):
        offs = rng.uniform(-0.6, 0.6, size=(2, 2)) * radius
        line_endpoints.append(offs)

    patch = max(2, min(h, w) // 10)
    frames, masks, polygons = [], [], []
    for t in range(length):
        shift = amp * np.array([np.sin(omega * t + phase[0]),
                                np.sin(omega * t + phase[1])])
        quad = quad0 + shift
        mask = rasterize_polygon(quad, h, w)[0]

        img = np.stack([base_r, base_g, base_b]).copy()
        img[:, mask > 0] = fill[:, None]
        for offs in line_endpoints:
            p0 = quad.mean(axis=0) + offs[0]
            p1 = quad.mean(axis=0) + offs[1]
            line = _segment_mask(p0, p1, h, w) & (mask > 0)
            img[:, line] += 0.25

        for _ in range(params.distractor_count):
            visible = rng.random() < params.flicker_rate
            for _try in range(50):
                y0 = rng.integers(0, h - patch + 1)
                x0 = rng.integers(0, w - patch + 1)
                if not mask[y0:y0 + patch, x0:x0 + patch].any():
                    break
            else:
                continue
            if visible:
                q2 = rng.uniform(0.2, 0.4)
                img[0, y0:y0 + patch, x0:x0 + patch] = q2
                img[1, y0:y0 + patch, x0:x0 + patch] = q2 + params.green_margin + 0.2
                img[2, y0:y0 + patch, x0:x0 + patch] = q2

        img += params.brightness_drift * np.sin(omega * t + drift_phase)
        if params.noise_level > 0.0:
            img += rng.normal(0.0, params.noise_level, size=img.shape)
        frames.append(np.clip(img, 0.0, 1.0))
        masks.append(mask[None])
        polygons.append(quad.tolist())
    return frames, masks, polygons


def synth_generate(params, n_sequences, length, root, splits=None):
    """Write ``n_sequences`` sources of ``length`` frames under ``root`` and
    return the saved manifest. ``splits`` optionally assigns one split tag per
    sequence (default: all train). Byte-identical for a fixed seed."""
    if length < 1 or n_sequences < 1:
        raise ValueError("need at least one sequence of at least one frame")
    if splits is None:
        splits = ["train"] * n_sequences
    if len(splits) != n_sequences:
        raise ValueError("splits must assign one tag per sequence")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sources = []
    for idx in range(n_sequences):
        sid = f"seq_{idx:03d}"
        sdir = root / sid
        sdir.mkdir(exist_ok=True)
        frames, masks, polygons = _generate_sequence(params, idx, length)
        frame_rel, label_rel = [], []
        for t, (img, mask) in enumerate(zip(frames, masks)):
            fr = f"{sid}/frame_{t:05d}.ppm"
            lr = f"{sid}/label_{t:05d}.pgm"
            write_ppm(root / fr, img)
            write_pgm(root / lr, mask)
            frame_rel.append(fr)
            label_rel.append(lr)
        sources.append(SourceRecord(
            id=sid,
            frames=frame_rel,
            labels=label_rel,
            split=splits[idx],
            metadata={
                "location": "synthetic",
                "lighting": f"drift_{params.brightness_drift:.2f}",
                "motion": "dynamic",
                "polygons": polygons,
            },
        ))
    manifest = DatasetManifest(root=root, sources=sources)
    save_manifest(manifest)
    return manifest
