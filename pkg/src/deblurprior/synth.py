"""Synthetic training and evaluation data: random motion-blur kernels,
procedural sharp scenes and blurred/clear sample pairs (B = I * k + n)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import load_png, save_png, to_luma, write_text

KERNEL_MIN, KERNEL_MAX = 7, 51
SCENE_SHAPES = (20, 40)  # shape count range per scene; dense edges keep kernels observable


@dataclass
class Sample:
    image: np.ndarray
    label: int  # 0 clear, 1 blurred
    kernel_id: int | None = None
    pair_id: int | None = None


@dataclass
class SynthConfig:
    kernel_min: int = KERNEL_MIN
    kernel_max: int = KERNEL_MAX
    noise_sigma: float = 0.01
    sample_size: int | None = None  # crop side for each pair; None keeps the full image

    def __post_init__(self):
        for s in (self.kernel_min, self.kernel_max):
            _check_kernel_size(s)
        if self.kernel_min > self.kernel_max:
            raise ValueError("kernel_min > kernel_max")


@dataclass
class SynthDataset:
    samples: list
    kernels: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def pairs(self):
        """(clear, blurred) sample tuples grouped by pair id."""
        by_pair = {}
        for s in self.samples:
            by_pair.setdefault(s.pair_id, {})[s.label] = s
        return [(d[0], d[1]) for _, d in sorted(by_pair.items()) if 0 in d and 1 in d]


def _check_kernel_size(size):
    if size % 2 == 0 or not KERNEL_MIN <= size <= KERNEL_MAX:
        raise ValueError(f"kernel size must be odd and in [{KERNEL_MIN}, {KERNEL_MAX}], got {size}")


def _trajectory(n_points, rng, angle_sigma=0.25, p_impulse=0.05):
    # inertial random walk: heading drifts with Gaussian noise, occasional sharp turns
    heading = rng.uniform(0, 2 * np.pi)
    speed = 1.0
    pts = np.zeros((n_points, 2))
    for t in range(1, n_points):
        heading += rng.normal(0, angle_sigma)
        if rng.random() < p_impulse:
            heading += rng.uniform(-np.pi / 2, np.pi / 2)
        speed = float(np.clip(speed + rng.normal(0, 0.1), 0.3, 1.7))
        pts[t] = pts[t - 1] + speed * np.array([np.sin(heading), np.cos(heading)])
    return pts


def densify(points, spacing=0.25):
    """Resample a polyline so consecutive samples are at most ``spacing`` apart.

    Returns (points, weights); every segment carries weight 1 in total, i.e.
    equal exposure time per trajectory step.
    """
    out, wts = [], []
    for a, b in zip(points[:-1], points[1:]):
        m = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        t = (np.arange(m)[:, None] + 0.5) / m
        out.append(a + t * (b - a))
        wts.append(np.full(m, 1.0 / m))
    return np.concatenate(out), np.concatenate(wts)


def splat(points, size, weights=None):
    """Bilinear sub-pixel accumulation of (row, col) points onto a size x size grid."""
    k = np.zeros((size, size))
    if weights is None:
        weights = np.ones(len(points))
    r0 = np.floor(points[:, 0]).astype(int)
    c0 = np.floor(points[:, 1]).astype(int)
    fr = points[:, 0] - r0
    fc = points[:, 1] - c0
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size) & (w > 0)
        np.add.at(k, (rr[ok], cc[ok]), (w * weights)[ok])
    return k


def random_trajectory_kernel(size, rng, length=None):
    """Motion-blur kernel from a rasterized random camera trajectory.

    ``length`` is the number of trajectory samples (default 4 * size); a
    single sample gives a delta at the centre.
    """
    _check_kernel_size(size)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    length = 4 * size if length is None else int(length)
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    pts = _trajectory(length, rng)
    # centre on the exposure centroid; scale so the farthest sample fits the grid
    pts = pts - pts.mean(axis=0)
    reach = float(np.abs(pts).max())
    centre = (size - 1) / 2
    if reach > 0:
        pts = pts * (rng.uniform(0.5, 1.0) * centre / reach) + centre
    else:
        pts = np.full_like(pts, centre)
    if len(pts) > 1:
        pts, wts = densify(pts)
        k = splat(pts, size, wts)
    else:
        k = splat(pts, size)
    return k / k.sum()


def blur_image(image, kernel, sigma=0.0, rng=None):
    """Convolve with ``kernel`` (replicate borders), add N(0, sigma^2) noise, clamp to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {image.shape}")
    out = ndimage.convolve(image, kernel, mode="nearest")
    if sigma > 0:
        if rng is None:
            raise ValueError("noise requested without an rng")
        out = out + rng.normal(0, sigma, size=out.shape)
    return np.clip(out, 0, 1)


def procedural_scene(size, rng):
    """A sharp synthetic scene: shaded background, flat shapes, strokes and fine grain."""
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a, b, c = rng.uniform(-0.4, 0.4, 3)
    img = 0.5 + a * (xx / w - 0.5) + b * (yy / h - 0.5) + c * (xx / w - 0.5) * (yy / h - 0.5)
    scale = min(h, w)
    for _ in range(int(rng.integers(*SCENE_SHAPES))):
        kind = rng.integers(0, 4)
        val = rng.uniform(0, 1)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if kind == 0:  # axis-aligned rectangle
            hh, ww = rng.uniform(0.05, 0.35, 2) * scale
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        elif kind == 1:  # rotated ellipse
            ry, rx = rng.uniform(0.04, 0.25, 2) * scale
            t = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
            v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
            mask = (u / rx) ** 2 + (v / ry) ** 2 < 1
        elif kind == 2:  # half-plane wedge / polygon edge
            t = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.05, 0.3) * scale
            d = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
            mask = (d > 0) & ((xx - cx) ** 2 + (yy - cy) ** 2 < (3 * r) ** 2)
        else:  # thin stroke
            t = rng.uniform(0, np.pi)
            half = rng.uniform(0.1, 0.4) * scale
            thick = rng.uniform(1.0, 3.0)
            u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
            v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
            mask = (np.abs(u) < half) & (np.abs(v) < thick)
        img[mask] = val
    img += rng.normal(0, rng.uniform(0.0, 0.02), size=img.shape)
    return np.clip(img, 0, 1)


def generate_dataset(clear_images, n_kernels, n_samples, cfg=None, rng=None):
    """Balanced clear/blurred pairs. Pair i uses clear image i mod len(clear_images)
    and one of ``n_kernels`` random trajectory kernels."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    clear_images = list(clear_images)
    if not clear_images:
        raise ValueError("no clear images")
    if n_kernels < 1 or n_samples < 2:
        raise ValueError("need at least one kernel and two samples")
    if n_samples % 2:
        raise ValueError(f"n_samples must be even for a balanced set, got {n_samples}")
    odd_sizes = np.arange(cfg.kernel_min, cfg.kernel_max + 1, 2)
    kernels = [random_trajectory_kernel(int(rng.choice(odd_sizes)), rng) for _ in range(n_kernels)]
    samples = []
    for pair in range(n_samples // 2):
        src = np.asarray(clear_images[pair % len(clear_images)], dtype=np.float64)
        if cfg.sample_size is not None:
            side = cfg.sample_size
            if side > min(src.shape):
                raise ValueError(f"sample_size {side} exceeds source image {src.shape}")
            i = int(rng.integers(0, src.shape[0] - side + 1))
            j = int(rng.integers(0, src.shape[1] - side + 1))
            src = src[i:i + side, j:j + side]
        kid = int(rng.integers(0, n_kernels))
        blurred = blur_image(src, kernels[kid], cfg.noise_sigma, rng)
        samples.append(Sample(src.copy(), 0, None, pair))
        samples.append(Sample(blurred, 1, kid, pair))
    return SynthDataset(samples, kernels)


def format_kernel(kernel):
    return "\n".join(" ".join(f"{v:.9e}" for v in row) for row in np.asarray(kernel)) + "\n"


def parse_kernel(text):
    k = np.array([[float(v) for v in line.split()] for line in text.strip().splitlines()])
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel grid must be square, got {k.shape}")
    return k


# --- on-disk layout ------------------------------------------------------------
#   manifest.csv            path,label,kernel_id,pair_id (paths relative to the root)
#   images/NNNNN.png        8-bit samples
#   kernels/KKK.txt         whitespace grid, one row per line
#   kernels/KKK.png         preview scaled to the kernel maximum

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("path", "label", "kernel_id", "pair_id")


def write_dataset(ds, root):
    """Write images, kernels and the manifest under ``root`` (each file atomically)."""
    root = Path(root)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for i, s in enumerate(ds.samples):
        rel = f"images/{i:05d}.png"
        save_png(root / rel, s.image)
        w.writerow([rel, s.label, "" if s.kernel_id is None else s.kernel_id, "" if s.pair_id is None else s.pair_id])
    for kid, k in enumerate(ds.kernels):
        write_text(root / f"kernels/{kid:03d}.txt", format_kernel(k))
        save_png(root / f"kernels/{kid:03d}.png", k / k.max())
    write_text(root / MANIFEST, buf.getvalue())


def read_manifest(root):
    """Manifest rows as dicts with int label and Optional[int] kernel_id / pair_id."""
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS[:2]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            rows.append({
                "path": r["path"],
                "label": int(r["label"]),
                "kernel_id": int(r["kernel_id"]) if r.get("kernel_id") else None,
                "pair_id": int(r["pair_id"]) if r.get("pair_id") else None,
            })
    return rows


def read_kernel(root, kernel_id):
    """Ground-truth kernel ``kernel_id`` or None when its file is absent."""
    path = Path(root) / f"kernels/{kernel_id:03d}.txt"
    if not path.is_file():
        return None
    return parse_kernel(path.read_text())


def read_dataset(root):
    """Load a dataset written by ``write_dataset`` (images as grayscale float64)."""
    rows = read_manifest(root)
    samples = [Sample(to_luma(load_png(Path(root) / r["path"])), r["label"], r["kernel_id"], r["pair_id"]) for r in rows]
    kids = sorted({r["kernel_id"] for r in rows if r["kernel_id"] is not None})
    kernels = [read_kernel(root, k) for k in range(kids[-1] + 1)] if kids else []
    return SynthDataset(samples, kernels)
