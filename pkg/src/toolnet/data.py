"""Synthetic tool-on-tissue data, PNG codecs, manifests and splits."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .tensor import Tensor

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
FG_FRACTION_BOUNDS = (0.02, 0.40)


class DecodeError(IOError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 in {0, 255}


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str
    split: str = "train"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    means: tuple[float, float, float] = (0.0, 0.0, 0.0)
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def write(self, path) -> None:
        path = Path(path)
        lines = [f"mean_{c} = {m!r}" for c, m in zip("rgb", self.means)]
        lines += [f"{e.id}\t{e.image}\t{e.mask}\t{e.split}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        means = {}
        entries = []
        ids = set()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("mean_"):
                key, _, value = line.partition("=")
                means[key.strip()[5:]] = float(value)
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: malformed manifest record {line!r}")
            if parts[0] in ids:
                raise ValueError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            ids.add(parts[0])
            entries.append(ManifestEntry(*parts))
        mean = tuple(means.get(c, 0.0) for c in "rgb")
        return cls(entries, mean, path.parent)


# ---------------------------------------------------------------------------
# codecs


def write_png(path, array: np.ndarray) -> None:
    mode = "L" if array.ndim == 2 else "RGB"
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8), mode=mode).save(path, format="PNG")


def read_png(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def load_sample(image_path, mask_path, sample_id: Optional[str] = None) -> Sample:
    image = read_png(image_path, "RGB")
    mask = read_png(mask_path, "L")
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image_path} is {image.shape[:2]} but mask {mask_path} is {mask.shape}")
    return Sample(sample_id or Path(image_path).stem, image, mask)


def normalize(image: np.ndarray, means: Sequence[float], dtype=np.float64) -> Tensor:
    """HxWx3 uint8 -> 1x3xHxW tensor of ``value / 255 - mean_c``."""
    x = image.astype(dtype) / 255.0 - np.asarray(means, dtype=dtype)
    return Tensor(np.ascontiguousarray(x.transpose(2, 0, 1)[None]))


def denormalize(x: Tensor, means: Sequence[float]) -> np.ndarray:
    img = (x.data[0].transpose(1, 2, 0) + np.asarray(means)) * 255.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def one_hot(mask: np.ndarray, num_classes: int = 2) -> Tensor:
    """0/255 mask -> 1x2xHxW one-hot map (channel 1 = instrument)."""
    if num_classes != 2:
        raise ValueError("binary masks encode exactly two classes")
    bad = np.setdiff1d(np.unique(mask), [0, 255])
    if bad.size:
        raise ValueError(f"mask is not binary; offending values: {bad.tolist()}")
    fg = (mask == 255).astype(np.float64)
    return Tensor(np.stack([1.0 - fg, fg])[None])


def compute_means(images: Sequence[np.ndarray]) -> tuple[float, float, float]:
    if not images:
        return (0.0, 0.0, 0.0)
    total = np.zeros(3)
    count = 0
    for img in images:
        total += img.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += img.shape[0] * img.shape[1]
    return tuple(float(v) for v in total / count / 255.0)


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {list(ratios)}")
    raw = [r * n for r in ratios]
    sizes = [int(math.floor(v + 1e-9)) for v in raw]
    # largest remainder, ties to the earlier split
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    for name, r, s in zip(SPLITS, ratios, sizes):
        if r > 0 and s == 0:
            raise ValueError(f"{n} samples are too few for a non-empty {name} split at ratio {r}")
    return sizes


def split_dataset(manifest: Manifest, ratios: Sequence[float], seed: int) -> Manifest:
    """Seeded shuffle, then contiguous train/validation/test assignment."""
    sizes = split_sizes(len(manifest.entries), ratios)
    order = np.random.default_rng(seed).permutation(len(manifest.entries))
    labels = [name for name, s in zip(SPLITS, sizes) for _ in range(s)]
    entries = list(manifest.entries)
    for rank, idx in enumerate(order):
        entries[idx] = replace(entries[idx], split=labels[rank])
    return Manifest(entries, manifest.means, manifest.root)


# ---------------------------------------------------------------------------
# synthetic renderer


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    grid = rng.random((h // cell + 2, w // cell + 2)).astype(np.float32)
    im = Image.fromarray(grid, mode="F").resize((w + 2 * cell, h + 2 * cell), Image.BILINEAR)
    return np.asarray(im)[cell:cell + h, cell:cell + w].astype(np.float64)


def _tissue(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = _value_noise(rng, h, w, max(4, min(h, w) // 4))
    fine = _value_noise(rng, h, w, max(2, min(h, w) // 16))
    tone = 0.65 * coarse + 0.35 * fine
    base = np.array([170.0, 65.0, 55.0]) + rng.normal(0, 10, 3)
    img = base * (0.7 + 0.6 * tone[..., None])
    img[..., 1:] += 25 * (fine[..., None] - 0.5)
    return img


def _border_entry(rng: np.random.Generator, h: int, w: int):
    side = rng.integers(4)
    if side == 0:
        start, inward = (rng.uniform(0.1, 0.9) * w, -0.05 * h), math.pi / 2
    elif side == 1:
        start, inward = (rng.uniform(0.1, 0.9) * w, 1.05 * h), -math.pi / 2
    elif side == 2:
        start, inward = (-0.05 * w, rng.uniform(0.1, 0.9) * h), 0.0
    else:
        start, inward = (1.05 * w, rng.uniform(0.1, 0.9) * h), math.pi
    return start, inward + rng.uniform(-0.6, 0.6)


def _tool_polygons(rng: np.random.Generator, h: int, w: int):
    """Shaft rectangle, rounded tip disc and two jaws, in pixel coordinates."""
    (x0, y0), theta = _border_entry(rng, h, w)
    size = min(h, w)
    width = rng.uniform(0.08, 0.16) * size
    length = rng.uniform(0.35, 0.7) * math.hypot(h, w)
    d = np.array([math.cos(theta), math.sin(theta)])
    n = np.array([-d[1], d[0]])
    p0 = np.array([x0, y0])
    tip = p0 + length * d
    half = width / 2
    shaft = [p0 + half * n, tip + half * n, tip - half * n, p0 - half * n]
    disc = (tip, half)
    opening = rng.uniform(0.1, 0.6)
    jaw_len = rng.uniform(0.8, 1.6) * width
    jaws = []
    for sgn in (1, -1):
        a = theta + sgn * opening
        dj = np.array([math.cos(a), math.sin(a)])
        nj = np.array([-dj[1], dj[0]])
        base = tip + sgn * 0.25 * width * n
        jaws.append([base + 0.22 * width * nj, base + jaw_len * dj, base - 0.22 * width * nj])
    return shaft, disc, jaws, p0, d, width


def _draw_tool(draw: ImageDraw.ImageDraw, shaft, disc, jaws) -> None:
    draw.polygon([tuple(p) for p in shaft], fill=255)
    (cx, cy), r = disc
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    for jaw in jaws:
        draw.polygon([tuple(p) for p in jaw], fill=255)


def render_sample(rng: np.random.Generator, h: int, w: int, max_tries: int = 200):
    """One synthetic frame; returns (image uint8 HxWx3, mask uint8 HxW in {0,255})."""
    lo, hi = FG_FRACTION_BOUNDS
    tissue = _tissue(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(max_tries):
        mask_im = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(mask_im)
        shading = np.zeros((h, w))
        for _tool in range(int(rng.integers(1, 3))):
            shaft, disc, jaws, p0, d, width = _tool_polygons(rng, h, w)
            _draw_tool(draw, shaft, disc, jaws)
            # cylinder shading across the shaft axis
            across = np.abs((xx - p0[0]) * -d[1] + (yy - p0[1]) * d[0]) / (width / 2)
            shading = np.maximum(shading, np.clip(1 - across ** 2, 0, 1))
        mask = np.asarray(mask_im)
        frac = float(np.mean(mask == 255))
        if lo <= frac <= hi:
            break
    else:
        raise RuntimeError(f"could not draw a tool covering {lo:.0%}-{hi:.0%} of a {h}x{w} frame")

    metal = rng.uniform(120, 170) + 55 * shading + 12 * (_value_noise(rng, h, w, 4) - 0.5)
    tool_rgb = np.stack([metal, metal * 0.98, metal * 1.03], axis=-1)
    fg = (mask == 255)[..., None]
    img = np.where(fg, tool_rgb, tissue)

    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(0.01, 0.04) * min(h, w) + 0.5
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        img = img + rng.uniform(60, 140) * blob[..., None]

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if rng.random() < 0.5:
        pil = Image.fromarray(img, mode="RGB").filter(ImageFilter.GaussianBlur(rng.uniform(0.4, 1.0)))
        img = np.asarray(pil)
    return img, mask


def generate_synthetic(n: int, seed: int, size: tuple[int, int], out_dir,
                       ratios: Sequence[float] = (1.0, 0.0, 0.0), split_seed: Optional[int] = None) -> Manifest:
    """Render ``n`` frames into ``out_dir`` and write ``out_dir/manifest.txt``.

    Every frame is drawn from its own stream seeded by ``(seed, index)``, so
    output is a pure function of the arguments.
    """
    h, w = size
    if n < 1:
        raise ValueError("need at least one sample")
    if h % 32 or w % 32:
        raise ValueError(f"size {h}x{w} must be divisible by 32")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    images = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img, mask = render_sample(rng, h, w)
        sid = f"synth_{i:05d}"
        write_png(out / "images" / f"{sid}.png", img)
        write_png(out / "masks" / f"{sid}.png", mask)
        entries.append(ManifestEntry(sid, f"images/{sid}.png", f"masks/{sid}.png"))
        images.append(img)
    manifest = split_dataset(Manifest(entries, root=out), ratios, seed if split_seed is None else split_seed)
    train_ids = {e.id for e in manifest.split("train")}
    train_imgs = [img for e, img in zip(entries, images) if e.id in train_ids] or images
    manifest.means = compute_means(train_imgs)
    manifest.write(out / "manifest.txt")
    return manifest


# ---------------------------------------------------------------------------
# in-memory frame sets


@dataclass
class Frame:
    id: str
    image: Tensor  # normalised 1x3xHxW
    target: Tensor  # one-hot 1x2xHxW
    mask: np.ndarray  # HxW 0/255
    raw: np.ndarray  # HxWx3 uint8


def load_frames(manifest: Manifest, split: Optional[str] = "train", skip_errors: bool = False):
    """Decode a split into memory. Returns ``(frames, n_skipped)``."""
    entries = manifest.entries if split is None else manifest.split(split)
    frames, skipped = [], 0
    for e in entries:
        img_path, mask_path = manifest.resolve(e.image), manifest.resolve(e.mask)
        try:
            s = load_sample(img_path, mask_path, e.id)
            frames.append(Frame(e.id, normalize(s.image, manifest.means), one_hot(s.mask), s.mask, s.image))
        except (OSError, ValueError) as exc:
            if not skip_errors:
                raise
            logger.warning("skipping frame %s: %s", e.id, exc)
            skipped += 1
    return frames, skipped
