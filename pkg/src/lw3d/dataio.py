"""Synthetic clip generation, clip sampling and augmentation.

All randomness flows through explicit seeds; record k of a dataset uses
seed ``global_seed ^ k`` so parallel and serial generation agree.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import Tensor5D


@dataclass(frozen=True)
class ClipRecord:
    path: str
    label: int
    stream: str = "rgb"  # rgb | depth
    source: str = ""


@dataclass(frozen=True)
class AugmentConfig:
    resize: tuple[int, int] = (256, 310)  # (height, width)
    crop: int = 224
    flip_prob: float = 0.5
    clip_len: int = 32

    def __post_init__(self):
        if self.crop > min(self.resize):
            raise ValueError(f"crop {self.crop} larger than resize target {self.resize}")
        if self.clip_len < 1:
            raise ValueError("clip length must be >= 1")


def sample_clip(video: Tensor5D, length: int = 32, seed: int = 0) -> Tensor5D:
    """A uniformly random contiguous window of ``length`` frames; shorter
    videos are tiled cyclically until the length is reached."""
    t = video.t
    if t >= length:
        start = int(np.random.default_rng(seed).integers(0, t - length + 1))
        return Tensor5D(np.ascontiguousarray(video.data[:, :, start : start + length]))
    idx = np.arange(length) % t
    return Tensor5D(np.ascontiguousarray(video.data[:, :, idx]))


def resize_bilinear(clip: Tensor5D, out_h: int, out_w: int) -> Tensor5D:
    """Per-frame bilinear resize; never interpolates across time."""
    n, c, t, h, w = clip.data.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    d = clip.data.astype(np.float64)
    top = d[..., y0, :][..., x0] * (1 - wx) + d[..., y0, :][..., x1] * wx
    bot = d[..., y1, :][..., x0] * (1 - wx) + d[..., y1, :][..., x1] * wx
    out = top * (1 - wy) + bot * wy
    return Tensor5D(out.astype(np.float32))


CROP_SITES = ("top-left", "top-right", "bottom-left", "bottom-right", "center")


def crop_site_offsets(site: str, h: int, w: int, crop: int) -> tuple[int, int]:
    if site == "top-left":
        return 0, 0
    if site == "top-right":
        return 0, w - crop
    if site == "bottom-left":
        return h - crop, 0
    if site == "bottom-right":
        return h - crop, w - crop
    if site == "center":
        return (h - crop) // 2, (w - crop) // 2
    raise ValueError(f"unknown crop site {site!r}")


def flip_horizontal(clip: Tensor5D) -> Tensor5D:
    return Tensor5D(np.ascontiguousarray(clip.data[..., ::-1]))


def augment(clip: Tensor5D, cfg: AugmentConfig, seed: int = 0) -> Tensor5D:
    """Resize, crop at one of the four corners or the center, maybe flip.
    Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    rh, rw = cfg.resize
    out = resize_bilinear(clip, rh, rw)
    site = CROP_SITES[int(rng.integers(0, len(CROP_SITES)))]
    oy, ox = crop_site_offsets(site, rh, rw, cfg.crop)
    out = Tensor5D(
        np.ascontiguousarray(out.data[..., oy : oy + cfg.crop, ox : ox + cfg.crop])
    )
    if rng.random() < cfg.flip_prob:
        out = flip_horizontal(out)
    return out


def synth_clip(
    label: int,
    classes: int,
    shape: tuple[int, int, int, int],
    rng: np.random.Generator,
) -> Tensor5D:
    """One synthetic clip: a bright blob drifting in a class-dependent
    direction at a class-dependent speed, plus mild noise."""
    c, t, h, w = shape
    angle = 2.0 * np.pi * label / max(classes, 1)
    speed = 0.25 + 0.5 * label / max(classes - 1, 1)
    dy, dx = np.sin(angle) * speed, np.cos(angle) * speed
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy0 = h / 2 + rng.uniform(-1, 1)
    cx0 = w / 2 + rng.uniform(-1, 1)
    sigma = max(2.0, min(h, w) / 6.0)
    frames = np.empty((c, t, h, w), dtype=np.float32)
    for k in range(t):
        cy = (cy0 + dy * k * h / max(t, 1)) % h
        cx = (cx0 + dx * k * w / max(t, 1)) % w
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        frames[:, k] = blob[None]
    frames += rng.normal(0.0, 0.05, size=frames.shape).astype(np.float32)
    return Tensor5D(frames[None])


def synth_dataset(
    classes: int,
    clips_per_class: int,
    shape: tuple[int, int, int, int],
    seed: int,
    out_dir: str,
    stream: str = "rgb",
) -> list[ClipRecord]:
    """Generate a balanced labeled dataset of tensor files plus a manifest."""
    if classes < 2:
        raise ValueError("need at least two classes")
    os.makedirs(out_dir, exist_ok=True)
    records: list[ClipRecord] = []
    index = 0
    for label in range(classes):
        for j in range(clips_per_class):
            rng = np.random.default_rng(seed ^ index)
            clip = synth_clip(label, classes, shape, rng)
            path = os.path.join(out_dir, f"clip_{label:02d}_{j:03d}.lw3d")
            tensor.save_tensor(path, clip)
            records.append(ClipRecord(path, label, stream, f"synth-{index}"))
            index += 1
    write_manifest(os.path.join(out_dir, "manifest.tsv"), records)
    return records


def load_clip(record: ClipRecord, replicate_to: int | None = 3) -> Tensor5D:
    """Load a clip; single-channel (depth) tensors replicate to 3 channels so
    every architecture keeps the same stem."""
    x = tensor.load_tensor(record.path)
    if replicate_to and x.c == 1 and replicate_to > 1:
        x = Tensor5D(np.repeat(x.data, replicate_to, axis=1))
    return x


def write_manifest(path, records: list[ClipRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.path}\t{r.label}\t{r.stream}\t{r.source}\n")


def read_manifest(path) -> list[ClipRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            p, label, stream, source = line.rstrip("\n").split("\t")
            records.append(ClipRecord(p, int(label), stream, source))
    return records
