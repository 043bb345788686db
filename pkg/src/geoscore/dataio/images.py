"""PNG decode/encode and the preprocessing pipeline (resize, normalize, augment)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from geoscore.numerics import ParameterError


class DecodeError(ValueError):
    """File could not be decoded as an 8-bit RGB(A) PNG."""


def decode_image(path: str | Path) -> np.ndarray:
    """Decode a PNG to a channel-first uint8 RGB array [3, H, W]; alpha dropped."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "RGBA", "L"):
                img = img.convert("RGB")
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        arr = arr[..., :3]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_image(arr: np.ndarray, path: str | Path) -> None:
    """Write a channel-first uint8 RGB array as PNG (lossless)."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] array, got {arr.shape}")
    Image.fromarray(arr.transpose(1, 2, 0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment.

    Source coordinate of output pixel i is (i + 0.5) * in/out - 0.5, clamped
    to the valid range; this makes outputs bit-comparable across
    implementations of the same convention. Returns float64 [3, out_h, out_w].
    """
    img = np.asarray(img, dtype=np.float64)
    _, in_h, in_w = img.shape

    def axis_coords(n_out: int, n_in: int):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    fy = fy[:, None]
    fx = fx[None, :]

    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


@dataclass(frozen=True)
class PreprocessPolicy:
    """Target geometry, per-channel normalization constants, augmentation switches."""

    target_side: int = 224
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    flip_horizontal: bool = False
    flip_vertical: bool = False
    rotate: bool = False
    crop_fraction: float = 0.0  # 0 disables; else crop this fraction of the side

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ParameterError("normalization std must be positive per channel")
        if not 0.0 <= self.crop_fraction <= 1.0:
            raise ParameterError("crop_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "target_side": self.target_side,
            "mean": list(self.mean),
            "std": list(self.std),
            "flip_horizontal": self.flip_horizontal,
            "flip_vertical": self.flip_vertical,
            "rotate": self.rotate,
            "crop_fraction": self.crop_fraction,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessPolicy":
        return cls(
            target_side=data["target_side"],
            mean=tuple(data["mean"]),
            std=tuple(data["std"]),
            flip_horizontal=data.get("flip_horizontal", False),
            flip_vertical=data.get("flip_vertical", False),
            rotate=data.get("rotate", False),
            crop_fraction=data.get("crop_fraction", 0.0),
        )


def z_normalize(img: np.ndarray, policy: PreprocessPolicy) -> np.ndarray:
    """(pixel/255 - mean_c) / std_c per channel; accepts uint8 or float input."""
    img = np.asarray(img, dtype=np.float64) / 255.0
    mean = np.asarray(policy.mean)[:, None, None]
    std = np.asarray(policy.std)[:, None, None]
    return (img - mean) / std


def augment(img: np.ndarray, policy: PreprocessPolicy, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation: coin-flip flips, 90-degree rotation, random crop.

    Size-preserving (crops resize back), seeded, identity when all switches
    are off.
    """
    img = np.asarray(img)
    if policy.flip_horizontal and rng.random() < 0.5:
        img = img[:, :, ::-1]
    if policy.flip_vertical and rng.random() < 0.5:
        img = img[:, ::-1, :]
    if policy.rotate:
        k = int(rng.integers(0, 4))
        if k:
            img = np.rot90(img, k=k, axes=(1, 2))
    if policy.crop_fraction > 0.0:
        _, h, w = img.shape
        ch = max(1, int(round(h * policy.crop_fraction)))
        cw = max(1, int(round(w * policy.crop_fraction)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = resize_bilinear(img[:, top : top + ch, left : left + cw], h, w)
    return np.ascontiguousarray(img)


def preprocess(
    img: np.ndarray,
    policy: PreprocessPolicy,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> np.ndarray:
    """Full pipeline: optional augmentation, resize to target, z-normalize."""
    if training and rng is not None:
        img = augment(img, policy, rng)
    img = resize_bilinear(img, policy.target_side, policy.target_side)
    return z_normalize(img, policy)
