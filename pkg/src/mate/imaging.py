"""Raster images, masks and the compositing steps around sampling.

Files are binary netpbm: P6 for colour, P5 for grayscale, masks and depth
(255 = foreground / nearest). Every 8-bit conversion rounds half-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ImagingError(Exception):
    pass


class ImageFormatError(ImagingError):
    pass


def round_half_up(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class ImagePlane:
    width: int
    height: int
    channels: int
    samples: np.ndarray  # uint8, (height, width, channels)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ImagingError(f"channels must be 1 or 3, got {self.channels}")
        if self.samples.dtype != np.uint8 or self.samples.shape != (self.height, self.width, self.channels):
            raise ImagingError(
                f"sample buffer {self.samples.shape}/{self.samples.dtype} does not match "
                f"{self.width}x{self.height}x{self.channels} uint8"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImagePlane":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ImagingError(f"expected (h, w) or (h, w, c) array, got {arr.shape}")
        if arr.dtype != np.uint8:
            arr = round_half_up(arr)
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, samples=np.ascontiguousarray(arr))

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def to_array(self) -> np.ndarray:
        return self.samples.copy()

    def to_float(self) -> np.ndarray:
        return self.samples.astype(np.float64)

    def same_pixels(self, other: "ImagePlane") -> bool:
        return self.samples.shape == other.samples.shape and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True, eq=False)
class Mask:
    width: int
    height: int
    values: np.ndarray  # float64 in [0, 1], (height, width)

    def __post_init__(self):
        if self.values.shape != (self.height, self.width):
            raise ImagingError(f"mask buffer {self.values.shape} does not match {self.width}x{self.height}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ImagingError("mask values must lie in [0, 1]")

    @classmethod
    def from_array(cls, values: np.ndarray) -> "Mask":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ImagingError(f"mask must be 2-D, got {values.shape}")
        return cls(width=values.shape[1], height=values.shape[0], values=values)

    @classmethod
    def from_image(cls, img: ImagePlane) -> "Mask":
        if img.channels != 1:
            raise ImagingError(f"mask image must be single-channel, got {img.channels}")
        return cls.from_array(img.samples[:, :, 0].astype(np.float64) / 255.0)

    @classmethod
    def full(cls, width: int, height: int, value: float) -> "Mask":
        return cls.from_array(np.full((height, width), value, dtype=np.float64))

    def to_image(self) -> ImagePlane:
        return ImagePlane.from_array(round_half_up(self.values * 255.0))

    def foreground(self) -> np.ndarray:
        return self.values >= 0.5

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height


def _require_same_size(op: str, *items) -> None:
    sizes = {item.size for item in items}
    if len(sizes) != 1:
        raise ImagingError(f"{op}: dimension mismatch {sorted(sizes)}")


# --- netpbm I/O ---


_DIGITS = frozenset(b"0123456789")
_WHITESPACE = frozenset(b" \t\n\r\x0b\x0c")


class _HeaderScanner:
    """Reads whitespace/comment separated header fields of a netpbm file."""

    def __init__(self, source: bytes):
        self.source = source
        self.length = len(source)
        self.pos = 0

    def magic(self) -> str:
        if self.length < 2:
            raise ImageFormatError("file too short for a netpbm header")
        magic = self.source[:2].decode("ascii", errors="replace")
        self.pos = 2
        return magic

    def number(self, label: str) -> int:
        self._skip_whitespace_and_comments()
        start = self.pos
        while not self._is_at_end() and self._peek() in _DIGITS:
            self.pos += 1
        if start == self.pos:
            raise ImageFormatError(f"malformed header: expected {label} at byte {start}")
        return int(self.source[start : self.pos])

    def payload_start(self) -> int:
        # exactly one whitespace byte separates maxval from the raster
        if self._is_at_end() or self._peek() not in _WHITESPACE:
            raise ImageFormatError("malformed header: missing whitespace before raster")
        return self.pos + 1

    def _skip_whitespace_and_comments(self) -> None:
        while not self._is_at_end():
            byte = self._peek()
            if byte in _WHITESPACE:
                self.pos += 1
            elif byte == ord("#"):
                while not self._is_at_end() and self._peek() != ord("\n"):
                    self.pos += 1
            else:
                return

    def _is_at_end(self) -> bool:
        return self.pos >= self.length

    def _peek(self) -> int:
        return self.source[self.pos]


_CHANNELS = {"P5": 1, "P6": 3}


def decode_netpbm(data: bytes) -> ImagePlane:
    scanner = _HeaderScanner(data)
    magic = scanner.magic()
    if magic not in _CHANNELS:
        raise ImageFormatError(f"unsupported netpbm magic {magic!r}; expected P5 or P6")
    width = scanner.number("width")
    height = scanner.number("height")
    maxval = scanner.number("maxval")
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    start = scanner.payload_start()
    channels = _CHANNELS[magic]
    need = width * height * channels
    raster = data[start : start + need]
    if len(raster) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(raster)}")
    samples = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).copy()
    return ImagePlane(width=width, height=height, channels=channels, samples=samples)


def encode_netpbm(img: ImagePlane) -> bytes:
    magic = "P6" if img.channels == 3 else "P5"
    header = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.samples.tobytes()


def load_image(path: Path) -> ImagePlane:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ImagingError(f"cannot read {path}: {e.strerror}") from e
    try:
        return decode_netpbm(data)
    except ImageFormatError as e:
        raise ImageFormatError(f"{path}: {e}") from e


def save_image(img: ImagePlane, path: Path) -> None:
    try:
        Path(path).write_bytes(encode_netpbm(img))
    except OSError as e:
        raise ImagingError(f"cannot write {path}: {e.strerror}") from e


def load_mask(path: Path) -> Mask:
    return Mask.from_image(load_image(path))


def save_mask(mask: Mask, path: Path) -> None:
    save_image(mask.to_image(), path)


# --- colour ops ---


def to_grayscale(img: ImagePlane) -> ImagePlane:
    """Rec. 601 luma, half-up: (299 R + 587 G + 114 B + 500) // 1000."""
    if img.channels != 3:
        raise ImagingError(f"to_grayscale needs 3 channels, got {img.channels}")
    rgb = img.samples.astype(np.int64)
    luma = (299 * rgb[:, :, 0] + 587 * rgb[:, :, 1] + 114 * rgb[:, :, 2] + 500) // 1000
    return ImagePlane.from_array(luma.astype(np.uint8))


def to_rgb(img: ImagePlane) -> ImagePlane:
    if img.channels == 3:
        return img
    return ImagePlane.from_array(np.repeat(img.samples, 3, axis=2))


def depth_to_rgb(depth: ImagePlane) -> ImagePlane:
    """Replicate a P5 depth map to three channels so it shares the patch embedding."""
    if depth.channels != 1:
        raise ImagingError(f"depth map must be single-channel, got {depth.channels}")
    return to_rgb(depth)


def illumination_composite(i_input: ImagePlane, f: Mask) -> ImagePlane:
    """f * gray + (1 - f) * input per channel, gray broadcast over channels."""
    if i_input.channels != 3:
        raise ImagingError(f"illumination_composite needs a colour image, got {i_input.channels} channels")
    _require_same_size("illumination_composite", i_input, f)
    gray = to_grayscale(i_input).to_float()
    weight = f.values[:, :, None]
    mixed = weight * gray + (1.0 - weight) * i_input.to_float()
    return ImagePlane.from_array(round_half_up(mixed))


def final_background_replace(output_img: ImagePlane, input_img: ImagePlane, f: Mask) -> ImagePlane:
    """Copy every pixel with f < 0.5 from the input image."""
    _require_same_size("final_background_replace", output_img, input_img, f)
    if output_img.channels != input_img.channels:
        raise ImagingError("final_background_replace: channel count mismatch")
    keep = f.foreground()[:, :, None]
    return ImagePlane.from_array(np.where(keep, output_img.samples, input_img.samples))


# --- latent-space masking ---


def downsample_mask_to_tokens(f: Mask, patch_size: int) -> np.ndarray:
    """Per-patch mean of the mask, row-major, one value per token."""
    if f.width % patch_size or f.height % patch_size:
        raise ImagingError(f"mask {f.width}x{f.height} is not divisible by patch size {patch_size}")
    gh, gw = f.height // patch_size, f.width // patch_size
    blocks = f.values.reshape(gh, patch_size, gw, patch_size)
    return blocks.mean(axis=(1, 3)).reshape(-1)


def blend_step(x_gen: Tensor, x_in_noised: Tensor, m_latent: np.ndarray) -> Tensor:
    """x_gen * m + x_in_noised * (1 - m), with one mask value per token row."""
    if x_gen.shape != x_in_noised.shape:
        raise ImagingError(f"blend_step: shape mismatch {x_gen.shape} vs {x_in_noised.shape}")
    m = np.asarray(m_latent, dtype=x_gen.dtype).reshape(-1)
    if m.shape[0] != x_gen.shape[0]:
        raise ImagingError(f"blend_step: mask has {m.shape[0]} tokens, latent has {x_gen.shape[0]}")
    weight = m[:, None]
    return nx.add(nx.mul(x_gen, weight), nx.mul(x_in_noised, 1.0 - weight))


def check_disjoint(masks: Sequence[Mask]) -> None:
    """Raise if any pixel is foreground (>= 0.5) in more than one mask."""
    if not masks:
        return
    _require_same_size("check_disjoint", *masks)
    coverage = np.sum([m.foreground().astype(np.int64) for m in masks], axis=0)
    overlap = int((coverage > 1).sum())
    if overlap:
        raise ImagingError(f"masks overlap on {overlap} pixels")


def tile_images(images: Sequence[ImagePlane], columns: Optional[int] = None, pad: int = 2) -> ImagePlane:
    """Lay images out left-to-right, top-to-bottom on a black contact sheet."""
    if not images:
        raise ImagingError("tile_images: nothing to tile")
    tiles = [to_rgb(img) for img in images]
    cell_w = max(t.width for t in tiles)
    cell_h = max(t.height for t in tiles)
    columns = columns or len(tiles)
    rows = -(-len(tiles) // columns)
    sheet = np.zeros((rows * cell_h + (rows + 1) * pad, columns * cell_w + (columns + 1) * pad, 3), dtype=np.uint8)
    for index, tile in enumerate(tiles):
        r, c = divmod(index, columns)
        y = pad + r * (cell_h + pad)
        x = pad + c * (cell_w + pad)
        sheet[y : y + tile.height, x : x + tile.width] = tile.samples
    return ImagePlane.from_array(sheet)


__all__ = [
    "ImageFormatError",
    "ImagePlane",
    "ImagingError",
    "Mask",
    "blend_step",
    "check_disjoint",
    "decode_netpbm",
    "depth_to_rgb",
    "downsample_mask_to_tokens",
    "encode_netpbm",
    "final_background_replace",
    "illumination_composite",
    "load_image",
    "load_mask",
    "round_half_up",
    "save_image",
    "save_mask",
    "tile_images",
    "to_grayscale",
    "to_rgb",
]
