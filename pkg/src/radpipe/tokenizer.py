"""Adaptive image tokenization: tiling, patching, and tag-context weaving.

Arbitrary-resolution 2D images, multi-view studies, and 3D stacks are
standardized into fixed-size sub-images (tiles), then cut into flattened
patch tokens with full positional provenance. No resampling happens
anywhere: tiling is pad-only, so round-trips are bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import TAG_KEYS, ImageVolume, tag_key
from .errors import ConfigError, EmptyImageError, ShapeError


@dataclass(frozen=True)
class SubImage:
    """One SxS tile. origin = (image_index, tile_row, tile_col, slice_index)."""

    pixels: np.ndarray
    origin: tuple
    pad_mask: np.ndarray  # True where the tile is padding, pixel value 0 there


@dataclass(frozen=True)
class PatchTokenSet:
    """Flattened patch tokens plus provenance.

    tokens:    (N, P*P) float array
    positions: (N, 4) int array of (image_index, slice_index, tile_index, patch_index)
    pad:       (N, P*P) bool array, True where the pixel is padding
    """

    tokens: np.ndarray
    positions: np.ndarray
    pad: np.ndarray
    sub_image_size: int
    patch_size: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_sub_images(self) -> int:
        return self.n_tokens // ((self.sub_image_size // self.patch_size) ** 2)

    def fully_padded(self) -> np.ndarray:
        """Boolean (N,) marking patches with no real pixels."""
        return self.pad.all(axis=1)


def tile(image: ImageVolume, sub_image_size: int, image_index: int = 0) -> list:
    """Cover every slice with ceil(H/S)*ceil(W/S) tiles, row-major from top-left.

    The right/bottom remainder is zero-padded with pad_mask set. Slices are
    emitted in slice order.
    """
    S = int(sub_image_size)
    if S < 1:
        raise ConfigError(f"sub_image_size must be >= 1, got {S}")
    vox = image.voxels
    if vox.size == 0:
        raise EmptyImageError("image has zero voxels")
    D, H, W = vox.shape
    rows, cols = math.ceil(H / S), math.ceil(W / S)
    subs = []
    for z in range(D):
        for r in range(rows):
            for c in range(cols):
                pixels = np.zeros((S, S), dtype=np.float64)
                mask = np.ones((S, S), dtype=bool)
                h = min(S, H - r * S)
                w = min(S, W - c * S)
                pixels[:h, :w] = vox[z, r * S : r * S + h, c * S : c * S + w]
                mask[:h, :w] = False
                subs.append(SubImage(pixels=pixels, origin=(image_index, r, c, z), pad_mask=mask))
    return subs


def untile(subs, height: int, width: int, depth: int = 1) -> np.ndarray:
    """Inverse of tile: reassemble sub-images and crop padding."""
    if not subs:
        raise EmptyImageError("no sub-images to reassemble")
    S = subs[0].pixels.shape[0]
    rows, cols = math.ceil(height / S), math.ceil(width / S)
    out = np.zeros((depth, rows * S, cols * S), dtype=np.float64)
    for sub in subs:
        _, r, c, z = sub.origin
        out[z, r * S : (r + 1) * S, c * S : (c + 1) * S] = sub.pixels
    return out[:, :height, :width]


def patchify(subs, patch_size: int) -> PatchTokenSet:
    """Cut each sub-image into (S/P)^2 non-overlapping patches, row-major.

    Token order follows sub-image order; positions carry full provenance so
    unpatchify is exact.
    """
    if not subs:
        raise EmptyImageError("no sub-images to patchify")
    P = int(patch_size)
    S = subs[0].pixels.shape[0]
    if S % P != 0:
        raise ConfigError(f"sub_image_size {S} not divisible by patch_size {P}")
    g = S // P
    tokens, pads, positions = [], [], []
    tile_counters = {}
    for sub in subs:
        img, r, c, z = sub.origin
        tile_index = tile_counters.setdefault((img, z), 0)
        tile_counters[(img, z)] = tile_index + 1
        px = sub.pixels.reshape(g, P, g, P).transpose(0, 2, 1, 3).reshape(g * g, P * P)
        pm = sub.pad_mask.reshape(g, P, g, P).transpose(0, 2, 1, 3).reshape(g * g, P * P)
        tokens.append(px)
        pads.append(pm)
        for patch_index in range(g * g):
            positions.append((img, z, tile_index, patch_index))
    return PatchTokenSet(
        tokens=np.concatenate(tokens, axis=0),
        positions=np.asarray(positions, dtype=np.int64),
        pad=np.concatenate(pads, axis=0),
        sub_image_size=S,
        patch_size=P,
    )


def unpatchify(patches: PatchTokenSet) -> list:
    """Rebuild the sub-image pixel tiles from patch tokens (pad masks kept)."""
    S, P = patches.sub_image_size, patches.patch_size
    g = S // P
    n_per = g * g
    if patches.tokens.shape[1] != P * P:
        raise ShapeError(f"token length {patches.tokens.shape[1]} != P*P = {P * P}")
    out = []
    for s in range(patches.n_sub_images):
        tok = patches.tokens[s * n_per : (s + 1) * n_per]
        pad = patches.pad[s * n_per : (s + 1) * n_per]
        px = tok.reshape(g, g, P, P).transpose(0, 2, 1, 3).reshape(S, S)
        pm = pad.reshape(g, g, P, P).transpose(0, 2, 1, 3).reshape(S, S)
        out.append((px, pm))
    return out


def tokenize_images(images, sub_image_size: int, patch_size: int) -> PatchTokenSet:
    """Tile + patchify a list of ImageVolumes into one token stream."""
    subs = []
    for i, image in enumerate(images):
        subs.extend(tile(image, sub_image_size, image_index=i))
    return patchify(subs, patch_size)


def expected_token_count(images, sub_image_size: int, patch_size: int) -> int:
    """N = sum over images of D * ceil(H/S) * ceil(W/S) * (S/P)^2."""
    g = (sub_image_size // patch_size) ** 2
    total = 0
    for img in images:
        D, H, W = img.voxels.shape
        total += D * math.ceil(H / sub_image_size) * math.ceil(W / sub_image_size) * g
    return total


def render_tags(tags) -> str:
    """Tag tokens in the fixed key order (modality, organ, view)."""
    by_key = {t.key: t.value for t in tags}
    if by_key:
        tag_key(tags)  # enforce modality presence for non-empty tag sets
    return " ".join(f"<tag:{k}={by_key[k]}>" for k in TAG_KEYS if k in by_key)


def weave_context(texts, tags_per_image, start_index: int = 0) -> str:
    """Emit, per image i: "<tag:k=v> ... <img i>" then that image's text segment.

    One text segment per image (may be empty). Marker indices are
    start_index..start_index+n-1, so sequences can be concatenated.
    """
    if len(texts) != len(tags_per_image):
        raise ShapeError("texts and tags_per_image must align 1:1")
    parts = []
    for i, (text, tags) in enumerate(zip(texts, tags_per_image)):
        rendered = render_tags(tags)
        if rendered:
            parts.append(rendered)
        parts.append(f"<img {start_index + i}>")
        if text:
            parts.append(text.strip())
    return " ".join(parts)


def weave_pair_text(text: str, tags_per_image, start_index: int = 0) -> str:
    """Weave a pair with one shared text: tags/markers per image, text after the last marker."""
    n = len(tags_per_image)
    texts = [""] * (n - 1) + [text] if n else []
    return weave_context(texts, tags_per_image, start_index=start_index)
