"""Interleaved multi-image training sequences grouped by tag key.

Pairs sharing a grouping key (modality+organ of their first image) are
shuffled and chunked into fixed-size blocks; each block renders to one
training sequence whose text interleaves every member's tags, image
markers, and text.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import substream
from .datamodel import tag_key
from .errors import ConfigError
from .tokenizer import weave_pair_text


@dataclass(frozen=True)
class InterleavedSequence:
    segments: tuple          # ordered ("text", str) / ("image", global_index) items
    group_key: str
    source_pair_ids: tuple
    template_text: str       # rendered text with <img i> markers
    images: tuple            # ImageVolumes in marker order
    tags_per_image: tuple


def group_pairs(pairs) -> dict:
    """Partition pairs by the tag key of each pair's first image.

    Deterministic: groups sorted by key, members sorted by pair_id.
    """
    groups = {}
    for pair in pairs:
        key = tag_key(pair.tags_per_image[0])
        groups.setdefault(key, []).append(pair)
    return {
        key: sorted(members, key=lambda p: p.pair_id)
        for key, members in sorted(groups.items())
    }


def build_sequences(groups: dict, n_per_seq: int, seed: int) -> list:
    """Seeded shuffle within each group, then chunk into blocks of n_per_seq.

    The final short block is emitted as-is; every input pair lands in
    exactly one sequence.
    """
    if n_per_seq < 1:
        raise ConfigError(f"n_per_seq must be >= 1, got {n_per_seq}")
    sequences = []
    for key in sorted(groups):
        members = list(groups[key])
        rng = substream(seed, f"ita:{key}")
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        for lo in range(0, len(shuffled), n_per_seq):
            chunk = shuffled[lo : lo + n_per_seq]
            parts = []
            segments = []
            images = []
            tags = []
            for pair in chunk:
                rendered = weave_pair_text(pair.text, pair.tags_per_image, start_index=len(images))
                parts.append(rendered)
                for img in pair.images:
                    segments.append(("image", len(images)))
                    images.append(img)
                segments.append(("text", pair.text))
                tags.extend(pair.tags_per_image)
            sequences.append(
                InterleavedSequence(
                    segments=tuple(segments),
                    group_key=key,
                    source_pair_ids=tuple(p.pair_id for p in chunk),
                    template_text=" ".join(parts),
                    images=tuple(images),
                    tags_per_image=tuple(tags),
                )
            )
    return sequences
