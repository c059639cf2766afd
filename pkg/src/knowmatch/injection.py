"""Constrained knowledge injection: injection trees, soft positions, and the
attention visibility matrix.

The serialized trunk stays untouched; every knowledge label becomes a branch
hanging off its head span. Flattening inserts branch tokens right after the
head, soft positions keep trunk tokens at their original indices, and the
visibility matrix confines each branch to its own head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, OverlapError, SequenceOverflowError
from .serializer import InputSequence, PromptMode, TokenSeq


@dataclass(frozen=True)
class Branch:
    """One injected knowledge subsequence attached to a trunk head span."""

    head: tuple[int, int]
    knowledge: tuple[int, ...]


@dataclass(frozen=True)
class InjectionTree:
    """A trunk token sequence with depth-1 knowledge branches."""

    trunk: tuple[int, ...]
    branches: tuple[Branch, ...]

    def __post_init__(self) -> None:
        spans = []
        for br in self.branches:
            start, end = br.head
            if not (0 <= start < end <= len(self.trunk)):
                raise DomainError(
                    f"branch head [{start},{end}) out of bounds for trunk "
                    f"of length {len(self.trunk)}"
                )
            spans.append((start, end))
        for (s1, e1) in spans:
            for (s2, e2) in spans:
                if (s1, e1) < (s2, e2) and s1 < e2 and s2 < e1:
                    raise OverlapError(
                        f"branch heads [{s1},{e1}) and [{s2},{e2}) overlap"
                    )


@dataclass(frozen=True, eq=False)
class InjectedSequence:
    """Flattened injected sequence ready for the encoder."""

    tokens: tuple[int, ...]
    soft_positions: tuple[int, ...]
    visible: np.ndarray  # (L, L) uint8, symmetric, all-ones diagonal
    segments: tuple[int, ...]
    trunk_mask: tuple[int, ...]


def build_injection_tree(seq: TokenSeq) -> InjectionTree:
    """Build the depth-1 tree for a constrained-mode token sequence."""
    return InjectionTree(
        trunk=tuple(seq.tokens),
        branches=tuple(Branch(site.head, site.knowledge) for site in seq.sites),
    )


def _flat_layout(tree: InjectionTree) -> list[tuple[int, int]]:
    """Flat order as (trunk index, -1) or (branch index, k) entries.

    Branch tokens sit immediately after the last token of their head span;
    branches anchored at the same point (only possible with identical heads,
    which validation rejects) would keep declaration order.
    """
    by_anchor: dict[int, list[int]] = {}
    for bi, br in enumerate(tree.branches):
        by_anchor.setdefault(br.head[1] - 1, []).append(bi)
    layout: list[tuple[int, int]] = []
    for i in range(len(tree.trunk)):
        layout.append((i, -1))
        for bi in by_anchor.get(i, ()):
            for k in range(len(tree.branches[bi].knowledge)):
                layout.append((bi, k))
    return layout


def flatten_with_soft_positions(
    tree: InjectionTree,
) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Flatten a tree to (tokens, soft_positions, trunk_mask).

    Trunk tokens keep their trunk index as position; the k-th token of a
    branch (k = 1, 2, ...) gets the position of its head's last token plus k.
    """
    tokens: list[int] = []
    soft: list[int] = []
    mask: list[int] = []
    for idx, k in _flat_layout(tree):
        if k < 0:
            tokens.append(tree.trunk[idx])
            soft.append(idx)
            mask.append(1)
        else:
            br = tree.branches[idx]
            tokens.append(br.knowledge[k])
            soft.append(br.head[1] - 1 + k + 1)
            mask.append(0)
    return tuple(tokens), tuple(soft), tuple(mask)


def build_visible_matrix(tree: InjectionTree, flat_len: int) -> np.ndarray:
    """Binary visibility matrix over the flattened sequence.

    Two tokens see each other iff they are both trunk tokens, belong to the
    same branch, or are a branch token and a token of that branch's head
    span. Every token sees itself.
    """
    layout = _flat_layout(tree)
    if len(layout) != flat_len:
        raise DomainError(
            f"flat_len {flat_len} does not match flattened length {len(layout)}"
        )
    n = flat_len
    trunk_flat = [fi for fi, (idx, k) in enumerate(layout) if k < 0]
    trunk_pos_to_flat = {layout[fi][0]: fi for fi in trunk_flat}

    visible = np.zeros((n, n), dtype=np.uint8)
    t = np.asarray(trunk_flat, dtype=np.intp)
    visible[np.ix_(t, t)] = 1
    for bi, br in enumerate(tree.branches):
        members = np.asarray(
            [fi for fi, (idx, k) in enumerate(layout) if k >= 0 and idx == bi],
            dtype=np.intp,
        )
        heads = np.asarray(
            [trunk_pos_to_flat[p] for p in range(br.head[0], br.head[1])],
            dtype=np.intp,
        )
        visible[np.ix_(members, members)] = 1
        visible[np.ix_(members, heads)] = 1
        visible[np.ix_(heads, members)] = 1
    np.fill_diagonal(visible, 1)
    return visible


def assemble(pair: InputSequence, max_len: int) -> InjectedSequence:
    """Expand a constrained-mode pair into its injected sequence.

    Branch tokens inherit the segment of their head's last token. Injection
    never truncates knowledge: an over-budget result is an error.
    """
    if pair.mode is not PromptMode.CONSTRAINED:
        raise DomainError(f"assemble requires constrained mode, got {pair.mode}")
    tree = InjectionTree(
        trunk=tuple(pair.tokens),
        branches=tuple(Branch(s.head, s.knowledge) for s in pair.sites),
    )
    tokens, soft, mask = flatten_with_soft_positions(tree)
    if len(tokens) > max_len:
        raise SequenceOverflowError(
            f"injected length {len(tokens)} exceeds max_len {max_len}"
        )
    visible = build_visible_matrix(tree, len(tokens))

    segments = []
    for (idx, k), _tok in zip(_flat_layout(tree), tokens):
        if k < 0:
            segments.append(pair.segments[idx])
        else:
            head_last = tree.branches[idx].head[1] - 1
            segments.append(pair.segments[head_last])
    return InjectedSequence(
        tokens=tokens,
        soft_positions=soft,
        visible=visible,
        segments=tuple(segments),
        trunk_mask=mask,
    )


def pack_visible_rows(visible: np.ndarray) -> list[str]:
    """Encode each row as hex: bit j of row i (little-endian) is V[i][j]."""
    n = visible.shape[0]
    width = max(1, (n + 3) // 4)
    out = []
    for i in range(n):
        acc = 0
        row = visible[i]
        for j in range(n):
            if row[j]:
                acc |= 1 << j
        out.append(format(acc, f"0{width}x"))
    return out


def unpack_visible_rows(rows: Sequence[str], n: int) -> np.ndarray:
    """Inverse of :func:`pack_visible_rows`."""
    visible = np.zeros((n, n), dtype=np.uint8)
    for i, hexrow in enumerate(rows):
        acc = int(hexrow, 16)
        for j in range(n):
            if (acc >> j) & 1:
                visible[i, j] = 1
    return visible


def injected_to_json(inj: InjectedSequence, sites_json: list[dict], label) -> dict:
    """Injected-batch line: the serialized line plus soft positions and
    visibility rows. ``tokens``/``segments`` describe the flat sequence."""
    return {
        "tokens": list(inj.tokens),
        "segments": list(inj.segments),
        "sites": sites_json,
        "label": label,
        "soft_pos": list(inj.soft_positions),
        "visible_rows": pack_visible_rows(inj.visible),
    }
