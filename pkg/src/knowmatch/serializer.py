"""Turn record pairs plus annotations into classifier-ready token sequences.

A single entry serializes to ``[COL] name ... [VAL] value ...`` per column;
a pair to ``[CLS] left [SEP] right [SEP]``. Knowledge is injected either
inline (space or slash template) or, in constrained mode, recorded as
injection sites that the constrained-prompting stage expands into branches.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AnnotationMismatchError, DomainError, SequenceOverflowError
from .knowledge import (
    AnnotationStore,
    DITTO_GENERAL_TYPES,
    DITTO_PRODUCT_SOURCE_TYPES,
    RULE_TYPE_LABELS,
)
from .tabular import Record, Table
from .text import CLS_ID, COL_ID, SEP_ID, SPECIAL_TOKENS, Tokenizer, VAL_ID, tokenize


class PromptMode(Enum):
    """How knowledge is combined with the serialized text."""

    SPACE = "space"
    SLASH = "slash"
    CONSTRAINED = "constrained"

    @classmethod
    def from_string(cls, value: str) -> "PromptMode":
        normalized = value.strip().lower()
        aliases = {
            "space": cls.SPACE,
            "slash": cls.SLASH,
            "/": cls.SLASH,
            "constrained": cls.CONSTRAINED,
            "constrained_tuning": cls.CONSTRAINED,
            "pct": cls.CONSTRAINED,
        }
        if normalized not in aliases:
            raise DomainError(f"unknown prompt mode {value!r}")
        return aliases[normalized]


@dataclass(frozen=True)
class InjectionSite:
    """A pending knowledge attachment: head span in the trunk + label tokens."""

    head: tuple[int, int]
    knowledge: tuple[int, ...]
    kind: str  # "column" | "entity"


@dataclass(frozen=True)
class TokenSeq:
    """Serialized tokens of one entry, with injection sites in constrained mode."""

    tokens: tuple[int, ...]
    sites: tuple[InjectionSite, ...] = ()


@dataclass(frozen=True)
class InputSequence:
    """A serialized pair: ``[CLS] left [SEP] right [SEP]`` with segment ids."""

    left: TokenSeq
    right: TokenSeq
    tokens: tuple[int, ...]
    segments: tuple[int, ...]
    sites: tuple[InjectionSite, ...]
    mode: PromptMode
    label: int | None = None


# Tokens every vocabulary must contain besides the corpus: the slash joiner
# and every label the shipped providers can emit.
def _default_label_tokens() -> set[str]:
    tokens = {"/"}
    for label in RULE_TYPE_LABELS:
        tokens.update(tokenize(label))
    for label in DITTO_GENERAL_TYPES | DITTO_PRODUCT_SOURCE_TYPES:
        tokens.update(tokenize(label))
    return tokens


def build_vocab(
    corpus: Sequence[Table],
    min_count: int = 1,
    extra_labels: Iterable[str] = (),
) -> Tokenizer:
    """Build a tokenizer over the corpus tables.

    Tokens occurring at least ``min_count`` times are kept, ordered by
    frequency (descending) then lexicographically. Knowledge labels are
    always included even when absent from the corpus.
    """
    if not corpus:
        raise DomainError("build_vocab needs a non-empty corpus")
    counts: Counter[str] = Counter()
    for table in corpus:
        for column in table.schema:
            counts.update(tokenize(column))
        for rec in table.rows:
            for _, value in rec.columns:
                counts.update(tokenize(value))

    always = _default_label_tokens()
    for label in extra_labels:
        always.update(tokenize(label))

    kept = {tok for tok, c in counts.items() if c >= min_count}
    kept.update(always)
    ordered = sorted(kept, key=lambda tok: (-counts.get(tok, 0), tok))

    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for tok in ordered:
        vocab[tok] = len(vocab)
    return Tokenizer(vocab=vocab)


def serialize_entry(
    record: Record,
    store: AnnotationStore,
    mode: PromptMode,
    tokenizer: Tokenizer,
    table: str = "tableA",
) -> TokenSeq:
    """Serialize one record to ``[COL] name [VAL] value`` tokens per column.

    Template modes splice the column type after the column name and each
    mention's type after its span (slash mode adds a "/" token in between).
    Constrained mode leaves the trunk untouched and records injection sites.
    """
    slash_id = tokenizer.encode_tokens(["/"])[0]
    tokens: list[int] = []
    sites: list[InjectionSite] = []

    for column, value in record.columns:
        tokens.append(COL_ID)
        name_start = len(tokens)
        tokens.extend(tokenizer.encode_text(column))
        name_end = len(tokens)

        ann = store.column_type(table, column)
        if ann is not None:
            know = tuple(tokenizer.encode_text(ann.predicted_type))
            if know:
                if mode is PromptMode.CONSTRAINED:
                    # A branch needs a head: skip injection on empty names.
                    if name_end > name_start:
                        sites.append(
                            InjectionSite((name_start, name_end), know, "column")
                        )
                else:
                    if mode is PromptMode.SLASH:
                        tokens.append(slash_id)
                    tokens.extend(know)

        tokens.append(VAL_ID)
        value_tokens = tokenizer.encode_text(value)
        mentions = store.mentions_for(table, record.entry_id, column)
        for m in mentions:
            if m.end > len(value_tokens):
                raise AnnotationMismatchError(
                    f"mention [{m.start},{m.end}) exceeds {len(value_tokens)} value "
                    f"tokens in table {table!r} row {record.entry_id!r} column {column!r}"
                )
        base = len(tokens)
        if mode is PromptMode.CONSTRAINED:
            tokens.extend(value_tokens)
            for m in mentions:
                know = tuple(tokenizer.encode_text(m.entity_type))
                if know:
                    sites.append(
                        InjectionSite((base + m.start, base + m.end), know, "entity")
                    )
        else:
            cursor = 0
            for m in mentions:
                tokens.extend(value_tokens[cursor : m.end])
                cursor = m.end
                know = tokenizer.encode_text(m.entity_type)
                if know:
                    if mode is PromptMode.SLASH:
                        tokens.append(slash_id)
                    tokens.extend(know)
            tokens.extend(value_tokens[cursor:])

    return TokenSeq(tokens=tuple(tokens), sites=tuple(sites))


def _value_token_indices(tokens: Sequence[int], lo: int, hi: int) -> list[int]:
    """Indices in [lo, hi) that belong to a value region (after a [VAL])."""
    out = []
    in_value = False
    for i in range(lo, hi):
        tok = tokens[i]
        if tok == VAL_ID:
            in_value = True
        elif tok == COL_ID:
            in_value = False
        elif in_value:
            out.append(i)
    return out


def serialize_pair(
    e1: Record,
    e2: Record,
    store: AnnotationStore,
    mode: PromptMode,
    tokenizer: Tokenizer,
    max_len: int,
    label: int | None = None,
    left_table: str = "tableA",
    right_table: str = "tableB",
) -> InputSequence:
    """Serialize a record pair to ``[CLS] left [SEP] right [SEP]``.

    Over-length sequences are shrunk by dropping value tokens from the tail
    of the longer side until the budget fits; markers, column names, and
    specials are never dropped. Ties shrink the left side.
    """
    if max_len < 8:
        raise DomainError(f"max_len must be >= 8, got {max_len}")
    left = serialize_entry(e1, store, mode, tokenizer, table=left_table)
    right = serialize_entry(e2, store, mode, tokenizer, table=right_table)

    tokens = [CLS_ID, *left.tokens, SEP_ID, *right.tokens, SEP_ID]
    sites = [
        InjectionSite((s.head[0] + 1, s.head[1] + 1), s.knowledge, s.kind)
        for s in left.sites
    ]
    right_base = 1 + len(left.tokens) + 1
    sites += [
        InjectionSite(
            (s.head[0] + right_base, s.head[1] + right_base), s.knowledge, s.kind
        )
        for s in right.sites
    ]

    while len(tokens) > max_len:
        first_sep = tokens.index(SEP_ID)
        left_len = first_sep - 1
        right_len = len(tokens) - first_sep - 2
        left_values = _value_token_indices(tokens, 1, first_sep)
        right_values = _value_token_indices(tokens, first_sep + 1, len(tokens) - 1)
        if left_len >= right_len:
            pool = left_values or right_values
        else:
            pool = right_values or left_values
        if not pool:
            raise SequenceOverflowError(
                f"pair cannot fit into max_len={max_len} even with all values removed"
            )
        drop = pool[-1]
        tokens.pop(drop)
        kept_sites = []
        for s in sites:
            start, end = s.head
            if start <= drop < end:
                continue  # head clipped by truncation: drop the site
            if start > drop:
                start, end = start - 1, end - 1
            kept_sites.append(InjectionSite((start, end), s.knowledge, s.kind))
        sites = kept_sites

    first_sep = tokens.index(SEP_ID)
    segments = [0] * (first_sep + 1) + [1] * (len(tokens) - first_sep - 1)
    return InputSequence(
        left=left,
        right=right,
        tokens=tuple(tokens),
        segments=tuple(segments),
        sites=tuple(sites),
        mode=mode,
        label=label,
    )


def pair_to_json(seq: InputSequence) -> dict:
    """Serialized-batch line for one pair (template modes)."""
    return {
        "tokens": list(seq.tokens),
        "segments": list(seq.segments),
        "sites": [
            {"head": list(s.head), "know": list(s.knowledge), "kind": s.kind}
            for s in seq.sites
        ],
        "label": seq.label,
    }


def write_batch_file(path: str | Path, lines: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in lines:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_batch_file(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
