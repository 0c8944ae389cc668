"""Utterance concatenation, token spans, and dense per-token label sequences.

All token/utterance indices are 0-based; spans are half-open ``(start, end)``.
Each utterance's span begins with exactly one speaker-marker token ([CLS] for
the perspective owner, [SEP] for the partner) and the marker shares the
utterance's labels.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

from .gamedata import Mark, MarkAction, PerspectiveInstance

UNDECIDED, COMMON, DIFFERENT = 0, 1, 2
LABEL_NAMES = ("undecided", "common", "different")

PAD_ID = 0
SELF_MARKER_ID = 1
PARTNER_MARKER_ID = 2
SELF_MARKER = "[CLS]"
PARTNER_MARKER = "[SEP]"
NUM_RESERVED_IDS = 3

_WORD_RE = re.compile(r"[\w']+")


class AlignmentError(Exception):
    pass


class LabelIntegrityError(Exception):
    pass


class TokenizerHandle(Protocol):
    """Deterministic text -> token-id mapping with reserved pad/marker ids."""

    vocab_size: int

    def encode_words(self, text: str) -> tuple[list[int], list[str]]: ...


@dataclass(frozen=True)
class HashWordTokenizer:
    """Vocabulary-free word tokenizer: stable hash of each word into id space.

    Deterministic across processes (hashing is keyed on the word bytes only),
    lossless at word granularity, safe for concurrent read-only use.
    """

    vocab_size: int = 2048
    lowercase: bool = True

    def __post_init__(self):
        if self.vocab_size <= NUM_RESERVED_IDS:
            raise ValueError("vocab_size must exceed the reserved id range")

    def word_id(self, word: str) -> int:
        if self.lowercase:
            word = word.lower()
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return NUM_RESERVED_IDS + int.from_bytes(digest, "big") % (
            self.vocab_size - NUM_RESERVED_IDS)

    def encode_words(self, text: str) -> tuple[list[int], list[str]]:
        words = _WORD_RE.findall(text)
        return [self.word_id(w) for w in words], words

    def spec(self) -> dict:
        return {"type": "hash-word", "vocab_size": self.vocab_size,
                "lowercase": self.lowercase}


def tokenizer_from_spec(spec: dict) -> HashWordTokenizer:
    if spec.get("type") != "hash-word":
        raise ValueError(f"unknown tokenizer spec {spec!r}")
    return HashWordTokenizer(vocab_size=spec["vocab_size"],
                             lowercase=spec.get("lowercase", True))


@dataclass(frozen=True)
class TokenizedDialogue:
    token_ids: tuple[int, ...]
    token_texts: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]  # half-open, one per utterance
    speaker_marker_positions: tuple[int, ...]
    is_self: tuple[bool, ...]  # per utterance

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def num_utterances(self) -> int:
        return len(self.spans)

    def utterance_of_token(self, t: int) -> int:
        for k, (s, e) in enumerate(self.spans):
            if s <= t < e:
                return k
        raise IndexError(t)


@dataclass(frozen=True)
class LabelSequence:
    target_index: int
    labels: tuple[int, ...]
    clamped: bool = False  # a post-final mark was clamped to the last token

    @property
    def final(self) -> int:
        return self.labels[-1]


def append_utterance(token_ids: list[int], token_texts: list[str],
                     spans: list[tuple[int, int]], markers: list[int],
                     self_flags: list[bool], tokenizer: TokenizerHandle,
                     text: str, is_self: bool) -> None:
    """Append one utterance (marker + words) to a growing dialogue in place."""
    word_ids, words = tokenizer.encode_words(text)
    if not words:
        raise AlignmentError(f"utterance has no tokens: {text!r}")
    start = len(token_ids)
    markers.append(start)
    token_ids.append(SELF_MARKER_ID if is_self else PARTNER_MARKER_ID)
    token_texts.append(SELF_MARKER if is_self else PARTNER_MARKER)
    token_ids.extend(word_ids)
    token_texts.extend(words)
    spans.append((start, len(token_ids)))
    self_flags.append(is_self)


def tokenize_and_align(instance: PerspectiveInstance,
                       tokenizer: TokenizerHandle) -> TokenizedDialogue:
    """Concatenate the round's utterances with speaker markers, per-utterance spans."""
    if not instance.utterances:
        raise AlignmentError(f"instance {instance.instance_id} has no utterances")
    token_ids: list[int] = []
    token_texts: list[str] = []
    spans: list[tuple[int, int]] = []
    markers: list[int] = []
    self_flags: list[bool] = []
    for utt in instance.utterances:
        append_utterance(token_ids, token_texts, spans, markers, self_flags,
                         tokenizer, utt.text, utt.speaker_id == instance.self_id)
    return TokenizedDialogue(
        token_ids=tuple(token_ids), token_texts=tuple(token_texts),
        spans=tuple(spans), speaker_marker_positions=tuple(markers),
        is_self=tuple(self_flags))


def mark_to_label(mark: Mark) -> int:
    return COMMON if mark is Mark.COMMON else DIFFERENT


def flip_token_for(mark: MarkAction, spans: Sequence[tuple[int, int]]) -> int:
    """First token index at which the mark is observable.

    A mark snapped after utterance k (1-based position) flips labels starting
    at the first token after that utterance's span.
    """
    if mark.position <= 0:
        raise LabelIntegrityError("mark precedes the first utterance")
    if mark.position > len(spans):
        raise LabelIntegrityError(
            f"mark position {mark.position} beyond {len(spans)} utterances")
    return spans[mark.position - 1][1]


def build_label_sequences(instance: PerspectiveInstance,
                          dialogue: TokenizedDialogue) -> list[LabelSequence]:
    """Dense labels for the 3 targets: undecided until the own-mark flip token.

    A mark after the final utterance would flip past the end; it is clamped to
    the final token and flagged so end-of-dialogue gold labels survive.
    """
    total = dialogue.length
    sequences = []
    marks_by_target: dict[int, list[MarkAction]] = {
        j: [] for j in instance.target_indices}
    for m in instance.own_marks():
        marks_by_target[m.image_index].append(m)
    for j in instance.target_indices:
        labels = [UNDECIDED] * total
        clamped = False
        for m in marks_by_target[j]:
            flip = flip_token_for(m, dialogue.spans)
            if flip >= total:
                flip = total - 1
                clamped = True
            value = mark_to_label(m.mark)
            for t in range(flip, total):
                labels[t] = value
        sequences.append(LabelSequence(target_index=j, labels=tuple(labels),
                                       clamped=clamped))
    return sequences


def end_of_dialogue_labels(sequences: Sequence[LabelSequence]) -> dict[int, int]:
    """Final label per target; undecided at the end violates upstream filtering."""
    out = {}
    for seq in sequences:
        if seq.final == UNDECIDED:
            raise LabelIntegrityError(
                f"target {seq.target_index} undecided at end of dialogue")
        out[seq.target_index] = seq.final
    return out


def trace_lines(instance: PerspectiveInstance, dialogue: TokenizedDialogue,
                sequences: Sequence[LabelSequence]) -> list[str]:
    """Human-readable token/label columns for the trace CLI."""
    header = "t     token            " + "".join(
        f"tgt{seq.target_index:<8}" for seq in sequences)
    lines = [header]
    for t in range(dialogue.length):
        cols = "".join(
            f"{LABEL_NAMES[seq.labels[t]]:<11}" for seq in sequences)
        lines.append(f"{t:<5} {dialogue.token_texts[t]:<16} {cols}")
    return lines
