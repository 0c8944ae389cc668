"""Metric-based reference-chain extraction, gold evaluation, failure triage.

Extraction scores every (utterance, image) pair of a completed round with a
pluggable scorer and links each image to its best-scoring utterance -- at most
one per round per image. The threshold policy is explicit configuration:
"top1" always links the argmax, "absolute" additionally requires the score to
clear a threshold stated on the scorer's own scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .gamedata import GameRound, ImageRef


class ChainEvaluationError(Exception):
    pass


@dataclass(frozen=True)
class ChainLink:
    game_id: str
    image_id: str
    round_index: int
    utterance_index: int  # 0-based within the round


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str = "top1"  # "top1" or "absolute"
    threshold: float = 0.0

    def admits(self, score: float) -> bool:
        if self.mode == "top1":
            return True
        if self.mode == "absolute":
            return score >= self.threshold
        raise ValueError(f"unknown threshold mode {self.mode!r}")


def extract_chains(round_: GameRound, scorer, policy: ThresholdPolicy,
                   player_id: str | None = None) -> list[ChainLink]:
    """Best-scoring utterance per image for one completed round.

    Scores all round utterances against the player's 6 context images, or
    against every distinct image in the round when no player is given.
    """
    if player_id is not None:
        images: list[ImageRef] = list(round_.view_of(player_id).context_images)
    else:
        seen = {}
        for view in round_.views:
            for img in view.context_images:
                seen.setdefault(img.image_id, img)
        images = list(seen.values())
    links = []
    for img in images:
        best_k, best_score = None, float("-inf")
        for k, utt in enumerate(round_.utterances):
            score = scorer.scalar(utt.text, img)
            if score > best_score:
                best_k, best_score = k, score
        if best_k is not None and policy.admits(best_score):
            links.append(ChainLink(game_id=round_.game_id,
                                   image_id=img.image_id,
                                   round_index=round_.round_index,
                                   utterance_index=best_k))
    return links


def extract_chains_for_rounds(rounds: Sequence[GameRound], scorer,
                              policy: ThresholdPolicy,
                              player_id: str | None = None) -> list[ChainLink]:
    links = []
    for round_ in rounds:
        links.extend(extract_chains(round_, scorer, policy, player_id))
    return links


@dataclass
class ChainEvalResult:
    precision: float
    recall: float
    correct: int
    extracted: int
    gold: int
    precision_undefined: bool = False  # nothing extracted; reported as 0


def evaluate_chains(extracted: Iterable[ChainLink],
                    gold: Iterable[ChainLink]) -> ChainEvalResult:
    extracted_set = set(extracted)
    gold_set = set(gold)
    if not gold_set:
        raise ChainEvaluationError("gold chain set is empty")
    correct = len(extracted_set & gold_set)
    if extracted_set:
        precision = correct / len(extracted_set)
        undefined = False
    else:
        precision, undefined = 0.0, True
    recall = correct / len(gold_set)
    return ChainEvalResult(precision=precision, recall=recall, correct=correct,
                           extracted=len(extracted_set), gold=len(gold_set),
                           precision_undefined=undefined)


# ---------------------------------------------------------------------------
# Failure inspection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    item_id: str
    predicted: object
    confidence: float
    context: str = ""


@dataclass(frozen=True)
class FailureEntry:
    item_id: str
    predicted: object
    gold: object
    confidence: float
    context: str


def inspect_failures(outputs: Sequence[PredictionRecord], gold: dict,
                     top_n: int) -> list[FailureEntry]:
    """Most-confident disagreements with the gold labels, for manual triage."""
    failures = [
        FailureEntry(item_id=rec.item_id, predicted=rec.predicted,
                     gold=gold[rec.item_id], confidence=rec.confidence,
                     context=rec.context)
        for rec in outputs
        if rec.item_id in gold and rec.predicted != gold[rec.item_id]]
    failures.sort(key=lambda f: -f.confidence)
    return failures[:max(top_n, 0)]


def format_failure_report(entries: Sequence[FailureEntry]) -> str:
    lines = []
    for i, e in enumerate(entries, 1):
        lines.append(f"#{i} {e.item_id} conf={e.confidence:.3f} "
                     f"pred={e.predicted} gold={e.gold}")
        if e.context:
            lines.append(f"    {e.context}")
    return "\n".join(lines) if lines else "(no disagreements)"


# ---------------------------------------------------------------------------
# Chain file IO (line-delimited records)
# ---------------------------------------------------------------------------


def write_chain_file(links: Iterable[ChainLink], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for link in links:
            fh.write(json.dumps({
                "game_id": link.game_id, "image_id": link.image_id,
                "round": link.round_index,
                "utterance_index": link.utterance_index}) + "\n")


def read_chain_file(path) -> list[ChainLink]:
    links = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            links.append(ChainLink(
                game_id=rec["game_id"], image_id=rec["image_id"],
                round_index=rec["round"],
                utterance_index=rec["utterance_index"]))
    return links


def read_gold_file(path) -> list[ChainLink]:
    """Gold files share the chain schema plus an annotator field (ignored
    beyond validation: annotations are opaque ground truth)."""
    links = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "annotator" not in rec:
                raise ChainEvaluationError(
                    f"gold record missing annotator: {rec}")
            links.append(ChainLink(
                game_id=rec["game_id"], image_id=rec["image_id"],
                round_index=rec["round"],
                utterance_index=rec["utterance_index"]))
    return links
