"""Dense-supervision training, evaluation, significance testing, ablations.

The objective sums the per-token negative log-likelihood over the 3 targets
and all (unpadded) token timesteps of an instance, then averages over the
batch. The dense-labels-off ablation is the same loss restricted to the final
token of each instance.
"""

from __future__ import annotations

import copy
import math
import statistics
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from . import features as feats
from . import textalign as ta
from .gamedata import PerspectiveInstance
from .listener import (ConditionedListener, ListenerBatch, ListenerConfig,
                       condition_matrix)


class TrainingDiverged(Exception):
    pass


# ---------------------------------------------------------------------------
# Instance preparation and batching
# ---------------------------------------------------------------------------


@dataclass
class EncodedInstance:
    instance_id: str
    theme: tuple[str, str]
    dialogue: ta.TokenizedDialogue
    relevance: np.ndarray          # (K, 6)
    labels: np.ndarray             # (3, T) int
    target_indices: tuple[int, ...]
    image_feats: np.ndarray        # (6, Dv)
    gold_final: np.ndarray         # (3,) final labels, order of target_indices
    patches: np.ndarray | None = None  # (6, 16, 16, 512) cross-attn variant

    @property
    def length(self) -> int:
        return self.dialogue.length


def prepare_instance(instance: PerspectiveInstance, tokenizer, scorer,
                     image_provider, cache: feats.FeatureCache | None = None,
                     patch_encoder=None) -> EncodedInstance:
    dialogue = ta.tokenize_and_align(instance, tokenizer)
    relevance = feats.relevance_for_dialogue(instance, scorer, cache).as_array()
    sequences = ta.build_label_sequences(instance, dialogue)
    labels = np.array([seq.labels for seq in sequences], dtype=np.int64)
    gold = np.array([seq.final for seq in sequences], dtype=np.int64)
    images = instance.view.context_images
    patches = None
    if patch_encoder is not None:
        patches = feats.patch_feature_set(images, patch_encoder, cache)
    return EncodedInstance(
        instance_id=instance.instance_id,
        theme=instance.round.theme,
        dialogue=dialogue,
        relevance=relevance,
        labels=labels,
        target_indices=instance.target_indices,
        image_feats=image_provider.image_features(images),
        gold_final=gold,
        patches=patches)


def prepare_instances(instances, tokenizer, scorer, image_provider,
                      cache=None, patch_encoder=None) -> list[EncodedInstance]:
    return [prepare_instance(i, tokenizer, scorer, image_provider, cache,
                             patch_encoder) for i in instances]


def collate(items: list[EncodedInstance], dtype=torch.float32) -> ListenerBatch:
    """Pad a list of encoded instances into one batch. Pad id is 0; padded
    positions carry zero condition rows and undecided labels but are excluded
    from attention keys and from the loss via the pad mask."""
    b = len(items)
    t_max = max(it.length for it in items)
    token_ids = torch.zeros(b, t_max, dtype=torch.long)
    cond = torch.zeros(b, t_max, 6, dtype=dtype)
    pad_mask = torch.zeros(b, t_max, dtype=torch.bool)
    labels = torch.zeros(b, 3, t_max, dtype=torch.long)
    image_feats = torch.tensor(
        np.stack([it.image_feats for it in items]), dtype=dtype)
    targets = torch.tensor([list(it.target_indices) for it in items],
                           dtype=torch.long)
    lengths = torch.tensor([it.length for it in items], dtype=torch.long)
    patches = None
    if items[0].patches is not None:
        patches = torch.tensor(np.stack([it.patches for it in items]),
                               dtype=dtype)
    for i, it in enumerate(items):
        t = it.length
        token_ids[i, :t] = torch.tensor(it.dialogue.token_ids, dtype=torch.long)
        cond[i, :t] = torch.tensor(
            condition_matrix(it.dialogue, it.relevance), dtype=dtype)
        pad_mask[i, :t] = True
        labels[i, :, :t] = torch.tensor(it.labels, dtype=torch.long)
    return ListenerBatch(token_ids=token_ids, cond=cond, pad_mask=pad_mask,
                         image_feats=image_feats, target_indices=targets,
                         labels=labels, patches=patches, lengths=lengths)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def final_token_mask(lengths: torch.Tensor, t_max: int) -> torch.Tensor:
    """(B, T) bool mask selecting only each instance's final token."""
    mask = torch.zeros(len(lengths), t_max, dtype=torch.bool)
    mask[torch.arange(len(lengths)), lengths - 1] = True
    return mask


def dense_mle_loss(beliefs: torch.Tensor, labels: torch.Tensor,
                   token_mask: torch.Tensor | None = None) -> torch.Tensor:
    """NLL of the gold label under the emitted beliefs.

    beliefs (B,3,T,3) probability simplexes, labels (B,3,T) ints; per-instance
    sum over targets and (masked) tokens, mean over the batch.
    """
    if beliefs.shape[:3] != labels.shape or beliefs.shape[-1] != 3:
        raise ValueError(
            f"shape mismatch: beliefs {tuple(beliefs.shape)} vs labels "
            f"{tuple(labels.shape)}")
    logp = torch.log(beliefs.clamp_min(1e-30))
    return _reduce_nll(logp, labels, token_mask)


def dense_mle_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor,
                               token_mask: torch.Tensor | None = None
                               ) -> torch.Tensor:
    """Numerically stable twin of dense_mle_loss for the training loop."""
    return _reduce_nll(torch.log_softmax(logits, dim=-1), labels, token_mask)


def _reduce_nll(logp, labels, token_mask):
    nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)  # (B, 3, T)
    if token_mask is not None:
        nll = nll * token_mask.unsqueeze(1).to(nll.dtype)
    return nll.sum(dim=(1, 2)).mean()


# ---------------------------------------------------------------------------
# Schedule and training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Full-run defaults; desk-scale experiments override lr and epochs."""

    peak_lr: float = 2e-5
    warmup_steps: int = 500
    weight_decay: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    dense_labels: bool = True
    grad_clip: float | None = None  # desk-scale runs clip; full runs do not
    seed: int = 0


def lr_at_step(step: int, total_steps: int, peak_lr: float,
               warmup_steps: int) -> float:
    """Linear warmup to the peak, then linear decay to zero at the last step."""
    if total_steps <= 0:
        return 0.0
    if step <= warmup_steps:
        return peak_lr * step / max(warmup_steps, 1)
    rest = max(total_steps - warmup_steps, 1)
    return peak_lr * max(total_steps - step, 0) / rest


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_accuracy: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_valid_accuracy: float
    stopped_early: bool
    total_steps: int


def _batches(items, batch_size, rng=None):
    order = list(range(len(items)))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [items[j] for j in order[i:i + batch_size]]


def train(model: ConditionedListener, train_items: list[EncodedInstance],
          valid_items: list[EncodedInstance],
          schedule: TrainConfig = TrainConfig(),
          log_every: int | None = None) -> TrainResult:
    """Optimize with decoupled weight decay under the linear warmup/decay
    schedule; early stop on validation accuracy. Restores the best weights."""
    if not train_items:
        raise ValueError("train() needs a non-empty training set")
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    shuffler = _NpShuffler(rng)
    optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.peak_lr,
                                  weight_decay=schedule.weight_decay)
    steps_per_epoch = math.ceil(len(train_items) / schedule.batch_size)
    total_steps = steps_per_epoch * schedule.max_epochs

    history: list[EpochRecord] = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    step = 0
    for epoch in range(1, schedule.max_epochs + 1):
        model.train()
        epoch_losses = []
        for batch_items in _batches(train_items, schedule.batch_size, shuffler):
            step += 1
            lr = lr_at_step(step, total_steps, schedule.peak_lr,
                            schedule.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = collate(batch_items)
            out = model(batch)
            mask = batch.pad_mask
            if not schedule.dense_labels:
                mask = mask & final_token_mask(batch.lengths,
                                               batch.token_ids.shape[1])
            loss = dense_mle_loss_from_logits(out.logits, batch.labels, mask)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"{loss.item()!r} (lr={lr:g})")
            optimizer.zero_grad()
            loss.backward()
            if schedule.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(),
                                               schedule.grad_clip)
            optimizer.step()
            epoch_losses.append(loss.item())
        report = evaluate(model, valid_items,
                          batch_size=schedule.batch_size)
        record = EpochRecord(epoch=epoch,
                             train_loss=float(np.mean(epoch_losses)),
                             valid_accuracy=report.accuracy, lr=lr)
        history.append(record)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: loss {record.train_loss:.4f} "
                  f"val acc {record.valid_accuracy:.3f}")
        if report.accuracy > best_acc:
            best_acc, best_epoch = report.accuracy, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= schedule.patience:
            model.load_state_dict(best_state)
            return TrainResult(history, best_epoch, best_acc, True, step)
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_acc, False, step)


class _NpShuffler:
    """random.shuffle-compatible adapter over a numpy Generator."""

    def __init__(self, rng):
        self.rng = rng

    def shuffle(self, seq):
        self.rng.shuffle(seq)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class InstanceEval:
    instance_id: str
    theme: tuple[str, str]
    correct: tuple[bool, ...]      # per target, in target_indices order
    predictions: tuple[int, ...]   # argmax labels at t = T
    gold: tuple[int, ...]

    @property
    def all_correct(self) -> bool:
        return all(self.correct)


@dataclass
class EvalReport:
    accuracy: float
    items: list[InstanceEval]
    correctness: np.ndarray  # flat per (instance, target), instance-major

    @property
    def all_correct_count(self) -> int:
        return sum(1 for it in self.items if it.all_correct)

    @property
    def num_instances(self) -> int:
        return len(self.items)


def evaluate(model: ConditionedListener, items: list[EncodedInstance],
             batch_size: int = 16) -> EvalReport:
    """End-of-dialogue accuracy over (instance, target) pairs; temporary
    beliefs are ignored."""
    model.eval()
    evals: list[InstanceEval] = []
    flat: list[bool] = []
    with torch.no_grad():
        for batch_items in _batches(items, batch_size):
            batch = collate(batch_items)
            out = model(batch)
            for i, item in enumerate(batch_items):
                t_last = item.length - 1
                pred = out.beliefs[i, :, t_last].argmax(dim=-1).numpy()
                correct = tuple(bool(p == g) for p, g in
                                zip(pred, item.gold_final))
                evals.append(InstanceEval(
                    instance_id=item.instance_id, theme=item.theme,
                    correct=correct, predictions=tuple(int(p) for p in pred),
                    gold=tuple(int(g) for g in item.gold_final)))
                flat.extend(correct)
    correctness = np.array(flat, dtype=bool)
    accuracy = float(correctness.mean()) if len(correctness) else 0.0
    return EvalReport(accuracy=accuracy, items=evals, correctness=correctness)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def gradient_check(model: ConditionedListener, batch: ListenerBatch,
                   parameter_names: Sequence[str], probes: int = 20,
                   eps: float = 1e-5, seed: int = 0) -> float:
    """Compare autograd gradients against central finite differences.

    Runs in float64. Probes ``probes`` random scalar coordinates across the
    named parameters and returns the worst relative error.
    """
    model = copy.deepcopy(model).double()
    batch = batch.to_dtype(torch.float64)
    params = dict(model.named_parameters())
    chosen = [params[name] for name in parameter_names]

    def loss_value() -> torch.Tensor:
        out = model(batch)
        return dense_mle_loss_from_logits(out.logits, batch.labels,
                                          batch.pad_mask)

    model.zero_grad()
    loss_value().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        p = chosen[rng.integers(len(chosen))]
        flat_index = int(rng.integers(p.numel()))
        grad = p.grad.reshape(-1)[flat_index].item()
        with torch.no_grad():
            original = p.reshape(-1)[flat_index].item()
            p.reshape(-1)[flat_index] = original + eps
            up = loss_value().item()
            p.reshape(-1)[flat_index] = original - eps
            down = loss_value().item()
            p.reshape(-1)[flat_index] = original
        fd = (up - down) / (2 * eps)
        rel = abs(fd - grad) / max(abs(fd), abs(grad), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Paired bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    p_value: float
    observed_diff: float
    resamples: int


def bootstrap_compare(results_a, results_b, resamples: int = 10_000,
                      seed: int = 0) -> BootstrapResult:
    """Two-sided paired bootstrap over per-item correctness vectors."""
    a = np.asarray(results_a, dtype=np.float64)
    b = np.asarray(results_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired vectors must match: {a.shape} vs {b.shape}")
    diff = a - b
    n = len(diff)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    deltas = diff[idx].mean(axis=1)
    p = 2.0 * min(float(np.mean(deltas <= 0)), float(np.mean(deltas >= 0)))
    return BootstrapResult(p_value=min(p, 1.0),
                           observed_diff=float(diff.mean()),
                           resamples=resamples)


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    name: str
    model_config: ListenerConfig
    schedule: TrainConfig = TrainConfig()
    split_policy: str = "theme-disjoint"  # repartition-I/P run on their splits


@dataclass
class AblationRow:
    name: str
    seed: int
    valid_accuracy: float | None
    test_accuracy: float | None
    error: str | None = None


def run_ablation_suite(specs: list[AblationSpec], make_model, data,
                       seeds=(0, 1, 2)) -> list[AblationRow]:
    """Train/evaluate every (config, seed) cell; failures are recorded and the
    suite continues. ``data`` is (train_items, valid_items, test_items), or a
    mapping from split policy to such a tuple when the grid mixes
    repartitioned splits; ``make_model`` builds a model from (spec, seed)."""
    rows = []
    for spec in specs:
        if isinstance(data, dict):
            if spec.split_policy not in data:
                rows.extend(AblationRow(spec.name, seed, None, None,
                                        error=f"no data for policy "
                                              f"{spec.split_policy!r}")
                            for seed in seeds)
                continue
            train_items, valid_items, test_items = data[spec.split_policy]
        else:
            train_items, valid_items, test_items = data
        for seed in seeds:
            try:
                model = make_model(spec, seed)
                schedule = replace(spec.schedule, seed=seed)
                train(model, train_items, valid_items, schedule)
                val = evaluate(model, valid_items).accuracy
                test = evaluate(model, test_items).accuracy
                rows.append(AblationRow(spec.name, seed, val, test))
            except Exception as exc:  # run failure must not kill the suite
                rows.append(AblationRow(spec.name, seed, None, None,
                                        error=f"{type(exc).__name__}: {exc}"))
    return rows


def aggregate_rows(rows: list[AblationRow]) -> list[dict]:
    by_name: dict[str, list[AblationRow]] = {}
    for row in rows:
        by_name.setdefault(row.name, []).append(row)
    out = []
    for name, group in by_name.items():
        ok = [r for r in group if r.error is None]
        entry = {"name": name, "runs": len(group), "failures": len(group) - len(ok)}
        for split in ("valid", "test"):
            vals = [getattr(r, f"{split}_accuracy") for r in ok]
            if vals:
                entry[f"{split}_mean"] = statistics.fmean(vals)
                entry[f"{split}_std"] = (statistics.stdev(vals)
                                         if len(vals) > 1 else 0.0)
        out.append(entry)
    return out


def format_results_table(rows: list[AblationRow]) -> str:
    """Aggregated mean +/- stdev per config, tab-delimited."""
    lines = ["name\truns\tfailures\tvalid\ttest"]
    for entry in aggregate_rows(rows):
        valid = (f"{entry.get('valid_mean', float('nan')):.3f}"
                 f"+/-{entry.get('valid_std', float('nan')):.3f}"
                 if "valid_mean" in entry else "-")
        test = (f"{entry.get('test_mean', float('nan')):.3f}"
                f"+/-{entry.get('test_std', float('nan')):.3f}"
                if "test_mean" in entry else "-")
        lines.append(f"{entry['name']}\t{entry['runs']}\t{entry['failures']}"
                     f"\t{valid}\t{test}")
    return "\n".join(lines)
