"""Training orchestration: Adam updates, pre-training and fine-tuning
epochs, early stopping on the CER - AUC metric, and checkpointing.

Augmented training copies are derived deterministically from
(seed, epoch, utterance id, variant), so a fixed seed reproduces the
parameter trajectory bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .frontend import (
    FeatureMatrix,
    FrontendConfig,
    extract_lfbe,
    normalize_per_utterance,
    read_wav,
    spec_augment,
    speed_perturb,
    stack_and_skip,
)
from .manifest import UtteranceRecord
from .metrics import (
    EvalReport,
    auc_ovr,
    edit_distance,
    greedy_decode,
    weighted_average_recall,
)
from .network import (
    EncoderConfig,
    ParameterStore,
    RegressorConfig,
    SentimentHeadConfig,
    encoder_forward,
    load_params,
    regressor_forward,
    save_params,
    sentiment_head_forward,
    token_head_forward,
)
from .objectives import ccc, ccc_loss, ctc_loss, global_loss, min_frames_for_target, sentiment_ce
from .tokens import encode_text

logger = logging.getLogger("sa2sr.trainer")


@dataclass
class TrainRunConfig:
    batch_size: int
    mode: str = "pretrain"
    lam: float = 200.0
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 25
    max_epochs: int = 100
    seed: int = 0
    freeze_encoder: bool = False
    augment: bool = True

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}/{self.beta2}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class ModelConfigs:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sentiment: SentimentHeadConfig = field(default_factory=SentimentHeadConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)


@dataclass
class EpochRecord:
    epoch: int
    train_losses: dict[str, float]
    validation: EvalReport
    wall_time: float

    def to_dict(self, include_wall_time: bool = True) -> dict:
        out = {
            "epoch": self.epoch,
            "train_losses": {k: self.train_losses[k] for k in sorted(self.train_losses)},
            "validation": self.validation.to_dict(),
        }
        if include_wall_time:
            out["wall_time"] = self.wall_time
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        return cls(
            epoch=d["epoch"],
            train_losses=dict(d["train_losses"]),
            validation=EvalReport.from_dict(d["validation"]),
            wall_time=d.get("wall_time", 0.0),
        )


class Adam:
    """Adam with bias correction; frozen parameters are never touched and
    gradients are cleared after each step.
    """

    def __init__(self, store: ParameterStore, cfg: TrainRunConfig):
        self.store = store
        self.cfg = cfg
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self) -> None:
        cfg = self.cfg
        self._t += 1
        bias1 = 1.0 - cfg.beta1**self._t
        bias2 = 1.0 - cfg.beta2**self._t
        for name, p in self.store.trainable_items():
            if p.grad is None:
                raise ValueError(f"missing gradient on trainable parameter {name}")
            g = p.grad
            m = self._m.setdefault(name, np.zeros_like(p.values))
            v = self._v.setdefault(name, np.zeros_like(p.values))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.values -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
            p.grad = None


def early_stop(metric_history, patience: int) -> tuple[bool, int]:
    """Stop once the best (lowest) metric is older than ``patience`` epochs.

    Returns (stop, best_epoch) with 1-based epochs; ties keep the earliest.
    """
    values = list(metric_history)
    if not values:
        raise ValueError("early_stop: empty history")
    best_epoch = int(np.argmin(values)) + 1
    return len(values) - best_epoch >= patience, best_epoch


def apply_mode_freezing(store: ParameterStore, cfg: TrainRunConfig) -> None:
    """Restrict updates to the subsystems the mode actually trains."""
    if cfg.mode == "pretrain":
        store.freeze("regressor.")
    else:
        store.freeze("token.")
        store.freeze("sentiment.")
        if cfg.freeze_encoder:
            store.freeze("encoder.")


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PretrainUtterance:
    uid: int
    tokens: list[int]
    label: int
    variants: list[FeatureMatrix]  # normalized, unstacked; [0] is unperturbed


@dataclass
class EvalUtterance:
    uid: int
    feats: FeatureMatrix  # normalized, stacked
    tokens: list[int] | None = None
    transcript: str | None = None
    label: int | None = None
    avd: np.ndarray | None = None


def _normalized_lfbe(wave, fcfg: FrontendConfig) -> FeatureMatrix:
    return normalize_per_utterance(extract_lfbe(wave, fcfg))


def _stacked(feats: FeatureMatrix, fcfg: FrontendConfig) -> FeatureMatrix:
    return stack_and_skip(feats, fcfg.stack, fcfg.skip)


def prepare_pretrain_utterances(
    records: list[UtteranceRecord], fcfg: FrontendConfig, augment: bool
) -> list[PretrainUtterance]:
    out = []
    for rec in records:
        wave = read_wav(rec.audio_path)
        variants = [_normalized_lfbe(wave, fcfg)]
        if augment:
            for factor in fcfg.speed_factors:
                variants.append(_normalized_lfbe(speed_perturb(wave, factor), fcfg))
        out.append(
            PretrainUtterance(
                uid=rec.uid,
                tokens=encode_text(rec.transcript or ""),
                label=rec.sentiment_index,
                variants=variants,
            )
        )
    return out


def prepare_eval_utterances(
    records: list[UtteranceRecord], fcfg: FrontendConfig
) -> list[EvalUtterance]:
    out = []
    for rec in records:
        feats = _stacked(_normalized_lfbe(read_wav(rec.audio_path), fcfg), fcfg)
        out.append(
            EvalUtterance(
                uid=rec.uid,
                feats=feats,
                tokens=None if rec.transcript is None else encode_text(rec.transcript),
                transcript=rec.transcript,
                label=None if rec.sentiment is None else rec.sentiment_index,
                avd=None if rec.avd is None else np.asarray(rec.avd),
            )
        )
    return out


def _augmentation_seed(seed: int, epoch: int, uid: int, variant: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, uid, variant]).generate_state(1)[0])


def _pad_to(feats: FeatureMatrix, length: int) -> FeatureMatrix:
    if feats.num_frames == length:
        return feats
    extra = length - feats.num_frames
    frames = np.vstack([feats.frames, np.zeros((extra, feats.num_channels))])
    mask = np.concatenate([feats.mask, np.zeros(extra, dtype=bool)])
    return FeatureMatrix(frames, mask, feats.frame_shift_ms, dict(feats.meta))


def _batched(examples: list, batch_size: int, rng: np.random.Generator) -> list[list]:
    """Length-sorted buckets of batch_size, visited in shuffled order."""
    buckets = [
        examples[i : i + batch_size] for i in range(0, len(examples), batch_size)
    ]
    return [buckets[i] for i in rng.permutation(len(buckets))]


def _mean(terms: list) -> ad.DiffArray:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(ad.constant(1.0 / len(terms)), total)


# ---------------------------------------------------------------------------
# pre-training


def pretrain_epoch(
    train: list[PretrainUtterance],
    store: ParameterStore,
    optimizer: Adam,
    cfg: TrainRunConfig,
    model: ModelConfigs,
    epoch: int,
) -> dict[str, float]:
    """One shuffled pass minimizing batch-mean CTC + lambda * batch-mean CE."""
    fcfg = model.frontend
    examples = []
    for utt in train:
        for k, variant in enumerate(utt.variants):
            feats = variant
            if cfg.augment:
                feats = spec_augment(
                    feats, fcfg, _augmentation_seed(cfg.seed, epoch, utt.uid, k)
                )
            feats = _stacked(feats, fcfg)
            examples.append((feats, utt))
    examples.sort(key=lambda e: (e[0].num_frames, e[1].uid))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 7]))
    sums = {"total": 0.0, "asr": 0.0, "sentiment": 0.0}
    count = 0
    for batch in _batched(examples, cfg.batch_size, rng):
        longest = max(feats.num_frames for feats, _ in batch)
        with Tape() as tape:
            asr_terms, ce_terms = [], []
            for feats, utt in batch:
                valid = int(feats.mask.sum())
                if valid < min_frames_for_target(utt.tokens):
                    logger.warning(
                        "skipping utterance %d: %d frames cannot align %d labels",
                        utt.uid, valid, len(utt.tokens),
                    )
                    continue
                padded = _pad_to(feats, longest)
                encoding, mask = encoder_forward(padded, store, model.encoder)
                log_probs = token_head_forward(encoding, store)
                asr_terms.append(ctc_loss(log_probs, utt.tokens, mask))
                class_lp = sentiment_head_forward(encoding, mask, store, model.sentiment)
                ce_terms.append(sentiment_ce(class_lp, utt.label))
            if not asr_terms:
                continue
            loss = global_loss(_mean(asr_terms), _mean(ce_terms), cfg.lam)
            backward(tape, loss.total)
        optimizer.step()
        n = len(asr_terms)
        sums["total"] += float(loss.total.values) * n
        sums["asr"] += loss.components["asr"] * n
        sums["sentiment"] += loss.components["sentiment"] * n
        count += n
    if count == 0:
        raise ValueError("pretrain_epoch: no trainable utterance survived alignment checks")
    return {k: v / count for k, v in sums.items()}


def evaluate_pretrain(
    utts: list[EvalUtterance], store: ParameterStore, model: ModelConfigs
) -> EvalReport:
    """Corpus-level CER from greedy decoding plus sentiment AUC and WAR."""
    distance = 0
    ref_len = 0
    scores, labels = [], []
    for utt in utts:
        encoding, mask = encoder_forward(utt.feats, store, model.encoder)
        log_probs = token_head_forward(encoding, store)
        hyp = greedy_decode(log_probs.values[mask])
        ref = utt.transcript or ""
        distance += edit_distance(ref, hyp)
        ref_len += len(ref)
        class_lp = sentiment_head_forward(encoding, mask, store, model.sentiment)
        scores.append(np.exp(class_lp.values))
        labels.append(utt.label)
    if ref_len == 0:
        raise ValueError("cer: empty reference")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return EvalReport(
        cer=distance / ref_len,
        auc=auc_ovr(scores, labels),
        war=weighted_average_recall(scores.argmax(axis=1), labels),
    )


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_epoch(
    train: list[EvalUtterance],
    store: ParameterStore,
    optimizer: Adam,
    cfg: TrainRunConfig,
    model: ModelConfigs,
    epoch: int,
) -> dict[str, float]:
    """One shuffled pass minimizing the per-batch CCC loss."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 11]))
    order = rng.permutation(len(train))
    examples = [train[i] for i in order]
    sums = {"total": 0.0, "ccc_a": 0.0, "ccc_v": 0.0, "ccc_d": 0.0}
    count = 0
    for i in range(0, len(examples), cfg.batch_size):
        batch = examples[i : i + cfg.batch_size]
        if len(batch) < 2:
            logger.debug("dropping batch of size %d: CCC undefined", len(batch))
            continue
        with Tape() as tape:
            preds = []
            for utt in batch:
                encoding, mask = encoder_forward(utt.feats, store, model.encoder)
                preds.append(regressor_forward(encoding, mask, store, model.regressor))
            targets = np.stack([utt.avd for utt in batch])
            loss = ccc_loss(ad.stack_rows(preds), targets)
            backward(tape, loss.total)
        optimizer.step()
        n = len(batch)
        sums["total"] += float(loss.total.values) * n
        for k in ("ccc_a", "ccc_v", "ccc_d"):
            sums[k] += loss.components[k] * n
        count += n
    if count == 0:
        raise ValueError("finetune_epoch: every batch was smaller than 2")
    return {k: v / count for k, v in sums.items()}


def evaluate_finetune(
    utts: list[EvalUtterance], store: ParameterStore, model: ModelConfigs
) -> EvalReport:
    """Per-dimension CCC over the whole evaluation set."""
    preds, targets = [], []
    for utt in utts:
        encoding, mask = encoder_forward(utt.feats, store, model.encoder)
        preds.append(regressor_forward(encoding, mask, store, model.regressor).values)
        targets.append(utt.avd)
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    triple = tuple(
        float(ccc(targets[:, d], preds[:, d]).values) for d in range(3)
    )
    return EvalReport(ccc_avd=triple)


# ---------------------------------------------------------------------------
# checkpoints and run loops


def save_checkpoint(
    params: ParameterStore, record: EpochRecord | None, path, config: dict | None = None
) -> None:
    meta = {
        "record": None if record is None else record.to_dict(include_wall_time=False),
        "config": config or {},
    }
    save_params(params, path, meta)


def load_checkpoint(path) -> tuple[ParameterStore, EpochRecord | None, dict]:
    store, meta = load_params(path)
    raw = meta.get("record")
    record = None if raw is None else EpochRecord.from_dict(raw)
    return store, record, meta


def _append_history(out_dir: Path, record: EpochRecord) -> None:
    with open(out_dir / "history.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


@dataclass
class RunResult:
    history: list[EpochRecord]
    best_epoch: int

    @property
    def best_record(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]


def _run_loop(
    epoch_fn,
    eval_fn,
    metric_fn,
    store: ParameterStore,
    cfg: TrainRunConfig,
    out_dir: Path | None,
    config_echo: dict | None,
) -> RunResult:
    optimizer = Adam(store, cfg)
    history: list[EpochRecord] = []
    metrics: list[float] = []
    best_epoch = 1
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        losses = epoch_fn(optimizer, epoch)
        report = eval_fn()
        record = EpochRecord(epoch, losses, report, time.perf_counter() - start)
        history.append(record)
        metrics.append(metric_fn(report))
        stop, best_epoch = early_stop(metrics, cfg.patience)
        if out_dir is not None:
            _append_history(out_dir, record)
            save_checkpoint(store, record, out_dir / "checkpoint_last.sa2s", config_echo)
            if best_epoch == epoch:
                save_checkpoint(store, record, out_dir / "checkpoint_best.sa2s", config_echo)
        logger.info(
            "epoch %d: %s, metric %.5f (best epoch %d)",
            epoch, losses, metrics[-1], best_epoch,
        )
        if stop:
            break
    return RunResult(history, best_epoch)


def run_pretraining(
    train: list[PretrainUtterance],
    validation: list[EvalUtterance],
    store: ParameterStore,
    cfg: TrainRunConfig,
    model: ModelConfigs,
    out_dir=None,
    config_echo: dict | None = None,
) -> RunResult:
    """Minimize the global loss; stop on CER - AUC (CER alone at lambda=0)."""
    apply_mode_freezing(store, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None

    def metric(report: EvalReport) -> float:
        return report.cer if cfg.lam == 0 else report.stopping_metric

    return _run_loop(
        lambda opt, epoch: pretrain_epoch(train, store, opt, cfg, model, epoch),
        lambda: evaluate_pretrain(validation, store, model),
        metric,
        store,
        cfg,
        out_dir,
        config_echo,
    )


def run_finetuning(
    train: list[EvalUtterance],
    validation: list[EvalUtterance],
    store: ParameterStore,
    cfg: TrainRunConfig,
    model: ModelConfigs,
    out_dir=None,
    config_echo: dict | None = None,
) -> RunResult:
    """Minimize the CCC loss; stop on negative mean validation CCC."""
    apply_mode_freezing(store, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None

    def metric(report: EvalReport) -> float:
        return -float(np.mean(report.ccc_avd))

    return _run_loop(
        lambda opt, epoch: finetune_epoch(train, store, opt, cfg, model, epoch),
        lambda: evaluate_finetune(validation, store, model),
        metric,
        store,
        cfg,
        out_dir,
        config_echo,
    )
