"""Command-line workbench.

Subcommands: gen-synth, extract-features, pretrain, finetune, evaluate,
analyze-correlation.  Every command writes its artifacts under --out
(plus an effective-config echo) and exits nonzero on any error.

The SA2SR_SEED environment variable supplies the default seed; --seed
overrides it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgmod
from . import metrics, synth, trainer
from .frontend import FrontendConfig, extract_lfbe, normalize_per_utterance, read_wav, save_features
from .manifest import load_manifest
from .network import EncoderConfig, RegressorConfig, SentimentHeadConfig, init_parameters
from .trainer import ModelConfigs, TrainRunConfig, load_checkpoint

logger = logging.getLogger("sa2sr.cli")


def _default_seed() -> int:
    return int(os.environ.get("SA2SR_SEED", "0"))


# typed key registries for the config-file / flag layering
_COMMON_MODEL_KEYS = {
    "encoder_layers": int,
    "encoder_hidden": int,
    "summarizer_hidden": int,
    "conv_channels": int,
    "attn_heads": int,
    "attn_dim": int,
    "seed": int,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "lr": float,
    "manifest": str,
}

PRETRAIN_KEYS = {**_COMMON_MODEL_KEYS, "lambda": float, "augment": bool}
FINETUNE_KEYS = {**_COMMON_MODEL_KEYS, "freeze_encoder": bool, "init": str}


def _pretrain_defaults() -> dict:
    return {
        "encoder_layers": 5,
        "encoder_hidden": 192,
        "summarizer_hidden": 192,
        "conv_channels": 64,
        "attn_heads": 4,
        "attn_dim": 64,
        "seed": _default_seed(),
        "batch_size": 8,
        "max_epochs": 100,
        "patience": 25,
        "lr": 5e-5,
        "manifest": None,
        "lambda": 200.0,
        "augment": True,
    }


def _finetune_defaults() -> dict:
    out = _pretrain_defaults()
    del out["lambda"], out["augment"]
    out.update({"freeze_encoder": False, "init": None})
    return out


def _effective(args, keys: dict[str, type], defaults: dict) -> dict:
    file_values = cfgmod.parse_kv_file(args.config) if args.config else {}
    flag_values = {k: getattr(args, k, None) for k in keys}
    eff = cfgmod.layered(defaults, file_values, flag_values, keys)
    if eff.get("manifest") is None:
        raise ValueError("a manifest is required (flag --manifest or config key)")
    return eff


def _model_configs(eff: dict) -> ModelConfigs:
    return ModelConfigs(
        encoder=EncoderConfig(
            layers=eff["encoder_layers"], hidden=eff["encoder_hidden"], input_dim=120
        ),
        sentiment=SentimentHeadConfig(summarizer_hidden=eff["summarizer_hidden"]),
        regressor=RegressorConfig(
            conv_channels=eff["conv_channels"],
            attn_heads=eff["attn_heads"],
            attn_dim=eff["attn_dim"],
        ),
        frontend=FrontendConfig(),
    )


def _echo_config(out_dir: Path, eff: dict) -> None:
    printable = {k: v for k, v in eff.items() if v is not None}
    cfgmod.write_kv(out_dir / "config.txt", printable)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    out_dir = Path(args.out)
    seed = args.seed if args.seed is not None else _default_seed()
    manifest = synth.generate_synthetic(args.kind, args.count, seed, out_dir)
    _echo_config(out_dir, {"kind": args.kind, "count": args.count, "seed": seed})
    print(f"wrote {args.count} utterances, manifest at {manifest}")
    return 0


def cmd_extract_features(args) -> int:
    split = load_manifest(args.manifest, mode=args.mode)
    out_dir = Path(args.out)
    fcfg = FrontendConfig()

    def run_one(rec) -> Path:
        feats = normalize_per_utterance(extract_lfbe(read_wav(rec.audio_path), fcfg))
        target = out_dir / "features" / rec.split / (rec.audio_path.stem + ".lfbe")
        target.parent.mkdir(parents=True, exist_ok=True)
        save_features(feats, target)
        return target

    records = split.all_records()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        written = list(pool.map(run_one, records))
    _echo_config(out_dir, {"manifest": args.manifest, "mode": args.mode, "jobs": args.jobs})
    print(f"extracted {len(written)} feature blobs under {out_dir / 'features'}")
    return 0


def cmd_pretrain(args) -> int:
    eff = _effective(args, PRETRAIN_KEYS, _pretrain_defaults())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, eff)
    model = _model_configs(eff)
    run_cfg = TrainRunConfig(
        batch_size=eff["batch_size"],
        mode="pretrain",
        lam=eff["lambda"],
        lr=eff["lr"],
        patience=eff["patience"],
        max_epochs=eff["max_epochs"],
        seed=eff["seed"],
        augment=eff["augment"],
    )
    split = load_manifest(eff["manifest"], mode="pretrain")
    train = trainer.prepare_pretrain_utterances(split.train, model.frontend, run_cfg.augment)
    validation = trainer.prepare_eval_utterances(split.validation, model.frontend)
    store = init_parameters(eff["seed"], model.encoder, model.sentiment, model.regressor)
    result = trainer.run_pretraining(
        train, validation, store, run_cfg, model, out_dir, config_echo=eff
    )
    best = result.best_record
    print(
        f"pretraining done: {len(result.history)} epochs, best epoch {result.best_epoch} "
        f"(CER {best.validation.cer:.4f}, AUC {best.validation.auc:.4f}, "
        f"M {best.validation.stopping_metric:.4f})"
    )
    return 0


def cmd_finetune(args) -> int:
    eff = _effective(args, FINETUNE_KEYS, _finetune_defaults())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, eff)
    model = _model_configs(eff)
    run_cfg = TrainRunConfig(
        batch_size=eff["batch_size"],
        mode="finetune",
        lr=eff["lr"],
        patience=eff["patience"],
        max_epochs=eff["max_epochs"],
        seed=eff["seed"],
        freeze_encoder=eff["freeze_encoder"],
    )
    split = load_manifest(eff["manifest"], mode="finetune")
    train = trainer.prepare_eval_utterances(split.train, model.frontend)
    validation = trainer.prepare_eval_utterances(split.validation, model.frontend)
    store = init_parameters(eff["seed"], model.encoder, model.sentiment, model.regressor)
    if eff["init"]:
        pre_store, _, _ = load_checkpoint(eff["init"])
        copied = 0
        for name, p in pre_store.items():
            if name.startswith("encoder.") and name in store:
                if store[name].values.shape != p.values.shape:
                    raise ValueError(
                        f"checkpoint {eff['init']}: shape mismatch for {name}; "
                        "pass matching --encoder-layers/--encoder-hidden"
                    )
                store[name].values[...] = p.values
                copied += 1
        logger.info("loaded %d encoder arrays from %s", copied, eff["init"])
    result = trainer.run_finetuning(
        train, validation, store, run_cfg, model, out_dir, config_echo=eff
    )
    ccc_a, ccc_v, ccc_d = result.best_record.validation.ccc_avd
    print(
        f"fine-tuning done: {len(result.history)} epochs, best epoch {result.best_epoch} "
        f"(CCC A {ccc_a:.4f}, V {ccc_v:.4f}, D {ccc_d:.4f})"
    )
    return 0


def cmd_evaluate(args) -> int:
    store, _, meta = load_checkpoint(args.checkpoint)
    conf = meta.get("config", {})
    model = _model_configs(
        {
            "encoder_layers": conf.get("encoder_layers", 5),
            "encoder_hidden": conf.get("encoder_hidden", 192),
            "summarizer_hidden": conf.get("summarizer_hidden", 192),
            "conv_channels": conf.get("conv_channels", 64),
            "attn_heads": conf.get("attn_heads", 4),
            "attn_dim": conf.get("attn_dim", 64),
        }
    )
    split = load_manifest(args.manifest, mode=args.mode)
    utts = trainer.prepare_eval_utterances(split.part(args.split), model.frontend)
    if args.mode == "pretrain":
        report = trainer.evaluate_pretrain(utts, store, model)
    else:
        report = trainer.evaluate_finetune(utts, store, model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_kv(), encoding="utf-8")
    print(report.to_kv().rstrip())
    return 0


def _parse_groups(specs: list[str]) -> dict[str, str]:
    grouping: dict[str, str] = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ValueError(f"--group expects 'A+B+C=Name', got {spec!r}")
        members, name = spec.split("=", 1)
        for member in members.split("+"):
            grouping[member.strip()] = name.strip()
    return grouping


def _parse_ordinal(spec: str | None) -> dict[str, float] | None:
    if not spec:
        return None
    out: dict[str, float] = {}
    for part in spec.split(","):
        if "=" not in part:
            raise ValueError(f"--ordinal expects 'Name=rank,...', got {part!r}")
        name, rank = part.split("=", 1)
        out[name.strip()] = float(rank)
    return out


def cmd_analyze_correlation(args) -> int:
    pairs = []
    with open(args.pairs, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            raw = json.loads(line)
            if "sentiment" not in raw or "emotion" not in raw:
                raise ValueError(f"line {line_no}: pair needs 'sentiment' and 'emotion'")
            pairs.append((raw["sentiment"], raw["emotion"]))
    if not pairs:
        raise ValueError(f"empty pairs file: {args.pairs}")
    grouping = _parse_groups(args.group)
    sentiments = [s for s, _ in pairs]
    emotions = [e for _, e in pairs]
    order = args.emotion_order.split(",") if args.emotion_order else None
    matrix = metrics.confusion(sentiments, emotions, emotion_order=order, grouping=grouping)
    print(matrix.render())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "confusion.txt").write_text(matrix.render() + "\n", encoding="utf-8")
    analysis = {
        "counts": matrix.counts.tolist(),
        "sentiment_labels": list(matrix.sentiment_labels),
        "emotion_labels": list(matrix.emotion_labels),
    }
    ordinal = _parse_ordinal(args.ordinal)
    if ordinal is not None:
        grouped = [grouping.get(e, e) for e in emotions]
        missing = sorted({e for e in grouped if e not in ordinal})
        if missing:
            raise ValueError(f"--ordinal does not cover emotion classes: {missing}")
        x = [metrics.SENTIMENT_CLASSES.index(s) for s in sentiments]
        y = [ordinal[e] for e in grouped]
        rho = metrics.spearman(x, y)
        analysis["spearman"] = rho
        print(f"spearman = {rho:.4f}")
    (out_dir / "analysis.json").write_text(
        json.dumps(analysis, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sa2sr",
        description="Sentiment-aware ASR pre-training and speech emotion workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--kind", required=True, choices=["asr", "sentiment", "avd", "combined"])
    p.add_argument("--count", type=int, required=True, help="number of utterances (>= 8)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("extract-features", help="write normalized LFBE feature blobs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["pretrain", "finetune", "any"], default="any")
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    def add_train_flags(p):
        p.add_argument("--manifest")
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
        p.add_argument("--epochs", type=int, dest="max_epochs", default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--encoder-layers", type=int, dest="encoder_layers", default=None)
        p.add_argument("--encoder-hidden", type=int, dest="encoder_hidden", default=None)
        p.add_argument("--summarizer-hidden", type=int, dest="summarizer_hidden", default=None)
        p.add_argument("--conv-channels", type=int, dest="conv_channels", default=None)
        p.add_argument("--attn-heads", type=int, dest="attn_heads", default=None)
        p.add_argument("--attn-dim", type=int, dest="attn_dim", default=None)

    p = sub.add_parser("pretrain", help="multi-task CTC + sentiment pre-training")
    add_train_flags(p)
    p.add_argument("--lambda", type=float, dest="lambda", default=None,
                   help="sentiment loss weight (0 gives the ASR-only baseline)")
    p.add_argument("--no-augment", action="store_const", const=False, dest="augment",
                   default=None, help="disable speed perturbation and masking")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="CCC fine-tuning of the emotion regressor")
    add_train_flags(p)
    p.add_argument("--init", default=None, help="pre-trained checkpoint; omit to train from scratch")
    p.add_argument("--freeze-encoder", action="store_const", const=True,
                   dest="freeze_encoder", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["pretrain", "finetune"], required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="validation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-correlation",
                       help="confusion matrix and Spearman rank correlation for "
                            "(sentiment, emotion) pairs")
    p.add_argument("--pairs", required=True, help="JSON-lines of {sentiment, emotion}")
    p.add_argument("--group", action="append", default=None,
                   help="merge emotion classes, e.g. 'Sad+Frustrated+Anger=upset'")
    p.add_argument("--ordinal", default=None,
                   help="explicit emotion ranks for Spearman, e.g. 'upset=0,Neutral=1,Happy=2'")
    p.add_argument("--emotion-order", dest="emotion_order", default=None,
                   help="comma-separated column order for the matrix")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_correlation)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
