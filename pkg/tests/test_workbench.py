"""Workbench surface: manifest validation, synthetic corpora, config
layering, and the CLI commands end to end."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from test_metrics import fixture_pairs

from sa2sr.cli import main
from sa2sr.config import layered, parse_kv_file, write_kv
from sa2sr.frontend import FrontendConfig, extract_lfbe, load_features, read_wav
from sa2sr.manifest import load_manifest, normalize_avd
from sa2sr.synth import (
    SAMPLE_RATE,
    avd_from_latents,
    generate_synthetic,
    latents_from_avd,
)

TINY_FLAGS = [
    "--encoder-layers", "1", "--encoder-hidden", "4", "--summarizer-hidden", "4",
    "--conv-channels", "4", "--attn-heads", "2", "--attn-dim", "4",
]


def write_manifest(path: Path, lines) -> Path:
    path.write_text("\n".join(json.dumps(l) for l in lines) + "\n", encoding="utf-8")
    return path


def dummy_wav(tmp_path: Path, name="a.wav") -> str:
    from sa2sr.frontend import Waveform, write_wav

    write_wav(tmp_path / name, Waveform(np.zeros(8000), 16000))
    return name


# ---------------------------------------------------------------------------
# manifest


def test_empty_manifest(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty manifest"):
        load_manifest(path)


def test_avd_midpoint_normalizes_to_zero(tmp_path):
    wav = dummy_wav(tmp_path)
    m = write_manifest(
        tmp_path / "m.jsonl",
        [{"audio": wav, "split": "train", "activation": 4, "valence": 4, "dominance": 4}],
    )
    rec = load_manifest(m, mode="finetune").train[0]
    assert rec.avd == (0.0, 0.0, 0.0)
    assert normalize_avd(7.0) == pytest.approx(1.0)
    assert normalize_avd(1.0) == pytest.approx(-1.0)


def test_sentiment_class_ordering(tmp_path):
    wav = dummy_wav(tmp_path)
    m = write_manifest(
        tmp_path / "m.jsonl",
        [{"audio": wav, "split": "train", "transcript": "ab", "sentiment": "positive"}],
    )
    rec = load_manifest(m, mode="pretrain").train[0]
    assert rec.sentiment_index == 2


def test_duplicate_audio_across_splits(tmp_path):
    wav = dummy_wav(tmp_path)
    m = write_manifest(
        tmp_path / "m.jsonl",
        [
            {"audio": wav, "split": "train"},
            {"audio": wav, "split": "test"},
        ],
    )
    with pytest.raises(ValueError, match="duplicate audio path"):
        load_manifest(m)


def test_missing_fields_report_line_numbers(tmp_path):
    wav = dummy_wav(tmp_path)
    other = dummy_wav(tmp_path, "b.wav")
    m = write_manifest(
        tmp_path / "m.jsonl",
        [
            {"audio": wav, "split": "train", "transcript": "ab", "sentiment": "neutral"},
            {"audio": other, "split": "train", "transcript": "cd"},
        ],
    )
    with pytest.raises(ValueError, match="line 2.*sentiment"):
        load_manifest(m, mode="pretrain")
    with pytest.raises(ValueError, match="line 1.*AVD"):
        load_manifest(m, mode="finetune")


def test_malformed_json_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"audio": "a.wav", "split": "train"}\nnot json\n', encoding="utf-8")
    with pytest.raises(ValueError, match="line 2: malformed JSON"):
        load_manifest(path)


def test_partial_avd_rejected(tmp_path):
    wav = dummy_wav(tmp_path)
    m = write_manifest(
        tmp_path / "m.jsonl",
        [{"audio": wav, "split": "train", "activation": 4, "valence": 4}],
    )
    with pytest.raises(ValueError, match="partial AVD"):
        load_manifest(m)


def test_avd_out_of_scale_rejected(tmp_path):
    wav = dummy_wav(tmp_path)
    m = write_manifest(
        tmp_path / "m.jsonl",
        [{"audio": wav, "split": "train", "activation": 9, "valence": 4, "dominance": 4}],
    )
    with pytest.raises(ValueError, match=r"\[1, 7\]"):
        load_manifest(m)


def test_unknown_split_rejected(tmp_path):
    wav = dummy_wav(tmp_path)
    m = write_manifest(tmp_path / "m.jsonl", [{"audio": wav, "split": "dev"}])
    with pytest.raises(ValueError, match="split"):
        load_manifest(m)


# ---------------------------------------------------------------------------
# synthetic corpora


def _tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_synth_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_synthetic("combined", 9, seed=3, out_dir=a)
    generate_synthetic("combined", 9, seed=3, out_dir=b)
    assert _tree_bytes(a) == _tree_bytes(b)
    c = tmp_path / "c"
    generate_synthetic("combined", 9, seed=4, out_dir=c)
    assert _tree_bytes(a) != _tree_bytes(c)


def test_synth_rejects_small_corpus(tmp_path):
    with pytest.raises(ValueError, match="at least 8"):
        generate_synthetic("asr", 5, seed=0, out_dir=tmp_path)


def test_avd_latent_map_is_invertible():
    rng = np.random.default_rng(1)
    for _ in range(50):
        f0 = float(rng.uniform(150, 450))
        amp = float(rng.uniform(0.04, 0.7))
        dur = float(rng.uniform(0.5, 1.2))
        a, v, d = avd_from_latents(f0, amp, dur)
        back = latents_from_avd(a, v, d)
        np.testing.assert_allclose(back, (f0, amp, dur), rtol=1e-12)


def test_avd_corpus_durations_match_dominance(tmp_path):
    manifest = generate_synthetic("avd", 8, seed=11, out_dir=tmp_path)
    split = load_manifest(manifest, mode="finetune")
    for rec in split.all_records():
        raw_dom = rec.avd[2] * 3.0 + 4.0  # back to the seven-point scale
        _, _, dur = latents_from_avd(0.0, 1.0, raw_dom)
        wave = read_wav(rec.audio_path)
        assert abs(len(wave) - round(dur * SAMPLE_RATE)) <= 1


def test_sentiment_corpus_energy_separable(tmp_path):
    manifest = generate_synthetic("sentiment", 30, seed=2, out_dir=tmp_path)
    split = load_manifest(manifest, mode="pretrain")
    cfg = FrontendConfig()
    by_class = {0: [], 1: [], 2: []}
    for rec in split.all_records():
        feats = extract_lfbe(read_wav(rec.audio_path), cfg)
        mean_energy = np.exp(feats.frames).sum(axis=1).mean()  # linear domain
        by_class[rec.sentiment_index].append(mean_energy)
    # class energy intervals must be disjoint and ordered: a threshold rule
    # (hence a linear classifier on this one feature) scores 100%
    neg, neu, pos = (np.array(by_class[i]) for i in range(3))
    assert neg.max() < neu.min() < neu.max() < pos.min()


def test_combined_valence_tracks_sentiment(tmp_path):
    manifest = generate_synthetic("combined", 12, seed=7, out_dir=tmp_path)
    split = load_manifest(manifest, mode="pretrain")
    means = {}
    for rec in split.all_records():
        means.setdefault(rec.sentiment_index, []).append(rec.avd[1])
    assert np.mean(means[0]) < np.mean(means[1]) < np.mean(means[2])


def test_combined_records_have_all_fields(tmp_path):
    manifest = generate_synthetic("combined", 8, seed=1, out_dir=tmp_path)
    for mode in ("pretrain", "finetune"):
        split = load_manifest(manifest, mode=mode)
        assert len(split.all_records()) == 8
    rec = load_manifest(manifest, mode="pretrain").train[0]
    assert 2 <= len(rec.transcript) <= 5


# ---------------------------------------------------------------------------
# config files


def test_config_parse_and_layering(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("lr = 0.001  # comment\nseed=5\n\n# full-line comment\n", encoding="utf-8")
    parsed = parse_kv_file(path)
    assert parsed == {"lr": "0.001", "seed": "5"}
    eff = layered(
        {"lr": 1e-5, "seed": 0, "batch": 8},
        parsed,
        {"seed": 9, "batch": None},
        {"lr": float, "seed": int, "batch": int},
    )
    assert eff == {"lr": 0.001, "seed": 9, "batch": 8}


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("mystery = 1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown config key"):
        layered({}, parse_kv_file(path), {}, {"lr": float})


def test_config_bad_line(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("just some words\n", encoding="utf-8")
    with pytest.raises(ValueError, match="key = value"):
        parse_kv_file(path)


def test_config_write_roundtrip(tmp_path):
    path = tmp_path / "c.txt"
    write_kv(path, {"lr": 0.001, "seed": 5})
    assert parse_kv_file(path) == {"lr": "0.001", "seed": "5"}


# ---------------------------------------------------------------------------
# CLI


def test_cli_gen_synth_and_env_seed(tmp_path, monkeypatch, capsys):
    a = tmp_path / "a"
    assert main(["gen-synth", "--kind", "asr", "--count", "8", "--seed", "21", "--out", str(a)]) == 0
    monkeypatch.setenv("SA2SR_SEED", "21")
    b = tmp_path / "b"
    assert main(["gen-synth", "--kind", "asr", "--count", "8", "--out", str(b)]) == 0
    wavs_a = {p.name: p.read_bytes() for p in (a / "wavs").iterdir()}
    wavs_b = {p.name: p.read_bytes() for p in (b / "wavs").iterdir()}
    assert wavs_a == wavs_b


def test_cli_extract_features(tmp_path):
    corpus = tmp_path / "corpus"
    manifest = generate_synthetic("asr", 8, seed=1, out_dir=corpus)
    out = tmp_path / "feats"
    assert main(["extract-features", "--manifest", str(manifest), "--out", str(out)]) == 0
    blobs = list(out.rglob("*.lfbe"))
    assert len(blobs) == 8
    feats = load_features(blobs[0])
    assert feats.frames.shape[1] == 40


def test_cli_error_is_nonzero(tmp_path, capsys):
    code = main(["extract-features", "--manifest", str(tmp_path / "missing.jsonl"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cli_pretrain_evaluate_finetune_pipeline(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    manifest = generate_synthetic("combined", 12, seed=3, out_dir=corpus)
    pre_out = tmp_path / "pre"
    code = main(
        ["pretrain", "--manifest", str(manifest), "--out", str(pre_out),
         "--epochs", "2", "--batch-size", "4", "--seed", "3", "--no-augment",
         *TINY_FLAGS]
    )
    assert code == 0
    assert (pre_out / "checkpoint_best.sa2s").exists()
    assert (pre_out / "config.txt").exists()

    eval_out = tmp_path / "eval"
    code = main(
        ["evaluate", "--manifest", str(manifest), "--checkpoint",
         str(pre_out / "checkpoint_best.sa2s"), "--mode", "pretrain",
         "--out", str(eval_out)]
    )
    assert code == 0
    report = json.loads((eval_out / "report.json").read_text())
    assert report["cer"] is not None and report["stopping_metric"] is not None

    ft_out = tmp_path / "ft"
    code = main(
        ["finetune", "--manifest", str(manifest), "--out", str(ft_out),
         "--init", str(pre_out / "checkpoint_best.sa2s"),
         "--epochs", "2", "--batch-size", "4", "--seed", "3", "--freeze-encoder",
         *TINY_FLAGS]
    )
    assert code == 0
    history = [json.loads(l) for l in (ft_out / "history.jsonl").read_text().splitlines()]
    assert len(history) == 2
    assert history[0]["validation"]["ccc_a"] is not None


def test_cli_pretrain_idempotent_and_config_roundtrip(tmp_path):
    corpus = tmp_path / "corpus"
    manifest = generate_synthetic("combined", 9, seed=5, out_dir=corpus)
    args = ["--manifest", str(manifest), "--epochs", "1", "--batch-size", "4",
            "--seed", "6", "--no-augment", *TINY_FLAGS]
    out1, out2, out3 = (tmp_path / n for n in ("r1", "r2", "r3"))
    assert main(["pretrain", "--out", str(out1), *args]) == 0
    assert main(["pretrain", "--out", str(out2), *args]) == 0
    ckpt1 = (out1 / "checkpoint_last.sa2s").read_bytes()
    assert ckpt1 == (out2 / "checkpoint_last.sa2s").read_bytes()

    def strip_wall(path):
        records = [json.loads(l) for l in path.read_text().splitlines()]
        for r in records:
            r.pop("wall_time")
        return records

    assert strip_wall(out1 / "history.jsonl") == strip_wall(out2 / "history.jsonl")

    # reload the echoed config alone and reproduce the run
    assert main(["pretrain", "--config", str(out1 / "config.txt"), "--out", str(out3)]) == 0
    assert ckpt1 == (out3 / "checkpoint_last.sa2s").read_bytes()


def test_cli_analyze_correlation_fixture(tmp_path, capsys):
    sentiments, emotions = fixture_pairs()
    pairs = tmp_path / "pairs.jsonl"
    with open(pairs, "w", encoding="utf-8") as fh:
        for s, e in zip(sentiments, emotions):
            fh.write(json.dumps({"sentiment": s, "emotion": e}) + "\n")
    out = tmp_path / "corr"
    code = main(
        ["analyze-correlation", "--pairs", str(pairs), "--out", str(out),
         "--emotion-order", "Sad,Anger,Frustrated,Neutral,Happy",
         "--group", "Sad+Frustrated+Anger=upset",
         "--ordinal", "upset=0,Neutral=1,Happy=2"]
    )
    assert code == 0
    analysis = json.loads((out / "analysis.json").read_text())
    counts = np.array(analysis["counts"])
    assert counts.shape == (3, 3)  # grouping merged five emotions into three
    assert "spearman" in analysis
    # neutral-sentiment row total survives grouping
    assert counts[1].sum() == 604 + 518 + 1049 + 1251 + 848


def test_cli_analyze_correlation_ungrouped_matrix(tmp_path, capsys):
    sentiments, emotions = fixture_pairs()
    pairs = tmp_path / "pairs.jsonl"
    with open(pairs, "w", encoding="utf-8") as fh:
        for s, e in zip(sentiments, emotions):
            fh.write(json.dumps({"sentiment": s, "emotion": e}) + "\n")
    out = tmp_path / "corr"
    code = main(
        ["analyze-correlation", "--pairs", str(pairs), "--out", str(out),
         "--emotion-order", "Sad,Anger,Frustrated,Neutral,Happy"]
    )
    assert code == 0
    analysis = json.loads((out / "analysis.json").read_text())
    counts = np.array(analysis["counts"])
    assert counts.shape == (3, 5)
    assert counts[1].sum() == 4270  # neutral-sentiment total
    np.testing.assert_array_equal(counts[:, 3], [253, 1251, 204])  # Neutral emotion
