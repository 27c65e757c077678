import json

import numpy as np
from click.testing import CliRunner

from app.cli import cli
from app.utils.melbin import read_melbin
from app.utils.run_manifest import RUN_MANIFEST_FILE


def run(*args):
    return CliRunner().invoke(cli, list(args), obj={})


def test_gen_corpus(tmp_path):
    out = tmp_path / "toy"
    result = run("gen-corpus", "--alphabet", "6", "--utterances", "16", "--speakers", "2", "--seed", "4",
                 "--out", str(out))
    assert result.exit_code == 0, result.output
    assert (out / "manifest.tsv").is_file()
    assert len(list(out.glob("*.wav"))) == 16
    manifest = json.loads((out / RUN_MANIFEST_FILE).read_text())
    assert manifest["command"] == "gen-corpus" and manifest["seed"] == 4


def test_gen_corpus_rejects_bad_alphabet(tmp_path):
    result = run("gen-corpus", "--alphabet", "2", "--out", str(tmp_path / "x"))
    assert result.exit_code != 0


def test_train_then_eval(tmp_path, small_corpus):
    out = tmp_path / "run"
    config = tmp_path / "tiny.env"
    config.write_text(
        "FORMANTDIFF_MODEL__D_HIDDEN=16\nFORMANTDIFF_MODEL__D_STYLE=16\nFORMANTDIFF_MODEL__FFN_INNER=32\n"
        "FORMANTDIFF_MODEL__TEXT_LAYERS=1\nFORMANTDIFF_MODEL__GENERATOR_LAYERS=1\n"
        "FORMANTDIFF_MODEL__PREDICTOR_FILTER=16\nFORMANTDIFF_MODEL__ALIGNER_DIM=16\n"
        "FORMANTDIFF_MODEL__UNET_BASE=8\nFORMANTDIFF_MODEL__UNET_MULTS=[1,2]\nFORMANTDIFF_MODEL__TIME_EMB_DIM=16\n"
        "FORMANTDIFF_TRAIN__EVAL_EVERY=0\nFORMANTDIFF_TRAIN__CHECKPOINT_EVERY=0\n"
    )
    result = run("--config", str(config), "train", "--corpus", str(small_corpus.root), "--out", str(out),
                 "--steps", "2", "--batch-size", "2", "--seed", "3")
    assert result.exit_code == 0, result.output
    assert (out / "last.ckpt").is_file() and (out / "train_log.jsonl").is_file()

    eval_dir = tmp_path / "eval"
    result = run("eval", "--ckpt", str(out / "last.ckpt"), "--corpus", str(small_corpus.root), "--split", "heldout",
                 "--solver", "pf", "--steps", "0", "--seed", "0", "--out", str(eval_dir))
    assert result.exit_code == 0, result.output
    assert (eval_dir / "records.tsv").is_file()
    assert json.loads((eval_dir / RUN_MANIFEST_FILE).read_text())["checkpoint_id"]


def test_synth_is_reproducible(tmp_path, tiny_checkpoint, small_corpus):
    entry = small_corpus.entries[0]
    args = ["synth", "--ckpt", str(tiny_checkpoint), "--text", " ".join(entry.phonemes),
            "--ref", str(small_corpus.audio_file(small_corpus.entries[1])), "--solver", "ml", "--steps", "3",
            "--seed", "11"]
    first = run(*args, "--out", str(tmp_path / "a.mel"), "--dump-intermediates")
    second = run(*args, "--out", str(tmp_path / "b.mel"))
    assert first.exit_code == 0, first.output
    assert second.exit_code == 0, second.output
    assert (tmp_path / "a.mel").read_bytes() == (tmp_path / "b.mel").read_bytes()

    mel = read_melbin(tmp_path / "a.mel")
    parts = read_melbin(tmp_path / "a.excitation.mel") + read_melbin(tmp_path / "a.formant.mel")
    np.testing.assert_array_equal(mel, parts)


def test_synth_unknown_symbol(tmp_path, tiny_checkpoint, small_corpus):
    result = run("synth", "--ckpt", str(tiny_checkpoint), "--text", "zz", "--ref",
                 str(small_corpus.audio_file(small_corpus.entries[0])), "--out", str(tmp_path / "x.mel"))
    assert result.exit_code != 0


def test_eval_missing_checkpoint(tmp_path, small_corpus):
    result = run("eval", "--ckpt", str(tmp_path / "none.ckpt"), "--corpus", str(small_corpus.root),
                 "--out", str(tmp_path / "e"))
    assert result.exit_code != 0
    assert "file not found" in result.output


def test_sweep_requires_baseline(tmp_path, tiny_checkpoint, small_corpus):
    result = run("sweep", "--ckpt", str(tiny_checkpoint), "--corpus", str(small_corpus.root), "--steps", "5",
                 "--out", str(tmp_path / "s"))
    assert result.exit_code != 0


def test_unknown_command():
    result = run("vocode")
    assert result.exit_code != 0
