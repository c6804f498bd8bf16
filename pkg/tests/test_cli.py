import json
from pathlib import Path

import numpy as np
import pytest

from bindlm.cli import cli
from bindlm.data import DatasetManifest, raw_sample, sample_objects
from bindlm.encoders import Modality


def _gen(tmp_path, **sizes) -> Path:
    out = tmp_path / "data"
    args = [
        "gen-data", "--out", str(out), "--seed", "0",
        "--caption-pairs", str(sizes.get("captions", 4)),
        "--caption-variants", str(sizes.get("cap_variants", 2)),
        "--instruct-pairs", str(sizes.get("instruct", 4)),
        "--instruct-variants", "1",
        "--language-records", "2",
        "--hq-records", "2",
        "--cache-variants", "2",
    ]
    assert cli(args) == 0
    return out


def _raw_input_file(tmp_path, data_dir, modality=Modality.IMAGE, name="probe.json"):
    manifest = DatasetManifest.load(data_dir)
    encoders = manifest.encoders()
    obj = sample_objects(1, 99, manifest.encoder.dim_joint)[0]
    from bindlm.tensor import derive_rng

    raw = raw_sample(encoders[modality], obj, derive_rng(99, "probe"))
    p = tmp_path / name
    p.write_text(json.dumps({"modality": modality.value, "raw": raw.tolist()}))
    return p


def test_gen_data_writes_expected_files(tmp_path):
    out = _gen(tmp_path)
    for name in ("manifest.json", "captions.jsonl", "instruct.jsonl", "hq.jsonl",
                 "eval_yesno.jsonl", "eval_yesno_audio.jsonl", "cache.jsonl"):
        assert (out / name).exists()


def test_unknown_flag_is_usage_error(capsys):
    assert cli(["gen-data", "--out", "x", "--frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err and "unrecognized" in err and "usage:" in err


def test_unknown_subcommand_is_usage_error():
    assert cli(["transmogrify"]) == 1


def test_cache_build_query_and_range_error(tmp_path, capsys):
    out = _gen(tmp_path)
    cache_file = tmp_path / "c.bnc"
    assert cli(["cache", "build", "--data", str(out), "--out", str(cache_file)]) == 0
    probe = _raw_input_file(tmp_path, out)
    assert cli([
        "cache", "query", "--cache", str(cache_file), "--data", str(out),
        "--modality", "image", "--input", str(probe), "--k", "3",
    ]) == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert len(payload["ids"]) == 3
    assert payload["similarities"] == sorted(payload["similarities"], reverse=True)

    # k beyond the store size is a data error (exit 2) with the range message
    assert cli([
        "cache", "query", "--cache", str(cache_file), "--data", str(out),
        "--modality", "image", "--input", str(probe), "--k", "9999",
    ]) == 2
    assert "outside [1," in capsys.readouterr().err


def test_cache_enhance_and_partitioned(tmp_path, capsys):
    out = _gen(tmp_path)
    cache_file = tmp_path / "c.bnc"
    assert cli(["cache", "build", "--data", str(out), "--out", str(cache_file)]) == 0
    probe = _raw_input_file(tmp_path, out, modality=Modality.AUDIO)
    assert cli([
        "cache", "enhance", "--cache", str(cache_file), "--data", str(out),
        "--modality", "audio", "--input", str(probe), "--k", "2", "--alpha", "0.5",
        "--mode", "partitioned",
    ]) == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert len(payload["enhanced"]) == DatasetManifest.load(out).encoder.dim_joint


def test_mix_cli(tmp_path, capsys):
    out = _gen(tmp_path)
    a = _raw_input_file(tmp_path, out, Modality.IMAGE, "a.json")
    b = _raw_input_file(tmp_path, out, Modality.AUDIO, "b.json")
    assert cli(["mix", "--data", str(out), "--inputs", f"{a}:0.7", f"{b}:0.3"]) == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert payload["modality"] == "mixed"
    v = np.asarray(payload["vector"])
    assert abs(float((v @ v)) - 1.0) < 1e-9

    assert cli(["mix", "--data", str(out), "--inputs", "missing-colon"]) == 1


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_train_divergence_exit_code(tmp_path):
    out = _gen(tmp_path)
    plan = tmp_path / "plan.kv"
    plan.write_text("lr = 1e160\nepochs = 1\n")
    code = cli([
        "train", "--stage", "pretrain", "--data", str(out),
        "--out", str(tmp_path / "ck.bnk"), "--plan", str(plan),
    ])
    assert code == 3


def test_train_missing_init_is_data_error(tmp_path, capsys):
    out = _gen(tmp_path)
    code = cli([
        "train", "--stage", "instruct", "--data", str(out),
        "--out", str(tmp_path / "ck.bnk"),
    ])
    assert code == 2
    assert "requires a pretrain checkpoint" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_full_mini_pipeline(tmp_path, capsys):
    """gen-data -> pretrain -> instruct -> hq -> cache -> eval, all exit 0."""
    out = _gen(tmp_path)
    plan = tmp_path / "plan.kv"
    plan.write_text("epochs = 1\n")
    ck1, ck2, ck3 = (tmp_path / f"ck{i}.bnk" for i in (1, 2, 3))
    assert cli(["train", "--stage", "pretrain", "--data", str(out), "--out", str(ck1),
                "--plan", str(plan), "--history", str(tmp_path / "h.json")]) == 0
    assert (tmp_path / "h.json").exists()
    assert cli(["train", "--stage", "instruct", "--data", str(out), "--out", str(ck2),
                "--init", str(ck1), "--plan", str(plan)]) == 0
    assert cli(["train", "--stage", "hq", "--data", str(out), "--out", str(ck3),
                "--init", str(ck2), "--plan", str(plan)]) == 0
    cache_file = tmp_path / "c.bnc"
    assert cli(["cache", "build", "--data", str(out), "--out", str(cache_file)]) == 0
    report = tmp_path / "report.json"
    assert cli(["eval", "--suite", "yesno", "--ckpt", str(ck3), "--data", str(out),
                "--out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert payload["suite"] == "yesno" and payload["n"] == 4
    assert cli(["eval", "--suite", "perplexity", "--ckpt", str(ck1), "--data", str(out)]) == 0
    capsys.readouterr()


def test_generate_alpha_zero_equals_no_cache(tmp_path, capsys):
    out = _gen(tmp_path)
    plan = tmp_path / "plan.kv"
    plan.write_text("epochs = 1\n")
    ck = tmp_path / "ck.bnk"
    assert cli(["train", "--stage", "pretrain", "--data", str(out), "--out", str(ck),
                "--plan", str(plan)]) == 0
    cache_file = tmp_path / "c.bnc"
    assert cli(["cache", "build", "--data", str(out), "--out", str(cache_file)]) == 0
    probe = _raw_input_file(tmp_path, out, Modality.AUDIO)
    capsys.readouterr()  # drain setup output

    assert cli(["generate", "--ckpt", str(ck), "--modality", "audio",
                "--input", str(probe), "--prompt", "Describe the input."]) == 0
    plain = capsys.readouterr().out
    assert cli(["generate", "--ckpt", str(ck), "--modality", "audio",
                "--input", str(probe), "--prompt", "Describe the input.",
                "--cache", str(cache_file), "--alpha", "0", "--k", "4"]) == 0
    cached = capsys.readouterr().out
    assert plain == cached
