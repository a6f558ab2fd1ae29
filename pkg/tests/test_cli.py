import csv
import json

import jsonschema
import pytest

from genomic_interpreter.cli import main
from genomic_interpreter.data import SyntheticTaskSpec, InteractionPair, load_dataset
from genomic_interpreter.metrics import REPORT_SCHEMA

TOY_SPEC = SyntheticTaskSpec(
    n=64, m=4, tracks=2, bin_width=8,
    motifs={"g": "GGGG", "a": "AAAA", "c": "CCCC", "t": "TTTT"},
    weights={"g": [1.0, 0.0], "a": [0.5, 0.0]},
    pairs=[InteractionPair("c", "t", 12, [0.0, 1.0])],
    track_groups=["DNase", "CAGE"],
)

TOY_RUN = """
[model]
d_model = 4
window = 4
heads = 2
depth = 2

[train]
steps = 12
batch_size = 4
eval_every = 4
"""


@pytest.fixture
def work(tmp_path):
    (tmp_path / "spec.ini").write_text(TOY_SPEC.to_ini())
    (tmp_path / "run.ini").write_text(TOY_RUN)
    return tmp_path


def synth(work, name="d.gds", count=24, seed=1):
    return main(["synth", "--spec", str(work / "spec.ini"), "--count", str(count), "--seed", str(seed), "--out", str(work / name)])


def train(work, out="run", seed=0, data="d.gds", extra=()):
    args = ["train", "--config", str(work / "run.ini"), "--data", str(work / data), "--val", str(work / data),
            "--out", str(work / out), "--seed", str(seed), *extra]
    return main(args)


def test_synth_writes_container_and_echo(work):
    assert synth(work) == 0
    assert load_dataset(work / "d.gds").count == 24
    assert (work / "d.gds.spec.ini").read_text() == TOY_SPEC.to_ini()
    assert json.loads((work / "d.gds.echo.json").read_text())["command"] == "synth"


def test_synth_count_zero(work):
    assert synth(work, "e.gds", count=0) == 0
    assert load_dataset(work / "e.gds").count == 0


def test_synth_deterministic(work):
    synth(work, "a.gds")
    synth(work, "b.gds")
    assert (work / "a.gds").read_bytes() == (work / "b.gds").read_bytes()


def test_synth_missing_spec(work, capsys):
    assert main(["synth", "--spec", str(work / "nope.ini"), "--count", "1", "--out", str(work / "x.gds")]) == 2
    assert "nope.ini" in capsys.readouterr().err


def test_synth_bad_spec(work):
    (work / "bad.ini").write_text("[task]\nn = twelve\n")
    assert main(["synth", "--spec", str(work / "bad.ini"), "--count", "1", "--out", str(work / "x.gds")]) == 2


def test_synth_unwritable_output(work):
    assert synth(work, "missing_dir/d.gds") == 3


def test_usage_error_exit_code():
    assert main(["train"]) == 2


def test_split(work):
    synth(work, count=48)
    assert main(["split", "--data", str(work / "d.gds"), "--fractions", "0.5,0.5,0", "--out-prefix", str(work / "s")]) == 0
    assert load_dataset(work / "s.train.gds").count + load_dataset(work / "s.val.gds").count == 48


def test_train_outputs(work):
    synth(work)
    assert train(work) == 0
    out = work / "run"
    for name in ("model.ckpt", "best.ckpt", "train_log.csv", "metrics.json", "config.ini", "echo.json"):
        assert (out / name).exists()
    rows = list(csv.reader((out / "train_log.csv").open()))
    assert rows[0] == ["step", "lr", "train_loss", "val_overall_pearson"]
    assert len(rows) == 13
    assert "steps = 12" in (out / "config.ini").read_text()


def test_train_reproducible(work):
    synth(work)
    train(work, "r1", seed=5)
    train(work, "r2", seed=5)
    assert (work / "r1" / "train_log.csv").read_bytes() == (work / "r2" / "train_log.csv").read_bytes()
    assert (work / "r1" / "model.ckpt").read_bytes() == (work / "r2" / "model.ckpt").read_bytes()


def test_train_flag_overrides_config(work):
    synth(work)
    assert train(work, extra=["--set", "train.steps=3"]) == 0
    assert len((work / "run" / "train_log.csv").read_text().splitlines()) == 4


def test_train_n_mismatch_exits_before_training(work):
    synth(work)
    (work / "run.ini").write_text(TOY_RUN.replace("depth = 2", "depth = 2\nn = 128"))
    assert train(work) == 2
    assert not (work / "run" / "model.ckpt").exists()


def test_train_bad_config_key(work):
    synth(work)
    (work / "run.ini").write_text("[model]\nwidth = 3\n")
    assert train(work) == 2


def test_train_divergence_exit_code(work):
    synth(work)
    assert train(work, extra=["--set", "train.lr=1e300"]) == 4
    assert (work / "run" / "model.ckpt").exists()


def test_eval_report(work):
    synth(work)
    train(work)
    assert main(["eval", "--checkpoint", str(work / "run" / "model.ckpt"), "--data", str(work / "d.gds"),
                 "--out", str(work / "rep.json")]) == 0
    report = json.loads((work / "rep.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    metrics = json.loads((work / "run" / "metrics.json").read_text())
    assert abs(report["overall"] - metrics["train"]["overall"]) < 1e-12
    # the final logged validation value was computed on the same data
    last = list(csv.reader((work / "run" / "train_log.csv").open()))[-1]
    assert abs(report["overall"] - float(last[3])) < 1e-12
    rows = list(csv.DictReader((work / "rep.tracks.csv").open()))
    assert [r["group"] for r in rows] == ["DNase", "CAGE"]


def test_eval_shape_mismatch(work):
    synth(work)
    train(work)
    spec = SyntheticTaskSpec(**{**TOY_SPEC.__dict__, "n": 128})
    (work / "spec128.ini").write_text(spec.to_ini())
    main(["synth", "--spec", str(work / "spec128.ini"), "--count", "2", "--out", str(work / "big.gds")])
    assert main(["eval", "--checkpoint", str(work / "run" / "model.ckpt"), "--data", str(work / "big.gds"),
                 "--out", str(work / "rep.json")]) == 2


def test_eval_corrupt_checkpoint(work):
    (work / "bad.ckpt").write_bytes(b"garbage")
    synth(work)
    assert main(["eval", "--checkpoint", str(work / "bad.ckpt"), "--data", str(work / "d.gds"), "--out", str(work / "r.json")]) == 3


def test_predict(work):
    synth(work)
    train(work)
    (work / "seqs.tsv").write_text("x\t" + "ACGT" * 16 + "\ny\t" + "N" * 64 + "\n")
    assert main(["predict", "--checkpoint", str(work / "run" / "model.ckpt"), "--input", str(work / "seqs.tsv"),
                 "--out", str(work / "pred.csv")]) == 0
    rows = list(csv.DictReader((work / "pred.csv").open()))
    assert len(rows) == 2 * 4 * 2
    assert all(float(r["value"]) > 0 for r in rows)


def test_attn_export_and_render(work):
    synth(work)
    train(work)
    assert main(["attn", "--checkpoint", str(work / "run" / "model.ckpt"), "--input", str(work / "d.gds"),
                 "--out", str(work / "atlas"), "--render", "--layer", "1"]) == 0
    root = work / "atlas"
    meta = json.loads((root / "manifest.json").read_text())
    assert [layer["span_bp"] for layer in meta["layers"]] == [1, 2]
    assert sorted(p.name for p in root.iterdir() if p.is_dir()) == ["layer_1", "layer_2"]
    assert (root / "layer_1" / "grid.svg").exists() and (root / "layer_2" / "grid.svg").exists()
    assert (root / "layer_1" / "head1.svg").exists() and (root / "layer_1" / "head2.svg").exists()
    rows = list(csv.DictReader((root / "diagonality.csv").open()))
    expected = sum(rec["heads"] for rec in meta["records"])
    assert len(rows) == expected
    assert len({(r["layer"], r["slot"], r["window"], r["head"]) for r in rows}) == expected


def test_attn_layer_out_of_range(work):
    synth(work)
    train(work)
    assert main(["attn", "--checkpoint", str(work / "run" / "model.ckpt"), "--input", str(work / "d.gds"),
                 "--out", str(work / "atlas"), "--layer", "3"]) == 2


def test_attn_shape_mismatch(work):
    synth(work)
    train(work)
    (work / "short.tsv").write_text("s\tACGT\n")
    assert main(["attn", "--checkpoint", str(work / "run" / "model.ckpt"), "--input", str(work / "short.tsv"),
                 "--out", str(work / "atlas")]) == 2


def test_bench(work, capsys):
    (work / "bench.ini").write_text("[model]\nd_model = 4\nwindow = 4\n[bench]\ndepth = 2\nrepeats = 1\n")
    assert main(["bench", "--config", str(work / "bench.ini"), "--lengths", "32,64,128", "--out", str(work / "b.csv")]) == 0
    rows = list(csv.DictReader((work / "b.csv").open()))
    assert len(rows) == 6
    assert all(r["analytic_madds"] == r["measured_madds"] for r in rows)
    out = capsys.readouterr().out
    assert "windowed" in out and "dense" in out


def test_bench_invalid_lengths(work):
    assert main(["bench", "--lengths", "8,abc", "--out", str(work / "b.csv")]) == 2
    assert main(["bench", "--lengths", "1", "--out", str(work / "b.csv")]) == 2
