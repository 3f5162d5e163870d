import csv
import json
import math

import numpy as np
import pytest
import torch

from maskcond.conditions import MASKED, ConditionVector
from maskcond.data import SynthSpec, split, synth_generate
from maskcond.errors import CorruptCheckpoint, IncompatibleVersion, SchemaMismatch, SizeTooLarge
from maskcond.harness.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from maskcond.harness.cli import main, parse_conditions
from maskcond.harness.experiments import (
    HEADER,
    SweepResult,
    compare_schedules,
    eval_mse_vs_sparsity,
    schedule_table,
    sweep_dataset_size,
)
from maskcond.harness.svg import line_chart
from maskcond.mcdm import DiffusionConfig, McDiffusion
from maskcond.mcvae import McVae, VaeConfig

TINY_VAE = {"keypoint_embedding_dim": 8, "encoder_hidden": [8], "decoder_hidden": [8], "batch_size": 32, "epochs": 2}


def tiny_vae():
    ds = synth_generate(SynthSpec(), 10, 0)
    return McVae(VaeConfig(**TINY_VAE), ds.schema, torch.Generator().manual_seed(0))


def tiny_dm():
    ds = synth_generate(SynthSpec(), 10, 0)
    cfg = DiffusionConfig(image_shape=(1, 8, 8), unet_levels=2, base_channels=8, d_c=4, T_steps=10)
    return McDiffusion(cfg, ds.schema, torch.Generator().manual_seed(0))


# --- checkpoints ------------------------------------------------------------


@pytest.mark.parametrize("make", [tiny_vae, tiny_dm])
def test_checkpoint_roundtrip(tmp_path, make):
    m = make().eval()
    if isinstance(m, McVae):
        m.set_standardization(np.linspace(-1, 1, 12), np.linspace(0.5, 2, 12))
    save_checkpoint(m, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.config == m.config and back.schema == m.schema


def test_checkpoint_forward_bit_exact(tmp_path):
    m = tiny_dm().eval()
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", kind="diffusion")
    x = torch.randn(2, 1, 8, 8)
    cat, num = np.array([[0, 1], [-1, 2]]), np.array([[0.3], [np.nan]])
    with torch.no_grad():
        assert torch.equal(m(x, 4, cat, num), back(x, 4, cat, num))


def test_checkpoint_header(tmp_path):
    m = tiny_vae()
    save_checkpoint(m, tmp_path / "m.ckpt", extra={"seed": 3})
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    h = read_header(tmp_path / "m.ckpt")
    assert h["kind"] == "vae" and h["extra"] == {"seed": 3}
    assert len(h["standardization"]["mean"]) == 12
    ends = sorted((e["offset"], e["offset"] + e["nbytes"]) for e in h["tensors"])
    assert all(a[1] <= b[0] for a, b in zip(ends, ends[1:])) and ends[-1][1] == h["payload_bytes"]


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tiny_vae(), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "s.ckpt").write_bytes(raw[:10])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "s.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(IncompatibleVersion):
        load_checkpoint(tmp_path / "v.ckpt")


def test_checkpoint_kind_guard(tmp_path):
    save_checkpoint(tiny_vae(), tmp_path / "m.ckpt")
    with pytest.raises(IncompatibleVersion):
        load_checkpoint(tmp_path / "m.ckpt", kind="diffusion")


# --- sweep results ------------------------------------------------------------


def test_sweep_result_aggregation(tmp_path):
    per_seed = [("m", 0.5, 1, 2.0), ("m", 0.0, 0, 1.0), ("m", 0.0, 1, 3.0), ("m", 0.5, 0, 4.0)]
    r = SweepResult.from_per_seed(per_seed)
    assert r.rows == [("m", 0.0, 2.0, math.sqrt(2.0), 2), ("m", 0.5, 3.0, math.sqrt(2.0), 2)]
    r.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "sweep_var,level,mse_mean,mse_std,seeds" == ",".join(HEADER)
    assert r.spearman()["m"] == pytest.approx(1.0)
    summary = r.summary()
    assert summary["published_reference"]["geobiked_mean_mse_over_sparsity"] == 0.0895


def test_sweep_rows_sorted_numerically():
    r = SweepResult.from_per_seed([(100, 0.0, 0, 1.0), (10, 0.0, 0, 1.0), (2000, 0.0, 0, 1.0)])
    assert [row[0] for row in r.rows] == [10, 100, 2000]


def test_svg_is_well_formed():
    import xml.etree.ElementTree as ET

    r = SweepResult.from_per_seed([("a&b", lv, 0, lv**2) for lv in (0.0, 0.5, 1.0)])
    root = ET.fromstring(line_chart(r, title="t"))
    assert root.tag.endswith("svg") and root.get("version") == "1.1"
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 1


@pytest.fixture(scope="module")
def small_split():
    ds = synth_generate(SynthSpec(), 200, 0)
    return ds, *split(ds, 0.2, 0)


def test_eval_repeated_levels_identical(small_split):
    _, train, test = small_split
    m = tiny_vae()
    m.set_standardization(train.mean, train.std)
    a = eval_mse_vs_sparsity(m, test, [0.0], seeds=[0])
    per = [row[3] for row in eval_mse_vs_sparsity(m, test, [0.3, 0.3], seeds=[0]).per_seed]
    assert per[0] == per[1]
    assert a.rows[0][2] == eval_mse_vs_sparsity(m, test, [0.0, 0.0], seeds=[0]).rows[0][2]


def test_eval_schema_mismatch(small_split):
    _, _, test = small_split
    other = synth_generate(SynthSpec(num_styles=3), 5, 0)
    m = McVae(VaeConfig(**TINY_VAE), other.schema)
    with pytest.raises(SchemaMismatch):
        eval_mse_vs_sparsity(m, test, [0.0])


def test_size_sweep_bookkeeping(small_split):
    ds, _, _ = small_split
    cfg = VaeConfig(**TINY_VAE)
    r = sweep_dataset_size(ds, [5, 160], [0.0, 0.5], cfg, seeds=[0, 1])
    assert [(row[0], row[1], row[4]) for row in r.rows] == [(5, 0.0, 2), (5, 0.5, 2), (160, 0.0, 2), (160, 0.5, 2)]
    with pytest.raises(SizeTooLarge):
        sweep_dataset_size(ds, [161], [0.0], cfg, seeds=[0])


def test_compare_schedules_table(small_split):
    ds, _, _ = small_split
    specs = {"constant": {"kind": "constant", "p_start": 0.5}, "linear": {"kind": "linear", "p_start": 0.5, "p_end": 0.6}}
    r = compare_schedules(ds, specs, VaeConfig(**TINY_VAE), [0.0, 0.5], seeds=[0])
    table = schedule_table(r)
    assert set(table) == {"constant", "linear"} and set(table["linear"]) == {"0.0", "0-0.5"}


def test_identical_traces_identical_models(small_split):
    ds, _, _ = small_split
    specs = {"a": {"kind": "constant", "p_start": 0.5}, "b": {"kind": "linear", "p_start": 0.5, "p_end": 0.5}}
    r = compare_schedules(ds, specs, VaeConfig(**TINY_VAE), [0.0, 0.5], seeds=[3])
    assert r.series("a")[1].tolist() == r.series("b")[1].tolist()


# --- CLI ----------------------------------------------------------------------


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_synth_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("gen-synth", "--samples", 2000, "--seed", 7, "--out", tmp_path / d) == 0
    for name in ("pointclouds.csv", "schema.json", "synth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "pointclouds.csv").read_text().count("\n") == 2001


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = {"model": TINY_VAE, "schedule": {"kind": "exponential", "p_start": 0.5, "p_end": 0.6}}
    (root / "config.json").write_text(json.dumps(config))
    assert run("gen-synth", "--samples", 200, "--seed", 1, "--out", root / "data") == 0
    assert run("train", "vae", "--config", root / "config.json", "--data", root / "data", "--out", root / "vae", "--seed", 4) == 0
    return root


def test_train_exponential_trace(cli_run):
    with open(cli_run / "vae" / "training.csv") as fh:
        rows = list(csv.DictReader(fh))
    T = len(rows) - 1
    for k, row in enumerate(rows):
        assert abs(float(row["p_t"]) - (0.5 + 0.1 * (1 - math.exp(-k / T)))) < 1e-12
    assert list(rows[0]) == ["epoch", "step", "p_t", "recon", "kl", "total"]


def test_eval_five_levels_per_seed(cli_run):
    out = cli_run / "eval"
    args = ["eval", "sparsity", "--checkpoint", cli_run / "vae" / "model.ckpt", "--data", cli_run / "data"]
    assert run(*args, "--levels", "0.0,0.2,0.4,0.6,0.8", "--seeds", 2, "--out", out, "--svg") == 0
    with open(out / "sparsity_per_seed.csv") as fh:
        rows = list(csv.DictReader(fh))
    for seed in ("0", "1"):
        assert len([r for r in rows if r["seed"] == seed]) == 5
    agg = (out / "sparsity.csv").read_text().splitlines()
    assert agg[0] == "sweep_var,level,mse_mean,mse_std,seeds" and len(agg) == 6
    assert (out / "sparsity.svg").exists()
    summary = json.loads((out / "sparsity_summary.json").read_text())
    assert "spearman_level_vs_mse" in summary
    assert run(*args, "--levels", "0.0,0.2,0.4,0.6,0.8", "--seeds", 2, "--out", cli_run / "eval2") == 0
    for name in ("sparsity.csv", "sparsity_per_seed.csv"):
        assert (out / name).read_bytes() == (cli_run / "eval2" / name).read_bytes()


def test_train_deterministic(cli_run):
    cfg, data = cli_run / "config.json", cli_run / "data"
    assert run("train", "vae", "--config", cfg, "--data", data, "--out", cli_run / "vae2", "--seed", 4) == 0
    assert (cli_run / "vae" / "training.csv").read_bytes() == (cli_run / "vae2" / "training.csv").read_bytes()
    assert (cli_run / "vae" / "model.ckpt").read_bytes() == (cli_run / "vae2" / "model.ckpt").read_bytes()


def test_sample_command(cli_run):
    ckpt = cli_run / "vae" / "model.ckpt"
    assert run("sample", "--checkpoint", ckpt, "--conditions", "style=style1,scale=0.4", "--n", 3, "--out", cli_run / "s") == 0
    lines = (cli_run / "s" / "samples.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("kp0_x,kp0_y")


def test_parse_conditions():
    schema = synth_generate(SynthSpec(), 1, 0).schema
    assert parse_conditions("style=style2,scale=0.25", schema) == ConditionVector((2, MASKED), (0.25,))
    assert parse_conditions("", schema) == ConditionVector.all_masked(schema)


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        ["train"],
        ["gen-synth"],
        ["gen-synth", "--out", "x", "--seed", "-1"],
        ["gen-synth", "--out", "x", "--seed", str(2**64)],
        ["eval", "sparsity", "--out", "x", "--checkpoint", "c", "--levels", "a,b"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_missing_data_is_usage_error(tmp_path):
    assert run("train", "vae", "--out", tmp_path) == 1


def test_unknown_condition_is_usage_error(cli_run):
    assert run("sample", "--checkpoint", cli_run / "vae" / "model.ckpt", "--conditions", "color=red", "--out", cli_run / "s2") == 1


def test_runtime_errors_exit_2(tmp_path, cli_run):
    assert run("eval", "sparsity", "--checkpoint", tmp_path / "none.ckpt", "--data", cli_run / "data", "--out", tmp_path) == 2
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert run("sample", "--checkpoint", tmp_path / "bad.ckpt", "--out", tmp_path) == 2
    assert run("train", "vae", "--data", tmp_path / "missing", "--out", tmp_path) == 2
