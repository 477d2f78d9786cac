import csv
import dataclasses
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from flexdet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from flexdet.config import (
    DetectorConfig,
    RunConfig,
    config_hash,
    run_config_from_dict,
)
from flexdet.model import Detector
from flexdet.scenes import DatasetSpec, generate, save
from flexdet.train import train

TINY = DetectorConfig(
    grid=6, channels=8, heads=2, encoder_blocks=1, ffn_hidden=12,
    sa_block_hidden=8, pool_cap=12, num_classes=3,
)
TINY_DATA = DatasetSpec(
    n_scenes=10, count_weights=(1.0, 1.0), grid=6, num_classes=3,
    size_range=(0.2, 0.4), seed=5,
)


def cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "flexdet.cli", *args], capture_output=True, text=True
    )


@pytest.fixture()
def tiny_dataset(tmp_path):
    path = tmp_path / "data.jsonl"
    save(generate(TINY_DATA), str(path))
    return str(path)


def tiny_run(tmp_path, tiny_dataset, **overrides) -> RunConfig:
    base = dict(
        detector=TINY,
        iterations=6,
        batch_size=2,
        eval_interval=3,
        train_data=tiny_dataset,
        eval_data=tiny_dataset,
        out_dir=str(tmp_path / "run"),
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = Detector(TINY)
    d1, d2 = tmp_path / "c1", tmp_path / "c2"
    save_checkpoint(model, str(d1), 7)
    loaded, it = load_checkpoint(str(d1))
    assert it == 7
    save_checkpoint(loaded, str(d2), 7)
    assert (d1 / "params.bin").read_bytes() == (d2 / "params.bin").read_bytes()
    assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()


def test_checkpoint_restores_values(tmp_path):
    model = Detector(TINY)
    for _, p in model.named_parameters():
        p.values += 0.25
    save_checkpoint(model, str(tmp_path / "c"), 1)
    loaded, _ = load_checkpoint(str(tmp_path / "c"))
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.values, p2.values)


def test_checkpoint_config_hash_mismatch_fails(tmp_path):
    model = Detector(TINY)
    save_checkpoint(model, str(tmp_path / "c"), 0)
    other = dataclasses.replace(TINY, sa_blocks=1)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(str(tmp_path / "c"), other)


def test_config_hash_sensitivity():
    assert config_hash(TINY) == config_hash(dataclasses.replace(TINY))
    assert config_hash(TINY) != config_hash(dataclasses.replace(TINY, replication=3))


def test_run_config_json_roundtrip():
    run = RunConfig(detector=TINY, iterations=11, train_data="x.jsonl")
    blob = json.loads(json.dumps(dataclasses.asdict(run)))
    back = run_config_from_dict(blob)
    assert back == run


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        run_config_from_dict({"iterations": 5, "bogus": 1})


# ---------------------------------------------------------------------------
# training loop


def test_train_smoke_writes_loss_rows(tmp_path, tiny_dataset):
    run = tiny_run(tmp_path, tiny_dataset, iterations=10, eval_data="")
    model, ckpt = train(run)
    with open(os.path.join(run.out_dir, "metrics.csv")) as fh:
        rows = [r for r in csv.DictReader(fh) if r["kind"] == "loss"]
    assert len(rows) == 10
    assert all(float(r["total"]) > 0 for r in rows)
    assert os.path.exists(os.path.join(ckpt, "manifest.json"))


def test_train_emits_periodic_eval_rows(tmp_path, tiny_dataset):
    run = tiny_run(tmp_path, tiny_dataset, iterations=6, eval_interval=3)
    train(run)
    with open(os.path.join(run.out_dir, "metrics.csv")) as fh:
        kinds = [r["kind"] for r in csv.DictReader(fh)]
    assert kinds.count("eval") == 2


def test_overfit_single_scene_loss_decreases(tmp_path):
    path = tmp_path / "one.jsonl"
    spec = dataclasses.replace(TINY_DATA, n_scenes=1)
    save(generate(spec), str(path))
    run = tiny_run(tmp_path, str(path), iterations=120, batch_size=1, eval_data="")
    train(run)
    with open(os.path.join(run.out_dir, "metrics.csv")) as fh:
        totals = [float(r["total"]) for r in csv.DictReader(fh) if r["kind"] == "loss"]
    # windowed means after warmup must trend down
    w = 30
    first = np.mean(totals[w : 2 * w])
    last = np.mean(totals[-w:])
    assert last < first


def test_resume_continues_at_recorded_iteration(tmp_path, tiny_dataset):
    run = tiny_run(tmp_path, tiny_dataset, iterations=4, eval_data="")
    train(run)
    _, it = load_checkpoint(os.path.join(run.out_dir, "checkpoint"))
    assert it == 4
    # extend the budget: training resumes from iteration 4
    run2 = dataclasses.replace(run, iterations=7)
    train(run2)
    with open(os.path.join(run.out_dir, "metrics.csv")) as fh:
        loss_iters = [int(r["iteration"]) for r in csv.DictReader(fh) if r["kind"] == "loss"]
    assert loss_iters == [0, 1, 2, 3, 4, 5, 6]
    _, it = load_checkpoint(os.path.join(run.out_dir, "checkpoint"))
    assert it == 7


def test_identical_run_reproduces_checkpoint_bytes(tmp_path, tiny_dataset):
    run_a = tiny_run(tmp_path, tiny_dataset, out_dir=str(tmp_path / "a"), eval_data="")
    run_b = tiny_run(tmp_path, tiny_dataset, out_dir=str(tmp_path / "b"), eval_data="")
    train(run_a)
    train(run_b)
    pa = tmp_path / "a" / "checkpoint" / "params.bin"
    pb = tmp_path / "b" / "checkpoint" / "params.bin"
    assert pa.read_bytes() == pb.read_bytes()


def test_nan_loss_aborts_with_batch_id(tmp_path, tiny_dataset):
    from flexdet.train import TrainingDiverged

    bad = dataclasses.replace(
        TINY, seed=1,
    )
    run = tiny_run(tmp_path, tiny_dataset, detector=bad, iterations=3, eval_data="")
    # sabotage: blow up the optimizer so parameters go non-finite
    import flexdet.train as train_mod

    orig = train_mod.Adam

    class ExplodingAdam(orig):
        def step(self):
            for _, p in self.params:
                p.values += np.inf
            return 0.0

    train_mod.Adam = ExplodingAdam
    try:
        with pytest.raises(TrainingDiverged, match="scene ids"):
            train(run)
    finally:
        train_mod.Adam = orig


# ---------------------------------------------------------------------------
# CLI contracts


def test_cli_gen_data_deterministic(tmp_path):
    spec = {"n_scenes": 6, "seed": 9, "grid": 6, "count_weights": [1.0]}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli("gen-data", str(spec_path), str(out1)).returncode == 0
    assert cli("gen-data", str(spec_path), str(out2)).returncode == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert len(out1.read_text().splitlines()) == 6


def test_cli_gen_data_bad_json_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    result = cli("gen-data", str(bad), str(tmp_path / "out.jsonl"))
    assert result.returncode == 1
    err = json.loads(result.stderr.strip().splitlines()[-1])
    assert err["error"] == "user"


def test_cli_gen_data_unknown_key_exits_one(tmp_path):
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"n_scenes": 2, "wat": 1}))
    result = cli("gen-data", str(bad), str(tmp_path / "out.jsonl"))
    assert result.returncode == 1


def test_cli_train_missing_dataset_exits_one(tmp_path):
    run_path = tmp_path / "run.json"
    run_path.write_text(json.dumps({"train_data": "nope.jsonl", "iterations": 1}))
    result = cli("train", str(run_path))
    assert result.returncode == 1
    err = json.loads(result.stderr.strip().splitlines()[-1])
    assert err["error"] == "user"


def test_cli_eval_threshold_override_and_determinism(tmp_path, tiny_dataset):
    run = tiny_run(tmp_path, tiny_dataset, iterations=3, eval_data="")
    train(run)
    ckpt = os.path.join(run.out_dir, "checkpoint")
    r1 = cli("eval", ckpt, tiny_dataset, "--threshold", "0.05", "--out", str(tmp_path / "e1"))
    r2 = cli("eval", ckpt, tiny_dataset, "--threshold", "0.05", "--out", str(tmp_path / "e2"))
    assert r1.returncode == 0 and r2.returncode == 0
    j1 = (tmp_path / "e1" / "eval_report.json").read_text()
    j2 = (tmp_path / "e2" / "eval_report.json").read_text()
    assert j1 == j2
    report = json.loads(j1)
    assert 0.0 <= report["ap50"] <= 1.0
    assert os.path.exists(tmp_path / "e1" / "eval_report.csv")


def test_cli_eval_query_count_monotone_in_threshold(tmp_path, tiny_dataset):
    run = tiny_run(tmp_path, tiny_dataset, iterations=3, eval_data="")
    train(run)
    ckpt = os.path.join(run.out_dir, "checkpoint")
    counts = []
    for i, thr in enumerate((0.01, 0.2, 0.6)):
        out = tmp_path / f"ev{i}"
        assert cli("eval", ckpt, tiny_dataset, "--threshold", str(thr),
                   "--out", str(out)).returncode == 0
        counts.append(json.loads((out / "eval_report.json").read_text())["mean_query_count"])
    assert counts == sorted(counts, reverse=True)


def test_cli_complexity_rows_sorted_and_recomputable(tmp_path, tiny_dataset):
    from flexdet.metrics import decoder_flops

    run = tiny_run(tmp_path, tiny_dataset, iterations=2, eval_data="")
    train(run)
    ckpt = os.path.join(run.out_dir, "checkpoint")
    out = tmp_path / "cx"
    result = cli("complexity", ckpt, tiny_dataset, "--out", str(out),
                 "--thresholds", "0.4,0.05,0.2")
    assert result.returncode == 0
    with open(out / "complexity.csv") as fh:
        rows = list(csv.DictReader(fh))
    thresholds = [float(r["threshold"]) for r in rows]
    assert thresholds == sorted(thresholds)
    model, _ = load_checkpoint(ckpt)
    for r in rows:
        expected = decoder_flops(float(r["mean_query_count"]), model.cfg).total
        assert float(r["decoder_flops"]) == pytest.approx(expected, rel=1e-9)
    flops = [float(r["decoder_flops"]) for r in rows]
    queries = [float(r["mean_query_count"]) for r in rows]
    for a, b in zip(range(len(rows) - 1), range(1, len(rows))):
        if queries[a] > queries[b]:
            assert flops[a] > flops[b]
    assert os.path.exists(out / "complexity.png")


def test_cli_bench_reports_both_timings(tmp_path):
    cfg_path = tmp_path / "det.json"
    cfg_path.write_text(json.dumps(dataclasses.asdict(TINY)))
    result = cli("bench-decoder", str(cfg_path), "--queries", "16",
                 "--iters", "5", "--warmup", "1", "--out", str(tmp_path))
    assert result.returncode == 0
    blob = json.loads((tmp_path / "bench.json").read_text())
    assert blob["ours_ms"] > 0 and blob["baseline_ms"] > 0
    assert blob["ratio"] == pytest.approx(blob["baseline_ms"] / blob["ours_ms"])
    assert "ours_std_ms" in blob and "baseline_std_ms" in blob
    assert "ratio" in result.stdout


def test_cli_ablate_unknown_preset_exits_one(tmp_path, tiny_dataset):
    result = cli("ablate", "nonsense", "--train-data", tiny_dataset,
                 "--eval-data", tiny_dataset, "--out", str(tmp_path / "ab"))
    assert result.returncode == 1


def test_cli_ablate_tiny_budget(tmp_path, tiny_dataset):
    from flexdet.train import run_preset

    rows = run_preset(
        "k-sweep", tiny_dataset, tiny_dataset, str(tmp_path / "ab"),
        iterations=2, batch_size=2, seeds=[0],
        base=RunConfig(detector=TINY),
    )
    assert [r["variant"] for r in rows] == ["k1", "k3", "k6", "k9"]
    assert all(0.0 <= r["ap50"] <= 1.0 for r in rows)


def test_figures_rendered_next_to_outputs(tmp_path, tiny_dataset):
    run_path = tmp_path / "run.json"
    out_dir = tmp_path / "fig_run"
    run_path.write_text(json.dumps({
        "detector": dataclasses.asdict(TINY),
        "iterations": 3, "batch_size": 2,
        "train_data": tiny_dataset, "eval_data": tiny_dataset,
        "eval_interval": 2, "out_dir": str(out_dir),
    }))
    assert cli("train", str(run_path)).returncode == 0
    assert (out_dir / "loss_curves.png").exists()
    assert (out_dir / "metrics.csv").exists()

    ckpt = str(out_dir / "checkpoint")
    ev = tmp_path / "ev"
    assert cli("eval", ckpt, tiny_dataset, "--out", str(ev)).returncode == 0
    assert (ev / "eval_buckets.png").exists()
