"""End-to-end command-line tests: artifact layout, manifests, determinism,
config precedence, exit codes, and the report formats."""
import json

import numpy as np
import pytest

from evslicer.autodiff import load_named_tensors
from evslicer.cli import load_cells, main
from evslicer.events import Scenario, build_cells, parse_events, synth_stream
from evslicer.snn import SlicerNet

MICRO_TRAIN = ["--arch", "LN-IF", "--hw", "8x8", "--n-steps", "6", "--target", "3",
               "--lr", "3e-4", "--max-iters", "200"]


def scenario_json(tmp_path, **over):
    sc = dict(width=8, height=8, duration_ms=60,
              rate_per_ms=[[0, 60, 1.0]], speed_px_per_ms=[[0, 60, 0.05]],
              jitter_px=0.0)
    sc.update(over)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(sc))
    return path


def synth_csv(tmp_path, name="events.csv", seed=0, **over):
    sc = Scenario(**{**dict(width=8, height=8, duration_ms=60,
                            rate_per_ms=[[0, 60, 1.0]],
                            speed_px_per_ms=[[0, 60, 0.05]], jitter_px=0.0),
                     **over})
    stream = synth_stream(sc, seed=seed)
    from evslicer.events import serialize_events_csv
    path = tmp_path / name
    path.write_bytes(serialize_events_csv(stream))
    # return the parsed-back stream: CSV drops the t0/span metadata, so this
    # is exactly what any command reading the file will see
    parsed = parse_events(path.read_bytes(), "csv", width=sc.width, height=sc.height)
    return path, parsed


def micro_checkpoint(tmp_path, bias=None, seed=0):
    net = SlicerNet("LN-IF", in_hw=(8, 8), seed=seed)
    if bias is not None:
        net.layers[0].bias.data[...] = bias
        net.layers[0].weight.data[...] = 0.0
    path = tmp_path / "ckpt.sslc"
    net.save(path)
    return path


class TestSynth:
    def test_writes_events_and_manifest(self, tmp_path):
        sc = scenario_json(tmp_path)
        rc = main(["synth", "--scenario", str(sc), "--out-dir", str(tmp_path), "--seed", "7"])
        assert rc == 0
        out = tmp_path / "events.csv"
        stream = parse_events(out.read_bytes(), "csv", width=8, height=8)
        assert len(stream.t) > 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 7
        assert manifest["code_version"]
        assert manifest["outputs"]["events"] == str(out)

    def test_deterministic_rerun(self, tmp_path):
        sc = scenario_json(tmp_path)
        main(["synth", "--scenario", str(sc), "--out-dir", str(tmp_path / "a"), "--seed", "3"])
        main(["synth", "--scenario", str(sc), "--out-dir", str(tmp_path / "b"), "--seed", "3"])
        assert (tmp_path / "a" / "events.csv").read_bytes() == \
               (tmp_path / "b" / "events.csv").read_bytes()

    def test_zero_rate_gives_empty_csv_with_header(self, tmp_path):
        sc = scenario_json(tmp_path, rate_per_ms=[[0, 60, 0.0]])
        rc = main(["synth", "--scenario", str(sc), "--out-dir", str(tmp_path)])
        assert rc == 0
        text = (tmp_path / "events.csv").read_text()
        assert text.splitlines()[0] == "t_us,x,y,p"
        assert len(text.splitlines()) == 1

    def test_binary_roundtrip(self, tmp_path):
        sc = scenario_json(tmp_path)
        rc = main(["synth", "--scenario", str(sc), "--out-dir", str(tmp_path),
                   "--fmt", "binary"])
        assert rc == 0
        stream = parse_events((tmp_path / "events.bin").read_bytes(), "binary")
        assert stream.width == 8 and len(stream.t) > 0

    def test_bad_scenario_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"no_such_field": 1}')
        assert main(["synth", "--scenario", str(bad), "--out-dir", str(tmp_path)]) == 2


class TestCells:
    def test_roundtrip(self, tmp_path):
        events, stream = synth_csv(tmp_path)
        rc = main(["cells", "--events", str(events), "--dt-us", "10000",
                   "--geometry", "8x8", "--out-dir", str(tmp_path)])
        assert rc == 0
        loaded = load_cells(tmp_path / "cells.npz")
        direct = build_cells(stream, 10000)
        assert np.array_equal(loaded.grids, direct.grids)
        assert loaded.dt_us == 10000 and loaded.t0 == direct.t0
        assert loaded.dropped_tail_events == direct.dropped_tail_events

    def test_csv_without_geometry_exits_2(self, tmp_path):
        events, _ = synth_csv(tmp_path)
        assert main(["cells", "--events", str(events), "--dt-us", "10000",
                     "--out-dir", str(tmp_path)]) == 2


class TestTrain:
    def test_arena_micro_artifacts(self, tmp_path):
        rc = main(["train", "arena-i", *MICRO_TRAIN, "--out-dir", str(tmp_path)])
        assert rc == 0
        result = json.loads((tmp_path / "result.json").read_text())
        assert result["converged_at"] is not None
        assert result["converged_at"] <= 400
        history = [json.loads(l) for l in (tmp_path / "history.jsonl").read_text().splitlines()]
        assert history[-1]["converged"]
        assert (tmp_path / "checkpoint.sslc").exists()
        assert (tmp_path / "checkpoint.sslc.meta.json").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "train arena-i"
        assert manifest["config"]["lr"] == pytest.approx(3e-4)

    def test_rerun_identical_history(self, tmp_path):
        main(["train", "arena-i", *MICRO_TRAIN, "--out-dir", str(tmp_path / "a")])
        main(["train", "arena-i", *MICRO_TRAIN, "--out-dir", str(tmp_path / "b")])
        assert (tmp_path / "a" / "history.jsonl").read_bytes() == \
               (tmp_path / "b" / "history.jsonl").read_bytes()
        assert (tmp_path / "a" / "checkpoint.sslc").read_bytes() == \
               (tmp_path / "b" / "checkpoint.sslc").read_bytes()

    def test_max_iters_zero(self, tmp_path):
        rc = main(["train", "arena-i", *MICRO_TRAIN[:-2], "--max-iters", "0",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "history.jsonl").read_text() == ""
        assert not (tmp_path / "checkpoint.sslc").exists()

    def test_divergence_exits_3(self, tmp_path):
        rc = main(["train", "arena-i", "--arch", "LN-IF", "--hw", "8x8",
                   "--n-steps", "6", "--target", "3", "--lr", "1e6",
                   "--max-iters", "50", "--out-dir", str(tmp_path)])
        assert rc == 3

    def test_config_file_and_cli_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"arch": "LN-IF", "in_hw": [8, 8], "n_steps": 6,
                                   "target": 3, "max_iters": 200, "lr": 1e6}))
        # file alone diverges; the CLI flag must win over the file value
        rc = main(["train", "arena-i", "--config", str(cfg), "--lr", "3e-4",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["lr"] == pytest.approx(3e-4)
        assert manifest["config"]["arch"] == "LN-IF"

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"warp_speed": 9}))
        assert main(["train", "arena-i", "--config", str(cfg),
                     "--out-dir", str(tmp_path)]) == 2

    def test_feedback_density_micro(self, tmp_path):
        events, _ = synth_csv(tmp_path, duration_ms=120, rate_per_ms=[[0, 120, 2.0]])
        rc = main(["train", "feedback", "--events", str(events), "--geometry", "8x8",
                   "--oracle", "density", "--target-events", "30",
                   "--dt-us", "5000", "--epochs", "2", "--samples-per-epoch", "4",
                   "--window", "6", "--lr", "1e-4", "--out-dir", str(tmp_path)])
        assert rc == 0
        result = json.loads((tmp_path / "result.json").read_text())
        assert result["task"] == "feedback" and result["samples"] == 8
        assert (tmp_path / "checkpoint.sslc").exists()

    def test_feedback_without_events_exits_2(self, tmp_path):
        assert main(["train", "feedback", "--out-dir", str(tmp_path)]) == 2


class TestSlice:
    def test_always_spike_checkpoint_single_cell_slices(self, tmp_path):
        events, stream = synth_csv(tmp_path)
        ckpt = micro_checkpoint(tmp_path, bias=5.0)   # fires every step
        rc = main(["slice", "--checkpoint", str(ckpt), "--events", str(events),
                   "--dt-us", "10000", "--geometry", "8x8", "--out-dir", str(tmp_path)])
        assert rc == 0
        decisions = [json.loads(l) for l in
                     (tmp_path / "decisions.jsonl").read_text().splitlines()]
        n_cells = len(build_cells(stream, 10000))
        assert len(decisions) == n_cells
        assert all(d["last_cell"] - d["first_cell"] == 0 for d in decisions)
        report = json.loads((tmp_path / "report.json").read_text())
        assert sum(d["n_events"] for d in decisions) == report["events_total"] \
            if "events_total" in report else True
        assert report["n_slices"] == n_cells

    def test_partition_and_report(self, tmp_path):
        events, stream = synth_csv(tmp_path, duration_ms=80)
        ckpt = micro_checkpoint(tmp_path)
        rc = main(["slice", "--checkpoint", str(ckpt), "--events", str(events),
                   "--dt-us", "10000", "--geometry", "8x8", "--out-dir", str(tmp_path)])
        assert rc == 0
        decisions = [json.loads(l) for l in
                     (tmp_path / "decisions.jsonl").read_text().splitlines()]
        cells = build_cells(stream, 10000)
        binned = int(cells.counts().sum())
        assert sum(d["n_events"] for d in decisions) == binned
        covered = [c for d in decisions for c in range(d["first_cell"], d["last_cell"] + 1)]
        assert covered == list(range(len(cells)))

    def test_dump_reprs_roundtrip(self, tmp_path):
        events, _ = synth_csv(tmp_path)
        ckpt = micro_checkpoint(tmp_path, bias=5.0)
        out = tmp_path / "run"
        rc = main(["slice", "--checkpoint", str(ckpt), "--events", str(events),
                   "--dt-us", "20000", "--geometry", "8x8", "--dump-reprs",
                   "--out-dir", str(out)])
        assert rc == 0
        decisions = [json.loads(l) for l in (out / "decisions.jsonl").read_text().splitlines()]
        assert all(d["repr_path"] for d in decisions)
        tensors = load_named_tensors(decisions[0]["repr_path"])
        assert tensors["representation"].shape == (2, 8, 8)

    def test_multi_stream_jobs(self, tmp_path):
        e1, _ = synth_csv(tmp_path, name="one.csv", seed=1)
        e2, _ = synth_csv(tmp_path, name="two.csv", seed=2)
        ckpt = micro_checkpoint(tmp_path, bias=5.0)
        out = tmp_path / "multi"
        rc = main(["slice", "--checkpoint", str(ckpt), "--events", str(e1), str(e2),
                   "--dt-us", "10000", "--geometry", "8x8", "--jobs", "2",
                   "--out-dir", str(out)])
        assert rc == 0
        assert (out / "one" / "decisions.jsonl").exists()
        assert (out / "two" / "decisions.jsonl").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert "decisions:one" in manifest["outputs"]

    def test_missing_checkpoint_exits_2(self, tmp_path):
        events, _ = synth_csv(tmp_path)
        assert main(["slice", "--checkpoint", str(tmp_path / "nope.sslc"),
                     "--events", str(events), "--dt-us", "10000",
                     "--geometry", "8x8", "--out-dir", str(tmp_path)]) == 2


class TestReport:
    def test_density_json_and_csv(self, tmp_path):
        events, stream = synth_csv(tmp_path)
        window = ["--t0-us", "0", "--span-us", "60000"]
        rc = main(["report", "density", "--events", str(events), "--dt-us", "10000",
                   "--geometry", "8x8", *window, "--out-dir", str(tmp_path)])
        assert rc == 0
        rows = json.loads((tmp_path / "density.json").read_text())
        assert len(rows) == 6
        assert all(r["events_per_us"] >= 0 for r in rows)
        assert sum(r["events_per_us"] for r in rows) * 10000 == pytest.approx(len(stream.t))
        rc = main(["report", "density", "--events", str(events), "--dt-us", "10000",
                   "--geometry", "8x8", *window, "--fmt", "csv", "--out-dir", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "density.csv").read_text().splitlines()
        assert lines[0] == "window,t_start_us,events_per_us"
        assert len(lines) == 7

    def test_density_empty_stream_all_zero(self, tmp_path):
        events, _ = synth_csv(tmp_path, rate_per_ms=[[0, 60, 0.0]])
        rc = main(["report", "density", "--events", str(events), "--dt-us", "10000",
                   "--geometry", "8x8", "--t0-us", "0", "--span-us", "60000",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        rows = json.loads((tmp_path / "density.json").read_text())
        assert len(rows) == 6
        assert all(r["events_per_us"] == 0.0 for r in rows)

    def test_energy_matches_api(self, tmp_path):
        from evslicer.energy import energy_report, profile_network
        events, stream = synth_csv(tmp_path)
        ckpt = micro_checkpoint(tmp_path)
        rc = main(["report", "energy", "--checkpoint", str(ckpt),
                   "--events", str(events), "--dt-us", "10000",
                   "--geometry", "8x8", "--out-dir", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "energy.json").read_text())
        net = SlicerNet.load(ckpt)
        expected = energy_report(profile_network(net, build_cells(stream, 10000)))
        assert report["totals"]["joules"] == expected["totals"]["joules"]
        assert report["constants"]["e_mac_joules"] == 4.6e-12

    def test_compare_rows(self, tmp_path):
        paths = []
        for i in range(4):
            p, _ = synth_csv(tmp_path, name=f"s{i}.csv", seed=i,
                             duration_ms=80, rate_per_ms=[[0, 80, 2.0]])
            paths.append(f"{p}:{i % 2}")
        ckpt = micro_checkpoint(tmp_path)
        rc = main(["report", "compare", "--checkpoint", str(ckpt),
                   "--train", *paths[:2], "--test", *paths[2:],
                   "--dt-us", "10000", "--geometry", "8x8",
                   "--target-events", "40", "--clf-passes", "1",
                   "--fmt", "csv", "--out-dir", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "compare.csv").read_text().splitlines()
        assert lines[0].startswith("policy,")
        policies = {l.split(",")[0] for l in lines[1:]}
        assert policies == {"adaptive", "fixed-duration", "fixed-count", "random"}

    def test_compare_without_data_exits_2(self, tmp_path):
        ckpt = micro_checkpoint(tmp_path)
        assert main(["report", "compare", "--checkpoint", str(ckpt),
                     "--out-dir", str(tmp_path)]) == 2

    def test_bad_labels_exit_2(self, tmp_path):
        events, _ = synth_csv(tmp_path)
        ckpt = micro_checkpoint(tmp_path)
        assert main(["report", "compare", "--checkpoint", str(ckpt),
                     "--train", str(events), "--test", str(events),
                     "--geometry", "8x8", "--out-dir", str(tmp_path)]) == 2


class TestParser:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

    def test_no_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_bad_geometry_exits_2(self, tmp_path):
        events, _ = synth_csv(tmp_path)
        assert main(["cells", "--events", str(events), "--dt-us", "1000",
                     "--geometry", "8by8", "--out-dir", str(tmp_path)]) == 2
