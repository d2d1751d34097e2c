import io
import json
import re

import numpy as np
import pytest

from vlaad.cli import build_parser, run
from vlaad.plotting import emit_trace_plot, parse_trace_csv


def run_cli(capsys, *argv):
    code = run(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def manifest(tmp_path, capsys):
    path = tmp_path / "m.jsonl"
    code, _, err = run_cli(capsys, "synth", "--n-normal", "12",
                           "--n-collision", "12", "--dim", "8",
                           "--seed", "0", "-o", str(path))
    assert code == 0, err
    return path


class TestParserContract:
    def test_help_lists_every_accepted_flag(self):
        """Flags in the help text and flags accepted must coincide."""
        parser = build_parser()
        subparsers = next(a for a in parser._actions
                          if hasattr(a, "choices") and a.choices)
        for name, sub in subparsers.choices.items():
            help_text = sub.format_help()
            documented = set(re.findall(r"--[a-z][a-z-]*", help_text))
            accepted = {opt for action in sub._actions
                        for opt in action.option_strings
                        if opt.startswith("--")}
            assert documented == accepted, name

    def test_unknown_flag_exit_2(self, capsys):
        code, _, _ = run_cli(capsys, "synth", "--n-normal", "1",
                             "--n-collision", "1", "-o", "x", "--bogus")
        assert code == 2

    def test_unknown_subcommand_exit_2(self, capsys):
        code, _, _ = run_cli(capsys, "frobnicate")
        assert code == 2

    def test_help_exit_0(self, capsys):
        assert run_cli(capsys, "--help")[0] == 0
        assert run_cli(capsys, "train", "--help")[0] == 0


class TestSynthIngest:
    def test_synth_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for path in (a, b):
            code, _, _ = run_cli(capsys, "synth", "--n-normal", "10",
                                 "--n-collision", "10", "--seed", "0",
                                 "-o", str(path))
            assert code == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().splitlines()) == 20

    def test_ingest_summary(self, manifest, capsys):
        code, out, _ = run_cli(capsys, "ingest", "--manifest", str(manifest))
        assert code == 0
        summary = json.loads(out)
        assert summary["records"] == 24
        assert summary["positives"] == 12

    def test_ingest_missing_file_exit_1(self, capsys, tmp_path):
        code, _, _ = run_cli(capsys, "ingest", "--manifest",
                             str(tmp_path / "nope.jsonl"))
        assert code == 1

    def test_ingest_bad_manifest_exit_2(self, capsys, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{\"clip_id\": \"x\"}\n")
        code, _, _ = run_cli(capsys, "ingest", "--manifest", str(bad))
        assert code == 2


class TestTrainEval:
    def train_args(self, manifest, out):
        return ["train", "--manifest", str(manifest), "-o", str(out),
                "--set", "embed_dim=24", "--set", "hidden_dim=8",
                "--set", "epochs=2", "--seed", "0"]

    def test_train_then_eval_deterministic(self, manifest, tmp_path, capsys):
        ckpt_a = tmp_path / "a.bin"
        ckpt_b = tmp_path / "b.bin"
        code, out_a, _ = run_cli(capsys, *self.train_args(manifest, ckpt_a))
        assert code == 0
        code, out_b, _ = run_cli(capsys, *self.train_args(manifest, ckpt_b))
        assert code == 0
        assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
        ja, jb = json.loads(out_a), json.loads(out_b)
        ja.pop("checkpoint"), jb.pop("checkpoint")
        assert ja == jb

        evals = []
        for ckpt in (ckpt_a, ckpt_b):
            code, out, _ = run_cli(capsys, "eval", "--checkpoint", str(ckpt),
                                   "--manifest", str(manifest))
            assert code == 0
            evals.append(json.loads(out))
        assert evals[0] == evals[1]
        for key in ("auc", "f1", "accuracy", "tau", "tpr", "fpr"):
            assert key in evals[0]

    def test_history_csv(self, manifest, tmp_path, capsys):
        ckpt = tmp_path / "c.bin"
        hist = tmp_path / "h.csv"
        code, _, _ = run_cli(capsys, *self.train_args(manifest, ckpt),
                             "--history", str(hist))
        assert code == 0
        lines = hist.read_text().splitlines()
        assert lines[0] == "epoch,L_sim,L_cls,s_sim,s_cls,L_total,val_auc"
        assert len(lines) == 3

    def test_bad_config_key_exit_2(self, manifest, tmp_path, capsys):
        code, _, _ = run_cli(capsys, "train", "--manifest", str(manifest),
                             "-o", str(tmp_path / "x.bin"),
                             "--set", "learning_rte=0.1")
        assert code == 2

    def test_config_file_with_flag_precedence(self, manifest, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"embed_dim": 24, "hidden_dim": 8,
                                   "epochs": 5, "seed": 9}))
        ckpt = tmp_path / "c.bin"
        code, _, _ = run_cli(capsys, "train", "--manifest", str(manifest),
                             "--config", str(cfg), "-o", str(ckpt),
                             "--set", "epochs=1", "--seed", "0")
        assert code == 0
        from vlaad.model import load_checkpoint

        loaded = load_checkpoint(ckpt)
        assert loaded.epoch == 1  # --set beats the file
        assert loaded.seed == 0  # --seed beats both


class TestTraceAndPlot:
    def make_ckpt(self, manifest, tmp_path, capsys):
        ckpt = tmp_path / "t.bin"
        code, _, _ = run_cli(capsys, "train", "--manifest", str(manifest),
                             "-o", str(ckpt), "--set", "embed_dim=24",
                             "--set", "hidden_dim=8", "--set", "epochs=1",
                             "--seed", "0")
        assert code == 0
        return ckpt

    def test_trace_csv_and_plot(self, manifest, tmp_path, capsys):
        ckpt = self.make_ckpt(manifest, tmp_path, capsys)
        csv_path = tmp_path / "trace.csv"
        svg_path = tmp_path / "trace.svg"
        code, _, _ = run_cli(capsys, "trace", "--checkpoint", str(ckpt),
                             "--manifest", str(manifest),
                             "--clip-id", "synth-train-n00000",
                             "-o", str(csv_path), "--plot", str(svg_path))
        assert code == 0
        rows = csv_path.read_text().splitlines()
        assert rows[0] == "clip_id,snippet_index,t_start_s,logit,prob,attention"
        assert len(rows) == 6  # header + 5 snippets
        svg = svg_path.read_text()
        assert svg.count('class="marker"') == 5
        assert svg.count("<polyline") == 1

    def test_wide_csv_two_variants(self, tmp_path):
        csv_path = tmp_path / "wide.csv"
        csv_path.write_text(
            "t_start_s,mil,no_mil\n0,0.1,0.3\n2,0.2,0.5\n4,0.9,0.6\n")
        out = tmp_path / "wide.svg"
        assert emit_trace_plot(csv_path, out) == 2
        svg = out.read_text()
        assert svg.count("<polyline") == 2
        assert svg.count('class="marker"') == 6
        assert ">mil</text>" in svg and ">no_mil</text>" in svg

    def test_empty_trace_no_file_written(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("clip_id,snippet_index,t_start_s,logit,prob,attention\n")
        out = tmp_path / "out.svg"
        code, _, err = run_cli(capsys, "trace", "--from-csv", str(empty),
                               "--plot", str(out))
        assert code == 2
        assert not out.exists()

    def test_malformed_row_names_line(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,mil\n0,0.1\n1,not_a_number\n")
        with pytest.raises(Exception, match="line 3"):
            parse_trace_csv(bad)


class TestScoreWilcoxon:
    def test_score_runs(self, tmp_path, capsys):
        runs = tmp_path / "runs.jsonl"
        rows = [{"route_id": "r0", "km": 10.0, "route_completion": 50.0,
                 "infractions": {"pedestrian": 1}},
                {"route_id": "r1", "km": 5.0, "route_completion": 100.0,
                 "infractions": {}}]
        runs.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        code, out, _ = run_cli(capsys, "score", "--runs", str(runs))
        assert code == 0
        lines = [json.loads(l) for l in out.splitlines()]
        assert lines[0]["DS"] == pytest.approx(25.0)
        assert lines[1]["DS"] == pytest.approx(100.0)
        agg = lines[-1]["aggregate"]
        assert agg["routes"] == 2
        assert agg["Col_per_km"] == pytest.approx(1.0 / 15.0)

    def test_wilcoxon_reference_route_deltas(self, tmp_path, capsys):
        deltas = np.arange(1.0, 21.0)
        for i in (10, 18, 20):
            deltas[i - 1] *= -1
        path = tmp_path / "deltas.json"
        path.write_text(json.dumps(list(deltas)))
        code, out, _ = run_cli(capsys, "wilcoxon", "--deltas", str(path))
        assert code == 0
        report = json.loads(out)
        assert report["W"] == 162.0
        assert report["n"] == 20
        assert report["method"] == "exact"
        assert abs(report["p"] - 0.016) <= 0.005

    def test_wilcoxon_object_payload(self, tmp_path, capsys):
        path = tmp_path / "d.json"
        path.write_text(json.dumps({"deltas": [1.0, 2.0, 3.0]}))
        code, out, _ = run_cli(capsys, "wilcoxon", "--deltas", str(path))
        assert code == 0
        assert json.loads(out)["p"] == pytest.approx(0.125)

    def test_all_zero_deltas_exit_2(self, tmp_path, capsys):
        path = tmp_path / "z.json"
        path.write_text("[0.0, 0.0]")
        assert run_cli(capsys, "wilcoxon", "--deltas", str(path))[0] == 2


class TestCachedEncoderSeam:
    def test_eval_from_embedding_cache_matches_stub(self, manifest, tmp_path,
                                                    capsys, monkeypatch):
        """External-backbone seam: precomputed embeddings served from the
        cache file reproduce the stub-encoder evaluation exactly."""
        from vlaad.datakit import read_manifest as read_m
        from vlaad.embeddings import (StubEncoder, write_embedding_cache)
        from vlaad.mil import segment_clip
        from vlaad.model import load_checkpoint

        ckpt_path = tmp_path / "c.bin"
        code, _, _ = run_cli(capsys, "train", "--manifest", str(manifest),
                             "-o", str(ckpt_path), "--set", "embed_dim=24",
                             "--set", "hidden_dim=8", "--set", "epochs=1",
                             "--seed", "0")
        assert code == 0
        code, stub_out, _ = run_cli(capsys, "eval", "--checkpoint",
                                    str(ckpt_path), "--manifest", str(manifest))
        assert code == 0

        ckpt = load_checkpoint(ckpt_path)
        stub = StubEncoder(dim=ckpt.dim, seed=ckpt.seed)
        entries = {}
        for rec in read_m(manifest):
            bag = segment_clip(rec, 8, 8, stub)
            for i, row in enumerate(bag.snippets):
                entries[f"{rec.clip_id}:{i}"] = row
            entries[rec.caption] = stub.encode_text(rec.caption).values
        cache = tmp_path / "emb.bin"
        write_embedding_cache(cache, entries, dim=ckpt.dim)

        monkeypatch.setenv("VLAAD_ENCODER", "cache")
        code, cache_out, _ = run_cli(capsys, "eval", "--checkpoint",
                                     str(ckpt_path), "--manifest",
                                     str(manifest), "--embedding-cache",
                                     str(cache))
        assert code == 0
        assert json.loads(cache_out) == json.loads(stub_out)

    def test_cache_mode_requires_path(self, manifest, tmp_path, capsys,
                                      monkeypatch):
        monkeypatch.setenv("VLAAD_ENCODER", "cache")
        code, _, _ = run_cli(capsys, "train", "--manifest", str(manifest),
                             "-o", str(tmp_path / "x.bin"))
        assert code == 2


class TestInfer:
    def test_stdin_stream(self, manifest, tmp_path, capsys, monkeypatch):
        ckpt = tmp_path / "i.bin"
        code, _, _ = run_cli(capsys, "train", "--manifest", str(manifest),
                             "-o", str(ckpt), "--set", "embed_dim=24",
                             "--set", "hidden_dim=8", "--set", "epochs=1",
                             "--seed", "0")
        assert code == 0
        rng = np.random.default_rng(3)
        lines = "\n".join(
            json.dumps({"tick": t, "features": rng.standard_normal(8).tolist()})
            for t in range(12)) + "\n"
        monkeypatch.setattr("sys.stdin", io.StringIO(lines))
        code, out, _ = run_cli(capsys, "infer", "--checkpoint", str(ckpt))
        assert code == 0
        tokens = [float(x) for x in out.splitlines()]
        assert len(tokens) == 12
        assert all(0.0 <= t <= 1.0 for t in tokens)
        # non-update ticks repeat the cached token
        assert tokens[1] == tokens[0]
