"""End-to-end command-line runs on a tiny task."""

import json

import pytest

from aga.checkpoint import load_checkpoint
from aga.cli import main
from aga.data import load_embedding_file

SPEC = 'seed = 0\nn_actions = 5\nd_backbone = 8\nT = 10\n'
CONFIG = """seed = 0
[task]
n_actions = 5
d_backbone = 8
T = 10
[model]
d_model = 16
d_key = 8
n_heads = 2
queue_size = 4
[train]
epochs = 3
batch_size = 8
lr_peak = 5e-3
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Spec, config, data and one finished training run, shared by the module."""
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.toml").write_text(SPEC)
    (d / "run.toml").write_text(CONFIG)
    assert main(["generate-data", "--spec", str(d / "spec.toml"), "--out", str(d / "train.agae"), "--episodes", "16", "--seed", "1"]) == 0
    assert main(["generate-data", "--spec", str(d / "spec.toml"), "--out", str(d / "val.agae"), "--episodes", "8", "--seed", "2"]) == 0
    assert main(["train", "--config", str(d / "run.toml"), "--data", str(d / "train.agae"), "--out", str(d / "run")]) == 0
    return d


class TestGenerateData:
    def test_deterministic(self, workdir, capsys, tmp_path):
        for name in "ab":
            assert run(capsys, "generate-data", "--spec", workdir / "spec.toml", "--out", tmp_path / f"{name}.agae", "--episodes", 5, "--seed", 3)[0] == 0
        assert (tmp_path / "a.agae").read_bytes() == (tmp_path / "b.agae").read_bytes()
        assert len(load_embedding_file(tmp_path / "a.agae")) == 5

    def test_zero_episodes(self, workdir, capsys, tmp_path):
        code, _, err = run(capsys, "generate-data", "--spec", workdir / "spec.toml", "--out", tmp_path / "z.agae", "--episodes", 0)
        assert code == 2 and "episodes" in err
        assert not (tmp_path / "z.agae").exists()

    def test_env_seed_fallback(self, workdir, capsys, tmp_path, monkeypatch):
        run(capsys, "generate-data", "--spec", workdir / "spec.toml", "--out", tmp_path / "flag.agae", "--episodes", 3, "--seed", 5)
        monkeypatch.setenv("AGA_SEED", "5")
        run(capsys, "generate-data", "--spec", workdir / "spec.toml", "--out", tmp_path / "env.agae", "--episodes", 3)
        monkeypatch.delenv("AGA_SEED")
        run(capsys, "generate-data", "--spec", workdir / "spec.toml", "--out", tmp_path / "none.agae", "--episodes", 3)
        assert (tmp_path / "flag.agae").read_bytes() == (tmp_path / "env.agae").read_bytes()
        assert (tmp_path / "flag.agae").read_bytes() != (tmp_path / "none.agae").read_bytes()

    def test_unlabeled(self, workdir, capsys, tmp_path):
        run(capsys, "generate-data", "--spec", workdir / "spec.toml", "--out", tmp_path / "u.agae", "--episodes", 2, "--no-labels")
        assert all(ep.actions is None for ep in load_embedding_file(tmp_path / "u.agae"))


class TestTrain:
    def test_outputs(self, workdir):
        run_dir = workdir / "run"
        assert sorted(p.name for p in run_dir.iterdir()) == ["epoch_001.ckpt", "epoch_002.ckpt", "epoch_003.ckpt", "final.ckpt", "report.jsonl"]
        lines = [json.loads(l) for l in (run_dir / "report.jsonl").read_text().splitlines()]
        assert lines[-1]["kind"] == "summary"

    def test_missing_data(self, workdir, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--config", workdir / "run.toml", "--data", tmp_path / "absent.agae", "--out", tmp_path / "o")
        assert code == 2 and "absent.agae" in err

    def test_resume_is_bit_exact(self, workdir, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--config", workdir / "run.toml", "--data", workdir / "train.agae", "--out", tmp_path / "r", "--resume", workdir / "run" / "epoch_001.ckpt")
        assert code == 0
        resumed = load_checkpoint(tmp_path / "r" / "final.ckpt")
        full = load_checkpoint(workdir / "run" / "final.ckpt")
        assert resumed.build_model().checksum() == full.build_model().checksum()
        assert (tmp_path / "r" / "epoch_003.ckpt").read_bytes() == (workdir / "run" / "epoch_003.ckpt").read_bytes()

    def test_seed_determinism(self, workdir, capsys, tmp_path):
        run(capsys, "train", "--config", workdir / "run.toml", "--data", workdir / "train.agae", "--out", tmp_path / "s", "--seed", 0)
        assert (tmp_path / "s" / "epoch_003.ckpt").read_bytes() == (workdir / "run" / "epoch_003.ckpt").read_bytes()

    def test_bad_config(self, workdir, capsys, tmp_path):
        (tmp_path / "bad.toml").write_text("[model]\nalpha = 3.0\n")
        code, _, err = run(capsys, "train", "--config", tmp_path / "bad.toml", "--data", workdir / "train.agae", "--out", tmp_path / "o")
        assert code == 2 and "alpha" in err
        assert not (tmp_path / "o").exists()


class TestEvaluate:
    def test_prints_each_k(self, workdir, capsys):
        code, out, _ = run(capsys, "evaluate", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae", "--topk", "1,3")
        assert code == 0
        assert [l.split("\t")[0] for l in out.splitlines()] == ["top1_acc", "mt1r", "top3_acc", "mt3r"]
        assert out == run(capsys, "evaluate", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae", "--topk", "1,3")[1]

    def test_corrupted_checkpoint(self, workdir, capsys, tmp_path):
        buf = bytearray((workdir / "run" / "final.ckpt").read_bytes())
        buf[len(buf) // 2] ^= 1
        (tmp_path / "bad.ckpt").write_bytes(bytes(buf))
        code, out, err = run(capsys, "evaluate", "--checkpoint", tmp_path / "bad.ckpt", "--data", workdir / "val.agae")
        assert code == 2 and "hash" in err and out == ""

    def test_bad_topk(self, workdir, capsys):
        assert run(capsys, "evaluate", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae", "--topk", "")[0] == 2


class TestSweep:
    def test_rows_per_value(self, workdir, capsys, tmp_path):
        (tmp_path / "short.toml").write_text(CONFIG.replace("epochs = 3", "epochs = 1"))
        code, out, _ = run(capsys, "sweep", "--config", tmp_path / "short.toml", "--data", workdir / "train.agae", "--val-data", workdir / "val.agae", "--param", "queue", "--values", "1,4", "--seeds", "0,1")
        rows = [json.loads(l) for l in out.splitlines()]
        assert code == 0 and [(r["value"], r["seed"]) for r in rows] == [(1, 0), (1, 1), (4, 0), (4, 1)]

    def test_empty_values(self, workdir, capsys):
        code, _, err = run(capsys, "sweep", "--config", workdir / "run.toml", "--data", workdir / "train.agae", "--val-data", workdir / "val.agae", "--param", "alpha", "--values", "")
        assert code == 2 and "values" in err


class TestAnalyze:
    def test_forward(self, workdir, capsys, tmp_path):
        (tmp_path / "probe.txt").write_text("# query;candidates\n1;0,2,3\n2,4;0,1\n")
        code, out, _ = run(capsys, "analyze", "forward", "--checkpoint", workdir / "run" / "final.ckpt", "--probe", tmp_path / "probe.txt", "--out", tmp_path / "f.json")
        lines = out.splitlines()
        assert code == 0 and [len(l.split()) for l in lines] == [3, 2]
        assert len(json.loads((tmp_path / "f.json").read_text())["payload"]["rows"]) == 2

    def test_backward_defaults(self):
        from aga.cli import build_parser

        args = build_parser().parse_args(["analyze", "backward"])
        assert (args.eta, args.eps, args.iter) == (1e2, 1e-6, 5000)

    def test_backward(self, workdir, capsys, tmp_path):
        code, out, _ = run(capsys, "analyze", "backward", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae", "--target", 2, "--iter", 200, "--out", tmp_path / "b.json", "--plot-data", tmp_path / "b.tsv")
        assert code == 0 and out.startswith("target 2")
        payload = json.loads((tmp_path / "b.json").read_text())["payload"]
        assert (tmp_path / "b.tsv").read_text().splitlines()[0] == "iteration\tloss"
        assert len((tmp_path / "b.tsv").read_text().splitlines()) == len(payload["losses"]) + 1

    def test_backward_needs_target(self, workdir, capsys):
        assert run(capsys, "analyze", "backward", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae")[0] == 2

    def test_gate_trace(self, workdir, capsys):
        code, out, _ = run(capsys, "analyze", "gate-trace", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae", "--episode", 1)
        rows = [l.split("\t") for l in out.splitlines()]
        assert code == 0 and len(rows) == 10 and [int(r[0]) for r in rows] == list(range(10))
        assert all(0 <= float(r[2]) <= 1 for r in rows)

    def test_episode_out_of_range(self, workdir, capsys):
        assert run(capsys, "analyze", "gate-trace", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae", "--episode", 99)[0] == 2

    def test_robustness(self, workdir, capsys):
        code, out, _ = run(capsys, "analyze", "robustness", "--checkpoint", workdir / "run" / "final.ckpt", "--data", workdir / "val.agae")
        assert code == 0 and [int(l.split("\t")[0]) for l in out.splitlines()] == list(range(11))

    def test_guidance(self, workdir, capsys, tmp_path):
        (tmp_path / "short.toml").write_text(CONFIG.replace("epochs = 3", "epochs = 1"))
        code, out, _ = run(capsys, "analyze", "guidance", "--config", tmp_path / "short.toml", "--data", workdir / "train.agae", "--val-data", workdir / "val.agae", "--pairs", "self_pred_full:self_pred_full,self_pred_full:self_pred_top1_onehot")
        assert code == 0 and len(out.splitlines()) == 2

    def test_needs_checkpoint(self, capsys):
        code, _, err = run(capsys, "analyze", "forward")
        assert code == 2 and "--checkpoint" in err

    def test_unknown_command(self, capsys):
        assert run(capsys, "frobnicate")[0] == 2
