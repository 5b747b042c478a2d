import json

import numpy as np
import pytest

from priorbridge import cli
from priorbridge.energies import EnergyForce
from priorbridge.eval import evaluate
from priorbridge.geometry import DatasetStats, MarkedPointSet, extract_stats
from priorbridge.io import read_dataset, write_item
from priorbridge.model import load_checkpoint

SMALL = ["hidden=8", "depth=1", "temb_dim=8", "epochs=2", "batch_size=2", "times_per_item=2", "steps=10"]


def sets(*items):
    out = []
    for kv in items:
        out += ["--set", kv]
    return out


@pytest.fixture
def clouds(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(4):
        write_item(MarkedPointSet(rng.standard_normal((6, 3))), d / f"c{i}.txt")
    return d


@pytest.fixture
def molecules(tmp_path):
    d = tmp_path / "mols"
    d.mkdir()
    rng = np.random.default_rng(1)
    for i in range(3):
        x = np.array([[0, 0, 0], [1.1, 0, 0], [-0.4, 1.0, 0], [0.3, -0.2, 1.0]]) + 0.03 * rng.standard_normal((4, 3))
        lines = ["4", ""] + [f"{s} {a} {b} {c}" for s, (a, b, c) in zip("CHHO", x)]
        (d / f"m{i}.xyz").write_text("\n".join(lines) + "\n")
    return d


def test_extract_stats_matches_library_and_is_stable(clouds, tmp_path):
    out = tmp_path / "s" / "stats.json"
    assert cli.main(["extract-stats"] + sets(f"data={clouds}", f"out={out}", "K=3")) == 0
    stats = DatasetStats.from_json(out.read_text())
    direct = extract_stats(read_dataset(clouds), 3)
    assert stats.fingerprint() == direct.fingerprint()
    first = out.read_bytes()
    assert cli.main(["extract-stats", "--config", str(out.parent / "resolved.cfg")]) == 0
    assert out.read_bytes() == first


def test_extract_stats_single_molecule_floor(tmp_path):
    one = tmp_path / "one"
    one.mkdir()
    # a single edge has no spread, so its variance sits at the floor
    (one / "m.xyz").write_text("2\n\nC 0 0 0\nH 1.1 0 0\n")
    out = tmp_path / "stats.json"
    assert cli.main(["extract-stats"] + sets(f"data={one}", f"out={out}", "types=H,C,O", "K=1")) == 0
    stats = DatasetStats.from_json(out.read_text())
    assert stats.edge == {(0, 1): (1.1, stats.var_floor)}


def train_cmd(clouds, out, *extra):
    return ["train"] + sets(f"data={clouds}", f"out={out}", *SMALL, *extra)


def test_train_rerun_from_resolved_is_bit_exact(clouds, tmp_path):
    a = tmp_path / "a"
    assert cli.main(train_cmd(clouds, a, "bridge=forced", "energy=knn_uniform", "K=2")) == 0
    cfg_text = (a / "resolved.cfg").read_text()
    assert "seed=" in cfg_text and "seed=none" not in cfg_text
    b = tmp_path / "b"
    assert cli.main(["train", "--config", str(a / "resolved.cfg")] + sets(f"out={b}")) == 0
    assert (a / "checkpoint.pbc").read_bytes() == (b / "checkpoint.pbc").read_bytes()
    assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()
    assert (a / "train_log.csv").read_text().splitlines()[0] == "epoch,loss,alpha"


def test_train_lr_zero_is_init(clouds, tmp_path):
    out = tmp_path / "t"
    assert cli.main(train_cmd(clouds, out, "learning_rate=0", "seed=3")) == 0
    ckpt = load_checkpoint(out / "checkpoint.pbc")
    from priorbridge.model import make_model

    assert np.array_equal(ckpt.params, make_model(ckpt.config, 3).params)


def test_flags_override_file(clouds, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data={clouds}\nout={tmp_path / 'o'}\nepochs=5\nseed=1\n" + "".join(s + "\n" for s in SMALL[:3]))
    assert cli.main(["train", "--config", str(cfg)] + sets("epochs=1", "steps=10", "times_per_item=1")) == 0
    resolved = (tmp_path / "o" / "resolved.cfg").read_text()
    assert "epochs=1\n" in resolved and "seed=1\n" in resolved and "hidden=8\n" in resolved


@pytest.fixture
def checkpoint(clouds, tmp_path):
    out = tmp_path / "ck"
    assert cli.main(train_cmd(clouds, out, "seed=2")) == 0
    return out / "checkpoint.pbc"


def test_sample_rerun_bit_exact_and_frames(checkpoint, tmp_path):
    a = tmp_path / "sa"
    assert cli.main(["sample"] + sets(f"checkpoint={checkpoint}", f"out={a}", "n_items=3", "m_points=5",
                                      "steps=4", "frames=true")) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["checkpoint_fingerprint"] == load_checkpoint(checkpoint).fingerprint()
    assert len(list(a.glob("sample_*.xyz"))) == 3
    frames = (a / "trajectories" / "trajectory_0000.xyz").read_text()
    assert frames.count("step=") == 5
    b = tmp_path / "sb"
    assert cli.main(["sample", "--config", str(a / "resolved.cfg")] + sets(f"out={b}")) == 0
    for f in sorted(a.glob("sample_*.xyz")):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_sample_formats(checkpoint, tmp_path):
    for fmt in ("ply", "txt"):
        out = tmp_path / fmt
        assert cli.main(["sample"] + sets(f"checkpoint={checkpoint}", f"out={out}", "n_items=2", "m_points=4",
                                          "steps=3", "seed=1", f"format={fmt}")) == 0
        assert len(read_dataset(out)) == 2
    assert cli.main(["sample"] + sets(f"checkpoint={checkpoint}", "format=obj", "seed=1")) == 2


def test_eval_self_and_matches_api(clouds, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval"] + sets(f"samples={clouds}", f"reference={clouds}", f"out={out}", "K=2")) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["mmd_cd"] == 0.0 and rep["cov_cd"] == 1.0 and rep["mmd_emd"] == 0.0
    direct = evaluate(read_dataset(clouds), read_dataset(clouds), K=2)
    assert rep == json.loads(direct.to_json())
    assert "cov_cd" in (out / "report.txt").read_text()


def test_eval_generated_vs_reference_matches_api(checkpoint, clouds, tmp_path):
    s = tmp_path / "gen"
    assert cli.main(["sample"] + sets(f"checkpoint={checkpoint}", f"out={s}", "n_items=4", "m_points=6",
                                      "steps=5", "seed=9", "format=txt")) == 0
    out = tmp_path / "ev"
    assert cli.main(["eval"] + sets(f"samples={s}", f"reference={clouds}", f"out={out}", "K=2")) == 0
    direct = evaluate(read_dataset(s), read_dataset(clouds), K=2)
    assert json.loads((out / "report.json").read_text()) == json.loads(direct.to_json())
    first = (out / "report.json").read_bytes()
    assert cli.main(["eval", "--config", str(out / "resolved.cfg")]) == 0
    assert (out / "report.json").read_bytes() == first


def test_eval_molecules_stability(molecules, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval"] + sets(f"samples={molecules}", f"out={out}", "types=H,C,O", "emd=false")) == 0
    rep = json.loads((out / "report.json").read_text())
    assert 0.0 <= rep["atom_stability"] <= 1.0 and rep["uniqueness"] is not None and rep["mmd_cd"] is None


def test_eval_empty_dir_is_data_error(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["eval"] + sets(f"samples={empty}", f"out={tmp_path / 'o'}")) == 3


def test_verify_pass_and_fail(tmp_path):
    ok = tmp_path / "ok"
    code = cli.main(["verify"] + sets(f"out={ok}", "m_points=8", "steps_list=20,80,320", "seed=1"))
    assert code == 0
    rep = json.loads((ok / "report.json").read_text())
    assert rep["pinning"]["status"] == "PASS" and rep["gronwall"]["status"] == "PASS"
    bad = tmp_path / "bad"
    # a 1e-6 tolerance factor cannot be met by the sqrt(dt) terminal noise
    code = cli.main(["verify"] + sets(f"out={bad}", "m_points=8", "steps_list=20,80", "seed=1", "tol_factor=1e-6"))
    assert code == 5
    forced = tmp_path / "forced"
    assert cli.main(["verify"] + sets(f"out={forced}", "bridge=forced", "m_points=8", "K=2",
                                      "steps_list=20,80,320", "seed=2")) == 0
    assert json.loads((forced / "report.json").read_text())["pinning"]["status"] == "PASS"


def test_energy_command_matches_library(tmp_path, capsys):
    p = tmp_path / "two.txt"
    p.write_text("0 0 0\n1 0 0\n")
    assert cli.main(["energy"] + sets(f"input={p}", "energy=riesz", f"out={tmp_path / 'e'}")) == 0
    text = capsys.readouterr().out
    assert "value=1.0" in text
    rows = [list(map(float, ln.split())) for ln in text.splitlines() if not ln.startswith("#")]
    assert np.allclose(rows, EnergyForce("riesz").grad(MarkedPointSet(np.array([[0, 0, 0], [1.0, 0, 0]]))))
    assert (tmp_path / "e" / "energy.txt").read_text() == text


def test_exit_codes(tmp_path, clouds):
    assert cli.main(["eval"]) == 2
    assert cli.main(["train"] + sets("data=x", "bogus=1")) == 2
    assert cli.main(["train"] + sets(f"data={clouds}", "learning_rate=abc")) == 2
    assert cli.main(["eval"] + sets(f"samples={tmp_path / 'nope'}")) == 3
    bad = tmp_path / "bad.pbc"
    bad.write_bytes(b"garbage")
    assert cli.main(["sample"] + sets(f"checkpoint={bad}", "seed=1")) == 3
    p = tmp_path / "pair.txt"
    p.write_text("0 0 0\n0 0 0\n")
    assert cli.main(["energy"] + sets(f"input={p}", "energy=riesz")) == 4
    assert cli.main(["eval", "--threads", "0"] + sets(f"samples={clouds}")) == 2
    assert cli.main(["energy", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_threads_recorded(clouds, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--threads", "1"] + sets(f"samples={clouds}", f"out={out}", "emd=false")) == 0
    assert "threads=1\n" in (out / "resolved.cfg").read_text()
    assert cli.main(["eval", "--config", str(out / "resolved.cfg")]) == 0
