import json

import numpy as np
import pytest

from ultrametric.harness import runner
from ultrametric.harness.cli import main
from ultrametric.harness.config import ConfigError, ExperimentConfig
from ultrametric.harness.plots import PLOT_KINDS, MissingObservableError, emit_plots
from ultrametric.harness.runner import INLINE_LIMIT, CellResult, Cell, NumericalFailureError, cell_seed, load_rows, run
from ultrametric.harness.summary import EmptyResultsError, summarize
from ultrametric.spectral import EigensolverError


def small(tmp_path, **kw):
    base = dict(epsilons=[-0.75, 1.0], levels=[3, 4], realizations=2, observables=["spectrum"], output_dir=str(tmp_path / "out"))
    base.update(kw)
    return ExperimentConfig(**base)


def snapshot(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_config_lists_every_violation():
    cfg = ExperimentConfig(epsilons=[-0.25], levels=[20], realizations=0, alpha=1.5, observables=["flow", "bogus"], alpha_tilde=0.4)
    v = cfg.violations()
    text = "\n".join(v)
    for needle in ("level 20", "realizations", "alpha=1.5", "bogus", "exceed 1/2", "below -epsilon"):
        assert needle in text
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.violations == v


def test_alpha_tilde_window():
    ok = ExperimentConfig(epsilons=[-0.9], observables=["flow"], alpha_tilde=0.7)
    assert ok.violations() == []
    assert ExperimentConfig(epsilons=[-0.6], observables=["flow"], alpha_tilde=0.7).violations()


def test_yaml_roundtrip_and_hash(tmp_path):
    cfg = small(tmp_path, master_seed=5)
    f = tmp_path / "c.yaml"
    f.write_text(cfg.to_yaml())
    back = ExperimentConfig.from_yaml(f)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert small(tmp_path, output_dir="elsewhere", workers=3).config_hash() == small(tmp_path).config_hash()
    assert small(tmp_path, master_seed=6).config_hash() != cfg.config_hash()
    f.write_text("epsilons: [0.1]\nunknown_key: 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(f)


def test_cell_seeds_distinct_and_stable():
    seeds = {cell_seed(1, e, n, r) for e in (-0.75, 0.5) for n in (3, 4) for r in range(5)}
    assert len(seeds) == 20
    assert cell_seed(1, 0.5, 3, 0) == cell_seed(1, 0.5, 3, 0)
    assert cell_seed(1, 0.5, 3, 0) != cell_seed(2, 0.5, 3, 0)


def test_spectrum_rows_shape(tmp_path):
    out = run(small(tmp_path, epsilons=[0.0], levels=[3]))
    rows = [r for r in load_rows(out) if r["observable"] == "spectrum.eigenvalues"]
    assert len(rows) == 2 and all(len(r["value"]) == 8 for r in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["cells"]) == set(manifest["completed"])
    assert all("seed" in c for c in manifest["cells"].values())


def test_rerun_is_byte_identical(tmp_path):
    cfg = small(tmp_path, observables=["spectrum", "vectors", "green", "stats"], holder_min_decades=0.1)
    a = snapshot(run(cfg, tmp_path / "a"))
    b = snapshot(run(cfg, tmp_path / "b"))
    assert a == b and "rows.ndjson" in a and "results.csv" in a


def test_parallel_matches_serial(tmp_path):
    cfg = small(tmp_path)
    serial = snapshot(run(cfg, tmp_path / "s"))
    cfg.workers = 2
    assert snapshot(run(cfg, tmp_path / "p")) == serial


def test_resume_skips_completed_and_truncates(tmp_path, monkeypatch):
    cfg = small(tmp_path)
    full = snapshot(run(cfg, tmp_path / "full"))
    out = tmp_path / "crash"
    run(cfg, out)
    manifest = json.loads((out / "manifest.json").read_text())
    # a crash loses the most recently written cells
    keys = sorted(manifest["completed"], key=lambda k: manifest["completed"][k]["offset"])
    for k in keys[-3:]:
        del manifest["completed"][k]
    (out / "manifest.json").write_text(json.dumps(manifest))
    with open(out / "rows.ndjson", "a") as fh:
        fh.write('{"partial": ')
    calls = []
    original = runner.run_cell
    monkeypatch.setattr(runner, "run_cell", lambda c, cell: calls.append(cell.key) or original(c, cell))
    run(cfg, out)
    assert calls == keys[-3:]
    assert snapshot(out) == full


def test_other_config_in_same_directory(tmp_path):
    run(small(tmp_path), tmp_path / "x")
    with pytest.raises(ConfigError):
        run(small(tmp_path, master_seed=9), tmp_path / "x")


def test_failures_are_counted(tmp_path, monkeypatch):
    def broken(H, want_vectors=False, check_columns=8):
        raise EigensolverError("forced failure")

    monkeypatch.setattr(runner, "eig_sym", broken)
    cfg = small(tmp_path, epsilons=[0.0], levels=[3], realizations=2)
    with pytest.raises(NumericalFailureError):
        run(cfg, tmp_path / "f")
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert len(manifest["failures"]) == 2
    rows = load_rows(tmp_path / "f")
    assert [r["observable"] for r in rows] == ["decomposition.failure"] * 2
    cfg.max_failures = 5
    run(cfg, tmp_path / "g")


def test_large_arrays_go_to_npy(tmp_path):
    app = runner._Appender(tmp_path, "exp")
    big = np.arange(INLINE_LIMIT + 1, dtype=float)
    app.write(CellResult(Cell(0.5, 3, 0, 1), rows=[("big", big), ("small", np.arange(3.0))]))
    rows = load_rows(tmp_path)
    assert np.array_equal(rows[0]["value"], big)
    assert rows[1]["value"] == [0.0, 1.0, 2.0]
    raw = json.loads((tmp_path / "rows.ndjson").read_text().splitlines()[0])
    assert raw["value"]["npy"].endswith(".npy")


def test_summary_and_phase_table(tmp_path):
    cfg = small(tmp_path, levels=[5, 6, 7], realizations=3, observables=["spectrum", "vectors"])
    out = run(cfg)
    s = summarize(out)
    assert len(s["phase"]) == 6
    assert set(s["domination_slope"]) == {"-0.75", "1.0"}
    assert (out / "phase.csv").read_text().startswith("epsilon,n,")


def test_plots_need_results(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(EmptyResultsError):
        emit_plots(empty, "dos")
    out = run(small(tmp_path))
    with pytest.raises(MissingObservableError):
        emit_plots(out, "flow")
    assert not (out / "plots" / "flow.svg").exists()


def test_all_plot_kinds(tmp_path):
    cfg = small(tmp_path, epsilons=[-0.75], levels=[5, 6], observables=["spectrum", "green", "vectors", "stats", "flow"],
                alpha_tilde=0.6, flow_grid_points=9, holder_min_decades=0.1)
    out = run(cfg)
    digest = cfg.config_hash()[:12]
    for kind in PLOT_KINDS:
        svg, sidecar = emit_plots(out, kind)
        assert digest in svg.read_text()
        lines = sidecar.read_text().splitlines()
        assert digest in lines[0] and len(lines) > 2


def test_goe_dos_sidecar_records_ks(tmp_path):
    out = run(ExperimentConfig(ensemble="goe", epsilons=[0.0], levels=[11], output_dir=str(tmp_path / "goe")))
    _, sidecar = emit_plots(out, "dos")
    ks = float(sidecar.read_text().splitlines()[2].split(",")[-1])
    assert ks < 0.05


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("epsilons: [0.5]\nlevels: [3]\nrealizations: 5\n")
    out = tmp_path / "cli"
    assert main(["sweep", "--config", str(cfg), "--reps", "1", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["realizations"] == 1
    assert main(["sweep", "--config", str(cfg), "--alpha", "3", "--out", str(tmp_path / "bad")]) == 2
    assert main(["stats", str(out)]) == 0
    assert main(["stats", str(tmp_path / "missing")]) == 2
    dump = tmp_path / "m.bin"
    assert main(["sample", "--epsilon", "0.1", "--n", "3", "--out", str(dump)]) == 0
    assert dump.stat().st_size == 16 + 64 * 8


def test_cli_numerical_exit(tmp_path, monkeypatch):
    def broken(H, want_vectors=False, check_columns=8):
        raise EigensolverError("forced failure")

    monkeypatch.setattr(runner, "eig_sym", broken)
    assert main(["spectrum", "--epsilon", "0.1", "--n", "3", "--out", str(tmp_path / "z")]) == 3
