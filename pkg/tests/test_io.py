from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from qthermo.ensemble import enumerate_trajectories, run_ensemble
from qthermo.errors import ConfigParseError, ConfigValidationError, RecordFormatError, SchemaVersionMismatchError
from qthermo.experiments import PRESETS, build_preset, dephasing_feedback, prepare_measure, spontaneous_emission
from qthermo.io import (
    OUTPUT_ENV,
    RunConfig,
    entropies_from_stats,
    export_plot_data,
    parse_config,
    read_records,
    records_equal,
    with_overrides,
    write_records,
)


def read_table(path):
    with open(path) as fh:
        comment = fh.readline()
        rows = list(csv.reader(fh))
    return comment, rows[0], [[float(v) for v in r] for r in rows[1:]]


class TestConfig:
    def test_minimal(self):
        config = parse_config("experiment: SpontaneousEmission\n")
        defaults = {k: p.default for k, p in PRESETS["SpontaneousEmission"][1].items()}
        assert config.resolved_parameters() == defaults
        assert config.n_trajectories == 1000 and config.seed == 0
        assert config.build().name == "SpontaneousEmission"

    def test_feedback_parameters(self):
        text = "experiment: DephasingFeedback\nparameters:\n  gamma_phi: 0.1\n  cutoff: 0.05\n"
        spec = parse_config(text).build()
        ref = dephasing_feedback(gamma_phi=0.1, cutoff=0.05)
        assert spec.parameters == ref.parameters
        assert spec.protocol.t_final == pytest.approx(1.5)

    def test_negative_rate(self):
        with pytest.raises(ConfigValidationError) as info:
            parse_config("experiment: DephasingFeedback\nparameters: {gamma_phi: -0.1}\n")
        assert info.value.key == "parameters.gamma_phi"

    @pytest.mark.parametrize(
        "text, key",
        [
            ("experiment: SpontaneousEmission\nbogus: 1\n", "bogus"),
            ("experiment: SpontaneousEmission\nparameters: {gamma_phi: 1.0}\n", "parameters.gamma_phi"),
            ("experiment: Nope\n", "experiment"),
            ("experiment: SpontaneousEmission\nn_trajectories: 0\n", "n_trajectories"),
            ("experiment: SpontaneousEmission\nn_trajectories: true\n", "n_trajectories"),
            ("experiment: SpontaneousEmission\nscheme: qsd\n", "scheme"),
            ("experiment: SpontaneousEmission\nexport: {plots: true}\n", "export.plots"),
            ("n_trajectories: 3\n", "experiment"),
        ],
    )
    def test_validation_names_key(self, text, key):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(text)
        assert info.value.key == key

    def test_parse_error_position(self):
        with pytest.raises(ConfigParseError) as info:
            parse_config("experiment: SpontaneousEmission\nparameters: {gamma: [1.0\n")
        assert info.value.line is not None and info.value.line >= 2
        assert info.value.column is not None

    def test_output_dir_env(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_ENV, "/tmp/somewhere")
        assert parse_config("experiment: PrepareMeasure\n").output_dir == "/tmp/somewhere"

    def test_overrides(self):
        config = with_overrides(parse_config("experiment: SpontaneousEmission\n"), seed=5, dt=0.01, n_trajectories=None)
        assert config.seed == 5 and config.build().protocol.dt == 0.01
        with pytest.raises(ConfigValidationError):
            with_overrides(config, dt=-1.0)


class TestRecords:
    def test_round_trip(self, tmp_path):
        for spec in (spontaneous_emission(dt=0.01), dephasing_feedback(cutoff=0.05), prepare_measure()):
            stats = run_ensemble(spec, 20, 3, keep_records=True)
            path = write_records(stats.records, tmp_path / "r.jsonl", entropies_from_stats(stats))
            back, ents = read_records(path, with_entropy=True)
            assert len(back) == 20
            assert all(records_equal(a, b) for a, b in zip(stats.records, back))
            for e, ref in zip(ents, entropies_from_stats(stats)):
                assert e.total == ref.total or (np.isnan(e.total) and np.isnan(ref.total))
            again = write_records(back, tmp_path / "r2.jsonl", ents)
            assert again.read_bytes() == path.read_bytes()

    def test_infinite_entropy_survives(self, tmp_path):
        result = enumerate_trajectories(spontaneous_emission(dt=0.01, duration=0.05))
        result.stats.records = result.records
        path = write_records(result.records, tmp_path / "r.jsonl", entropies_from_stats(result.stats))
        _, ents = read_records(path, with_entropy=True)
        assert sum(np.isinf(e.total) for e in ents) == 5

    def test_empty(self, tmp_path):
        path = write_records([], tmp_path / "e.jsonl")
        assert len(path.read_text().splitlines()) == 1
        assert read_records(path) == []

    def test_corrupted_line(self, tmp_path):
        stats = run_ensemble(spontaneous_emission(dt=0.01), 4, keep_records=True)
        path = write_records(stats.records, tmp_path / "r.jsonl")
        lines = path.read_text().splitlines()
        lines[2] = lines[2][: len(lines[2]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(RecordFormatError) as info:
            read_records(path)
        assert info.value.line == 3

    def test_version_mismatch(self, tmp_path):
        path = write_records([], tmp_path / "e.jsonl")
        header = json.loads(path.read_text())
        header["version"] = 99
        path.write_text(json.dumps(header) + "\n")
        with pytest.raises(SchemaVersionMismatchError):
            read_records(path)

    def test_full_precision(self, tmp_path):
        stats = run_ensemble(dephasing_feedback(), 2, keep_records=True)
        path = write_records(stats.records, tmp_path / "r.jsonl")
        back = read_records(path)
        assert np.array_equal(back[0].ledger.u_series, stats.records[0].ledger.u_series)


class TestExport:
    def test_emission_timeseries(self, tmp_path):
        stats = run_ensemble(spontaneous_emission(dt=0.01, duration=2.0), 200, 1)
        export_plot_data(stats, tmp_path)
        comment, header, rows = read_table(tmp_path / "timeseries.csv")
        assert comment.startswith("#") and "hbar" in comment
        assert header[:6] == ["t", "U_jump", "U_nojump", "Q_cl", "Q_q", "boundary_entropy"]
        assert len(rows) == 11 and rows[0][0] == 0.0

    def test_prepare_measure_distributions(self, tmp_path):
        stats = enumerate_trajectories(prepare_measure(theta_prep=np.pi / 3)).stats
        files = {p.name for p in export_plot_data(stats, tmp_path)}
        assert {"dist_q_q.csv", "dist_entropy.csv"} <= files
        _, header, rows = read_table(tmp_path / "dist_q_q.csv")
        assert header == ["Q_q", "mass"]
        assert rows == [pytest.approx([-0.75, 0.25]), pytest.approx([0.25, 0.75])]

    def test_feedback_increments(self, tmp_path):
        stats = run_ensemble(dephasing_feedback(), 50, 2)
        export_plot_data(stats, tmp_path)
        _, header, rows = read_table(tmp_path / "increments.csv")
        assert header == ["center", "P_dW_fb", "P_minus_dQ_q"]
        cols = np.array(rows)
        assert cols[:, 1].sum() == pytest.approx(1.0, abs=1e-12)
        assert cols[:, 2].sum() == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self, tmp_path):
        spec = build_preset("JarzynskiOpen")
        for threads, sub in ((1, "a"), (2, "b")):
            export_plot_data(run_ensemble(spec, 100, 8, threads=threads, chunk_size=16), tmp_path / sub)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
