"""Scenario harness and command-line entry points."""

import os
import threading

import numpy as np
import pytest

from voxelstream.cli import _hostport, _size, main
from voxelstream.dataset import read_sequence
from voxelstream.scenario import ScenarioRunner, parse_scenario


SCENARIO_TOML = """
duration_s = 90.0

[server]
codec = "deflate"
buckets = 16384

[rc]
scene = "room"
half_extent = [0.6, 0.5, 0.6]
frames = 16
width = 96
height = 72
voxel_size = 0.02
truncation = 0.1
package_size = 128
send_rate_hz = 200
speed = 0

[[ec]]
max_blocks = 256
request_rate_hz = 100
strategy = "random"
"""


class TestScenario:
    def test_toml_round_trip(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(SCENARIO_TOML)
        spec = parse_scenario(str(path))
        assert spec["rc"]["voxel_size"] == 0.02
        assert len(spec["ec"]) == 1

    def test_small_run_converges(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(SCENARIO_TOML)
        runner = ScenarioRunner(parse_scenario(str(path)))
        result = runner.run()
        assert result.exact_match == [True]
        assert result.final_completeness == [1.0]
        assert result.rc_rx_bytes > result.ec_tx_bytes > 0
        assert result.server_mc_blocks > 100
        csv_path = tmp_path / "metrics.csv"
        runner.write_csv(str(csv_path))
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("t_s,")
        summary = result.summary()
        assert "completeness 1.0000" in summary


class TestCliHelpers:
    def test_size_parses_power_syntax(self):
        assert _size("2^20") == 1 << 20
        assert _size("65536") == 65536

    def test_hostport(self):
        assert _hostport("0.0.0.0:7801", 1) == ("0.0.0.0", 7801)
        assert _hostport("example.org", 7801) == ("example.org", 7801)


class TestCliCommands:
    def test_dataset_gen(self, tmp_path):
        out = tmp_path / "seq.vcseq"
        rc = main(["dataset", "gen", "--scene", "sphere", "--frames", "3",
                   "--width", "32", "--height", "24", "--out", str(out)])
        assert rc == 0
        intr, frames = read_sequence(str(out))
        assert len(list(frames)) == 3
        assert intr.width == 32

    def test_scenario_run(self, tmp_path, capsys):
        spec = tmp_path / "spec.toml"
        spec.write_text(SCENARIO_TOML.replace("frames = 16", "frames = 6"))
        csv_out = tmp_path / "out.csv"
        rc = main(["scenario", "run", str(spec), "--csv", str(csv_out)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "rc->server:" in out
        assert csv_out.exists()
