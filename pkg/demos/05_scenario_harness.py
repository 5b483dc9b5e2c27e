#!/usr/bin/env python3
"""Scripted experiment: bandwidth comparison across package sizes.

Writes a scenario spec, runs it, and prints the summary plus a per-second
CSV, the same machinery the acceptance suite uses for its bandwidth
criteria.  Try editing the spec: add outages, change strategies.
"""

import pathlib
import tempfile

from voxelstream.scenario import ScenarioRunner, parse_scenario

SPEC = """
duration_s = 120.0

[server]
codec = "deflate"
buckets = 65536

[rc]
scene = "room"
half_extent = [0.8, 0.6, 0.8]
frames = 40
width = 160
height = 120
voxel_size = 0.01
package_size = 512
send_rate_hz = 100
speed = 0

[[ec]]
max_blocks = 512
request_rate_hz = 100
strategy = "random"

[[ec]]
max_blocks = 128
request_rate_hz = 100
strategy = "order"
outage = [2.0, 3.0]
"""

with tempfile.TemporaryDirectory() as tmp:
    spec_path = pathlib.Path(tmp) / "demo.toml"
    spec_path.write_text(SPEC)
    runner = ScenarioRunner(parse_scenario(str(spec_path)))
    result = runner.run()
    print(result.summary())
    csv_path = pathlib.Path(__file__).with_name("scenario_metrics.csv")
    runner.write_csv(str(csv_path))
    print(f"\nper-second metrics written to {csv_path}")
