"""Train and evaluate the nine level/time cases on a synthetic record via the CLI,
then write one comparison table per experiment family.

Family "levels" fixes TS6 and varies the level set (v1, v2, v3) for 2d and
3d-vert; family "time" fixes v1 and varies TS2/TS4/TS6 for 2d and 3d-time.

    python3 scripts/case_grid.py --out runs/grid --days 1095 --restarts 5
"""
from __future__ import annotations

import argparse
from pathlib import Path

from precipcnn.cli import main as cli

FAMILIES = {
    "levels": [(f"{lv.upper()}-{tag}", variant, "ts6", lv)
               for lv in ("v1", "v2", "v3") for tag, variant in (("2D", "2d"), ("3D", "3d-vert"))],
    "time": [(f"{ts.upper()}-{tag}", variant, ts, "v1")
             for ts in ("ts2", "ts4", "ts6") for tag, variant in (("2D", "2d"), ("3D", "3d-time"))],
}


def run(out: Path, days: int, restarts: int, max_epochs: int, seed: int, jobs: int, conv: str, fc: int):
    data = out / "data"
    if not (data / "manifest.json").exists():
        # the widest preset, so every case can select its levels from it
        levels = "200,300,400,500,600,700,750,800,850,900,925,950,1000"
        assert cli(["gen-synthetic", "--days", str(days), "--levels", levels, "--seed", str(seed),
                    "--noise-std", "0.1", "--out", str(data)]) == 0
    for family, cases in FAMILIES.items():
        reports = []
        for label, variant, ts, levels in cases:
            run_dir = out / family / label
            code = cli(["train", "--data", str(data), "--variant", variant, "--timesteps", ts, "--levels", levels,
                        "--restarts", str(restarts), "--max-epochs", str(max_epochs), "--batch-size", "64",
                        "--conv-channels", conv, "--fc-hidden", str(fc), "--jobs", str(jobs), "--seed", str(seed),
                        "--case", label, "--out", str(run_dir)])
            if code != 0:
                raise SystemExit(f"{label}: train exited with {code}")
            assert cli(["evaluate", "--run", str(run_dir), "--out", str(run_dir / "eval")]) == 0
            reports.append(str(run_dir / "eval"))
        assert cli(["compare", *reports, "--out", str(out / family)]) == 0


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/grid")
    p.add_argument("--days", type=int, default=1095)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--conv-channels", default="8,16")
    p.add_argument("--fc-hidden", type=int, default=32)
    a = p.parse_args()
    run(Path(a.out), a.days, a.restarts, a.max_epochs, a.seed, a.jobs, a.conv_channels, a.fc_hidden)


if __name__ == "__main__":
    main()
