"""The command line end to end: train, inspect the artifacts, re-export.

Equivalent shell session:

    deeppaac run --config demos/p2_short.ini --out runs/demo
    deeppaac export --config demos/p2_short.ini --checkpoint runs/demo --grid "t=0.5;w=0:1:11"
    deeppaac fdcheck --n 20
"""

import json
import tempfile
from pathlib import Path

from deeppaac.cli import main

cfg = str(Path(__file__).with_name("p2_short.ini"))
out = Path(tempfile.mkdtemp()) / "demo"

code = main(["run", "--config", cfg, "--out", str(out)])
print("exit code", code, "(0 converged, 3 budget exhausted)")
print(sorted(p.name for p in out.iterdir()))

man = json.loads((out / "manifest.json").read_text())
print("effective train config:", {k: man["config"][k] for k in ("M", "B", "tol_int", "tol_ctrl", "max_steps")})
print((out / "losses.csv").read_text().splitlines()[-1])

main(["export", "--config", cfg, "--checkpoint", str(out), "--grid", "t=0.5;w=0:1:11", "--out", str(out / "slice.csv")])
print((out / "slice.csv").read_text().splitlines()[:3])
main(["fdcheck", "--n", "20"])
