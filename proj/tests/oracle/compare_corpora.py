# SPDX-License-Identifier: Apache-2.0
"""Generates corpora with the binary and the python oracle, compares bytes."""
import filecmp
import subprocess
import sys
import tempfile
from pathlib import Path

binary, n, seed = sys.argv[1], sys.argv[2], sys.argv[3]
oracle = Path(__file__).with_name("corpus_oracle.py")

with tempfile.TemporaryDirectory() as tmp:
    ours, theirs = Path(tmp, "ours"), Path(tmp, "oracle")
    subprocess.run([binary, "gen-data", "--task", "all", "--n", n, "--seed", seed, "--out", str(ours)],
                   check=True, stdout=subprocess.DEVNULL)
    for task in ("diff", "entity", "correct", "factcheck"):
        subprocess.run([sys.executable, str(oracle), "--task", task, "--n", n, "--seed", seed, "--out", str(theirs)],
                       check=True)
    files = sorted(p.name for p in ours.glob("*.jsonl"))
    if len(files) != 12:
        sys.exit(f"expected 12 files, got {files}")
    bad = [f for f in files if not filecmp.cmp(ours / f, theirs / f, shallow=False)]
    if bad:
        sys.exit(f"mismatch: {bad}")
    print(f"{len(files)} files identical (n={n}, seed={seed})")
