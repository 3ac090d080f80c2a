"""Record, analyze, fuzz the mock device with V1+V2+V3, then re-verify every finding.

    python scripts/demo_end_to_end.py [--budget N] [--seed S] [--out DIR]
"""

import argparse
import sys
from pathlib import Path

from plcfuzz.cli import main

sys.path.insert(0, str(Path(__file__).parent))
from record_captures import run as record  # noqa: E402


def demo(argv=None) -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--budget", type=int, default=3000)
    p.add_argument("--seed", type=int, default=20161108)
    p.add_argument("--out", default="demo")
    args = p.parse_args(argv)
    out = Path(args.out)
    if record(out):
        return 1
    model = str(out / "model.json")
    code = main(["fuzz", "--model", model, "--target", "mock", "--vulns", "V1,V2,V3",
                 "--budget", str(args.budget), "--seed", str(args.seed), "--report", str(out / "report")])
    if code != 1:
        print("expected findings from the vulnerable mock device", file=sys.stderr)
        return 1
    return main(["report", "--input", str(out / "report" / "report.ndjson"), "--verify",
                 "--model", model, "--vulns", "V1,V2,V3"])


if __name__ == "__main__":
    sys.exit(demo())
