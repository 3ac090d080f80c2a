"""Write two mock IDE sessions (tokens 0x48 and 0x7C) and learn a model from them.

    python scripts/record_captures.py OUTDIR
"""

import sys
from pathlib import Path

from plcfuzz.cli import main


def run(outdir: Path) -> int:
    outdir.mkdir(parents=True, exist_ok=True)
    pcaps = []
    for name, token in (("session_48", "0x48"), ("session_7c", "0x7C")):
        path = outdir / f"{name}.pcap"
        code = main(["record", "--out", str(path), "--token", token, "--vulns", "V1"])
        if code:
            return code
        pcaps.append(str(path))
    return main(["analyze", "--pcap", *pcaps, "--out", str(outdir / "model.json")])


if __name__ == "__main__":
    sys.exit(run(Path(sys.argv[1] if len(sys.argv) > 1 else "work")))
