"""Run the bundled demo config end to end and list the artifacts.

    python scripts/run_demo.py -o results/demo --participants 400
"""
import argparse
import sys
import tempfile
from pathlib import Path

import yaml

from dosetrial.cli import main as cli_main

DEMO = Path(__file__).resolve().parents[1] / "src" / "dosetrial" / "configs" / "demo.yaml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-o", "--output", default="results/demo")
    ap.add_argument("--participants", type=int)
    ap.add_argument("--sessions", type=int)
    args = ap.parse_args()
    raw = yaml.safe_load(DEMO.read_text())
    if args.participants:
        raw["data"]["n_participants"] = args.participants
    if args.sessions:
        raw["data"]["n_sessions"] = args.sessions
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "demo.yaml"
        cfg.write_text(yaml.safe_dump(raw))
        code = cli_main(["run", str(cfg), "-o", args.output])
    if code == 0:
        for p in sorted(Path(args.output).rglob("*")):
            if p.is_file() and not p.name.endswith(".schema.json"):
                print(p)
    return code


if __name__ == "__main__":
    sys.exit(main())
