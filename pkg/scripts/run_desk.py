"""Generate data and run all three training stages at desk scale."""

import sys
from pathlib import Path

from stylevoc import cli

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"

if __name__ == "__main__":
    extra = sys.argv[1:]
    for cmd in ("gen-data", "train-ar", "train-flow", "train-dpo"):
        code = cli.main([cmd, "--config", str(CONFIG), "-v", *extra])
        if code:
            sys.exit(code)
