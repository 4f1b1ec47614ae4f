"""Five-variant ablation ladder over three seeds; writes ablation.json and ablation.md."""

import sys
from pathlib import Path

from stylevoc import cli

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ablation.cfg"

if __name__ == "__main__":
    sys.exit(cli.main(["ablate", "--config", str(CONFIG), "-v", *sys.argv[1:]]))
