"""Finite-difference checks of the AR block, the flow loss and the DPO composition."""

import sys

from stylevoc import cli

if __name__ == "__main__":
    sys.exit(cli.main(["gradcheck", *sys.argv[1:]]))
