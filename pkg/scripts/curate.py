"""Run the curation pipeline on a JSON-lines manifest, or on a synthetic one."""

import sys

from stylevoc import cli

if __name__ == "__main__":
    sys.exit(cli.main(["pipeline", *sys.argv[1:]]))
