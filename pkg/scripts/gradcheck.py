"""Run every finite-difference check and print a table (exit 3 on failure)."""
import sys

from promnet.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck", *sys.argv[1:]]))
