#!/usr/bin/env python3
"""Run a seeded synthetic forward pass and print the decoded box.

Writes the artifact set (box, score/offset/size maps, keep-set chain,
diagnostics, hash manifest) under --out. Equivalent to `caformer forward`.
"""

import sys

from caformer.cli import main

if __name__ == "__main__":
    sys.exit(main(["forward", *sys.argv[1:]]))
