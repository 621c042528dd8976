"""Train both classifiers and the autoencoder, then regenerate every report artifact.

Extra arguments are passed through to each subcommand, e.g.
``python scripts/run_pipeline.py configs/synthetic.json --threads 1``.
"""

import sys

from amx.cli import main

STEPS = (["train-classifier", "--role", "both"], ["train-autoencoder"], ["report"],
         ["maximize", "--protocol", "class-to-class"])

if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    config, extra = sys.argv[1], sys.argv[2:]
    for step in STEPS:
        code = main([*step, "--config", config, *extra])
        if code:
            sys.exit(code)
