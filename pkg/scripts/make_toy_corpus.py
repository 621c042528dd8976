"""Write the synthetic spoken-command corpus used when Speech Commands is unavailable."""

import argparse

from amx.data import DESK_CLASSES
from amx.toycorpus import write_toy_corpus

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root")
    ap.add_argument("--per-class", type=int, default=150)
    ap.add_argument("--speakers", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--classes", default=",".join(DESK_CLASSES))
    a = ap.parse_args()
    write_toy_corpus(a.root, a.per_class, a.speakers, a.seed, a.classes.split(","))
