"""Write the count-matched stand-in for the online-discussion test set.

The real corpus is not redistributable; this file reproduces only its label
statistics (692 instances, 67 multi-label, class counts 78/96/234/166/186 for
frames 1/13/5/6/7) with placeholder text.
"""

import json
import sys
from pathlib import Path

PAIRS = [((5, 7), 30), ((5, 6), 20), ((1, 13), 10), ((6, 7), 6)]
TRIPLES = [((5, 6, 7), 1)]
SINGLES = {1: 68, 13: 86, 5: 183, 6: 139, 7: 149}


def rows():
    k = 0
    for labels, n in PAIRS + TRIPLES + [((c,), n) for c, n in SINGLES.items()]:
        for _ in range(n):
            k += 1
            yield {"id": f"od-test-{k:04d}", "text": f"placeholder argument {k}",
                   "labels": list(labels), "domain": "online_disc", "split": "test"}


def main(path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows():
            fh.write(json.dumps(row) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else
         Path(__file__).resolve().parents[1] / "src/issueframe/samples/online_disc_test_counts.jsonl")
