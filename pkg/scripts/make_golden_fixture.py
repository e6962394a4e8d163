#!/usr/bin/env python3
"""Write the golden demo corpus: 10 synthetic receipts with ground truth and
40 replay candidates carrying designed failures (2 documents syntax-broken,
3 with hallucinated totals, 3 with wrong-but-verbatim totals)."""
import argparse
from pathlib import Path

from txdoc.pipeline import write_jsonl
from txdoc.synth import golden_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="golden", help="output directory")
    args = parser.parse_args()

    out = Path(args.out)
    records, candidates = golden_corpus()
    write_jsonl(out / "dataset.jsonl", (r for r in records))
    write_jsonl(out / "fixtures.jsonl", (c.to_json() for c in candidates))
    print(f"wrote {len(records)} documents and {len(candidates)} candidates "
          f"to {out}/")


if __name__ == "__main__":
    main()
