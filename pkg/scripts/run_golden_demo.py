#!/usr/bin/env python3
"""End-to-end demo on the golden corpus: extract (replay backend), validate,
select, evaluate, and export the domain-filtered distillation set."""
import argparse
from pathlib import Path

from txdoc.pipeline import (
    RunConfig,
    cmd_distill,
    cmd_evaluate,
    cmd_extract,
    cmd_select,
    cmd_validate,
    read_jsonl,
    write_jsonl,
)
from txdoc.synth import golden_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="golden_run", help="output directory")
    args = parser.parse_args()

    out = Path(args.out)
    records, fixture_candidates = golden_corpus()
    dataset = out / "dataset.jsonl"
    fixtures = out / "fixtures.jsonl"
    write_jsonl(dataset, (r for r in records))
    write_jsonl(fixtures, (c.to_json() for c in fixture_candidates))

    config = RunConfig(out_dir=out / "out", backend="replay",
                       endpoint=str(fixtures), temperature=1.0, n_samples=4)
    candidates = cmd_extract(dataset, config)
    verdicts, survivors = cmd_validate(candidates, dataset, config, level="domain")
    selected = cmd_select(candidates, verdicts, config)
    table = cmd_evaluate(candidates, verdicts, dataset, config)
    distilled = cmd_distill(candidates, verdicts, dataset, config)

    print()
    print(table.to_text())
    print(f"domain survivors: {[r['doc_id'] for r in read_jsonl(survivors)]}")
    print(f"selected:         {[(r['doc_id'], r['sample_index']) for r in read_jsonl(selected)]}")
    print(f"distill records:  {len(read_jsonl(distilled))} -> {distilled}")


if __name__ == "__main__":
    main()
