"""Run every unlearning method on one shared split and print the comparison table.

Pass a comma-separated method list to run a subset. Runtime: about 1 min for all eight.
"""
import sys

from diffunlearn import experiment as ex

methods = sys.argv[1].split(",") if len(sys.argv) > 1 else list(ex.METHODS)
rows, records = ex.compare_methods([ex.make_config({}, seed=0, method=m) for m in methods])
print(ex.table_text(rows))
for rec in records:
    if rec.status != "ok":
        print(f"{rec.method} failed: {rec.error}")
