"""Erase one class from a trained model and watch the forgetting gap shrink.

Writes checkpoint, trace, report and figures under ./demo_out/erasediff.
Runtime: about 40 s.
"""
from pathlib import Path

from diffunlearn import experiment as ex

out = Path("demo_out") / "erasediff"
config = ex.make_config({}, seed=0, method="erasediff", out=str(out))
record = ex.run_experiment(config)
if record.status != "ok":
    raise SystemExit(record.error)

trace = (out / "trace.csv").read_text().splitlines()
print("iteration, remaining_loss, forget_loss, f_hat (every 50th):")
for line in trace[1::50]:
    print("  " + ", ".join(line.split(",")[:4]))

r = record.report
print(f"forgotten-class accuracy {r.forget_accuracy:.3f}, remaining accuracy {r.remain_accuracy:.3f}")
print(f"KL to N(0, I): forgotten {r.kl_forget:.3f} vs remaining {r.kl_remain:.4f}")
print(f"{record.grad_steps} gradient steps against {record.reference_grad_steps} for retraining")
print("artifacts:", ", ".join(sorted(record.paths)))
