"""A two-minute masked-reconstruction pretraining run.

Trains the compact encoder + SSM decoder on a small synthetic set and plots
the loss trajectory as text. The full desk-scale run lives behind
`python -m lcm pretrain --config configs/pretrain_default.cfg`.
"""

from lcm.harness.config import load_config
from lcm.harness.pretrain import run_pretrain

cfg = load_config(None, overrides=[
    "out=/tmp/lcm_demo_pretrain",
    "data.train_per_class=12",
    "data.val_per_class=4",
    "train.epochs=6",
    "train.batch_size=32",
    "train.warmup_epochs=1",
])
summary = run_pretrain(cfg)

print(f"\nepoch-0 val chamfer : {summary['val_loss_epoch0']:.5f}")
print(f"final val chamfer   : {summary['val_loss_final']:.5f} "
      f"({100 * summary['val_loss_final'] / summary['val_loss_epoch0']:.1f}% of start)")
print(f"checkpoint          : {summary['checkpoint']}")

rows = open(summary["metrics"]["csv"]).read().splitlines()[1:]
val = [(r.split(",")[0], float(r.split(",")[3])) for r in rows if r.split(",")[1] == "val"]
peak = max(v for _, v in val)
for epoch, v in val:
    bar = "#" * int(40 * v / peak)
    print(f"epoch {epoch:>2} val {v:8.5f} {bar}")
