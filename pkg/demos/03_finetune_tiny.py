"""Fine-tune the desk-scale transformer on synthetic windows.

Shows the full training regime: seeded splits, the plateau callback, the
per-epoch log, and the best-checkpoint restore. Finishes in well under a
minute on one core.
"""

from pathlib import Path

import numpy as np

from stressvit.data import SynthConfig, dataset_windows, synthesize_dataset, windows_to_arrays
from stressvit.training import ScenarioConfig, checkpoint_save, evaluate_model, run_training

images = synthesize_dataset(24, SynthConfig(seed=0))
windows = dataset_windows(images)
X, y = windows_to_arrays(windows, image_size=32)
print(f"dataset: {len(windows)} windows ({int(y.sum())} stressed)")

rng = np.random.default_rng(0)
perm = rng.permutation(len(X))
test_idx, val_idx, train_idx = perm[:20], perm[20:32], perm[32:]

scenario = ScenarioConfig(model="tiny", trainable_blocks="all", optimizer="adamw",
                          lr=1e-3, patience=5, factor=0.2, batch_size=32,
                          max_epochs=40, seed=0)
model, log = run_training(scenario, (X[train_idx], y[train_idx]), (X[val_idx], y[val_idx]))

print(f"\nstopped after epoch {log.stop_epoch}; best epoch {log.best_epoch} "
      f"(val loss {log.best_val_loss:.4f})")
print("epoch  train_loss  train_acc  val_loss  val_acc      lr")
for entry in log.epochs[:5] + log.epochs[-3:]:
    print(f"{entry.epoch:5d}  {entry.train_loss:10.4f}  {entry.train_acc:9.3f}"
          f"  {entry.val_loss:8.4f}  {entry.val_acc:7.3f}  {entry.lr:.6f}")

report = evaluate_model(model, X[test_idx], y[test_idx].astype(int))
print(f"\nheld-out: accuracy {report.accuracy:.3f}, AUC {report.auc:.3f}, "
      f"confusion TP={report.confusion.tp} TN={report.confusion.tn} "
      f"FP={report.confusion.fp} FN={report.confusion.fn}")

Path("demo_output").mkdir(exist_ok=True)
checkpoint_save(model, "demo_output/tiny.ckpt")
print("wrote demo_output/tiny.ckpt")
