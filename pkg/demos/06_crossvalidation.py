"""Five-fold cross-validation of the feature + SVM pipeline.

Each fold retrains the SVM on the other four and scores the held-out fold;
the report pools out-of-fold predictions, averages fold accuracy/AUC and
vertically averages the ROC curves on a fixed FPR grid.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np

from stressvit.data import SynthConfig, dataset_windows, synthesize_dataset, windows_to_arrays
from stressvit.svm import SvmTrainConfig, decision_scores, predict_many, train
from stressvit.training import checkpoint_load, kfold_evaluate
from stressvit.vit import PRESETS, pooled_representation

ckpt = Path("demo_output/tiny.ckpt")
if not ckpt.exists():
    print("checkpoint missing; running demo 03 first\n")
    subprocess.run([sys.executable, Path(__file__).parent / "03_finetune_tiny.py"], check=True)
model = checkpoint_load(ckpt, PRESETS["tiny"])

images = synthesize_dataset(30, SynthConfig(seed=900))
windows = dataset_windows(images)
X, y = windows_to_arrays(windows, model.config.image_size)
features = np.stack([pooled_representation(x, model).data for x in X])
print(f"{len(windows)} windows, feature dim {features.shape[1]}")

report = kfold_evaluate(
    lambda Xt, yt: train(Xt, yt, SvmTrainConfig()),
    lambda m, Xe: (predict_many(m, Xe), decision_scores(m, Xe)),
    features, y.astype(int), k=5, seed=0)

print("\nfold  accuracy     AUC")
for i, fold in enumerate(report.per_fold):
    print(f"{i:4d}  {fold.accuracy:8.3f}  {fold.auc:6.3f}")
print(f"mean  {report.mean_accuracy:8.3f}  {report.mean_auc:6.3f}  "
      f"(std {report.std_accuracy:.3f} / {report.std_auc:.3f})")

print("\nmean ROC (vertically averaged on the 101-point FPR grid):")
for idx in (0, 5, 10, 25, 50, 100):
    fpr, tpr = report.mean_roc[idx]
    print(f"  fpr {fpr:4.2f} -> mean tpr {tpr:5.3f}")
print(f"\npooled out-of-fold accuracy {report.accuracy:.3f}, AUC {report.auc:.3f}")
