"""The hybrid path: pooled transformer features into a kernel SVM.

Three steps: extract the final-norm class-token embedding per window, train
the soft-margin SVM on those vectors, classify. Also peeks at the support
vectors and margin values the dual solver found.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np

from stressvit.data import SynthConfig, dataset_windows, synthesize_dataset, windows_to_arrays
from stressvit.metrics import evaluate_predictions
from stressvit.svm import (
    SvmTrainConfig,
    decision_scores,
    predict_many,
    train,
    write_features,
)
from stressvit.training import checkpoint_load
from stressvit.vit import PRESETS, pooled_representation

ckpt = Path("demo_output/tiny.ckpt")
if not ckpt.exists():
    print("checkpoint missing; running demo 03 first\n")
    subprocess.run([sys.executable, Path(__file__).parent / "03_finetune_tiny.py"], check=True)
model = checkpoint_load(ckpt, PRESETS["tiny"])

images = synthesize_dataset(16, SynthConfig(seed=500))
windows = dataset_windows(images)
X, y = windows_to_arrays(windows, model.config.image_size)
print(f"{len(windows)} windows to embed")

features = np.stack([pooled_representation(x, model).data for x in X])
print(f"feature matrix {features.shape} (hidden dim {model.config.hidden_dim})")
Path("demo_output").mkdir(exist_ok=True)
write_features(features, y.astype(int), "demo_output/features.csv")

half = len(X) // 2
svm = train(features[:half], y[:half].astype(int), SvmTrainConfig())
print(f"\ntrained: {len(svm.dual_coef)} support vectors of {half} points, "
      f"bias {svm.bias:+.4f}, gamma {svm.kernel.gamma:.4g}")

labels = predict_many(svm, features[half:])
scores = decision_scores(svm, features[half:])
report = evaluate_predictions(labels, scores, y[half:].astype(int))
print(f"held-out: accuracy {report.accuracy:.3f}, AUC {report.auc:.3f}")
print("sample decision values (sign is the class, magnitude the confidence):")
for s, t in list(zip(scores, y[half:]))[:6]:
    print(f"  f(x) = {s:+.3f}   truth {'stressed' if t else 'healthy'}")
