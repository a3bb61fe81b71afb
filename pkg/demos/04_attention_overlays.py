"""Render per-layer attention overlays for one synthetic field image.

The capture path returns one record (query/key/value/output) per encoder
block; the introspection pipeline recomputes the score matrices, pulls the
class-token row, normalizes, upsamples, and blends a hot colormap over the
image. Needs demo_output/tiny.ckpt from demo 03 (runs it if missing).
"""

import subprocess
import sys
from pathlib import Path

import numpy as np

from stressvit.attention_maps import (
    class_token_map,
    compute_attention_scores,
    normalize_map,
    write_overlays,
)
from stressvit.data import SynthConfig, synthesize_field_image
from stressvit.training import checkpoint_load
from stressvit.vit import PRESETS, vit_forward

ckpt = Path("demo_output/tiny.ckpt")
if not ckpt.exists():
    print("checkpoint missing; running demo 03 first\n")
    subprocess.run([sys.executable, Path(__file__).parent / "03_finetune_tiny.py"], check=True)

model = checkpoint_load(ckpt, PRESETS["tiny"])
image = synthesize_field_image(SynthConfig(image_size=32, healthy_regions=1,
                                           stressed_regions=1, seed=21))
batch = (image.rgb.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]
logits, records = vit_forward(batch, model, capture=True)
print(f"captured {len(records)} attention records; logit {logits.data[0, 0]:+.3f}")

for record in records:
    scores = compute_attention_scores(record)
    grid = normalize_map(class_token_map(scores), record.layer_index).grid
    hottest = np.unravel_index(np.argmax(grid), grid.shape)
    print(f"layer {record.layer_index}: grid {grid.shape[0]}x{grid.shape[1]}, "
          f"hottest patch (row {hottest[0]}, col {hottest[1]})")

paths = write_overlays(image.rgb, records, "demo_output/attention", alpha=0.5)
print("\nwrote", ", ".join(str(p) for p in paths))
