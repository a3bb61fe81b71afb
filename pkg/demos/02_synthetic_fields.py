"""Generate a synthetic field image and inspect its class signature.

Healthy canopy regions are green-dominant; stressed ones are shifted toward
yellow (red channel up, blue down). The mean R-B gap per window is what
makes the desk-scale learning problems well-posed.
"""

import numpy as np

from stressvit.data import SynthConfig, extract_windows, save_dataset, synthesize_dataset
from stressvit.ppm import write_ppm

config = SynthConfig(image_size=256, healthy_regions=3, stressed_regions=2, seed=7)
images = synthesize_dataset(4, config)
print(f"generated {len(images)} images of {config.image_size}x{config.image_size}")

image = images[0]
print(f"\n{image.image_id}: {len(image.boxes)} annotated regions")
for box in image.boxes:
    print(f"  {box.label:8s} ({box.x_min:3d},{box.y_min:3d})-({box.x_max:3d},{box.y_max:3d})")

print("\nper-window mean(R - B), the color signature the models learn:")
for window in extract_windows(image):
    rgb = window.rgb.astype(float)
    gap = float(np.mean(rgb[:, :, 0] - rgb[:, :, 2]))
    label = "stressed" if window.label else "healthy"
    print(f"  {label:8s} {window.rgb.shape[1]:3d}x{window.rgb.shape[0]:3d} px  gap {gap:7.2f}")

save_dataset(images, "demo_output/fields")
write_ppm("demo_output/fields/first_window.ppm", extract_windows(image)[0].rgb)
print("\nwrote demo_output/fields/ (images/, annotations.csv, first_window.ppm)")
