"""
Thing-class shares and inverse-share sampling
=============================================

Rare object classes (riders, motorcycles) cover far fewer pixels than cars in
street-scene label maps. This script builds a handful of synthetic label maps,
counts pixels per class, and turns the thing-class shares into sampling
probabilities that favour the rare classes.
"""
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from weathergen import default_class_config, sampling_probabilities, scan_label_maps, thing_distribution

# %%
# Fake a tiny "dataset": 8 label maps of 64x128 pixels with Cityscapes train
# IDs. Road (0) and sky (10) dominate, cars (13) are common, riders (12) and
# motorcycles (17) are rare, 255 marks unlabelled pixels.
rng = np.random.default_rng(0)
ids = np.array([0, 10, 13, 11, 12, 17, 18, 255], dtype=np.uint8)
weights = np.array([0.45, 0.25, 0.15, 0.05, 0.01, 0.005, 0.02, 0.065])
weights /= weights.sum()

label_dir = Path(tempfile.mkdtemp()) / "labels"
label_dir.mkdir()
for i in range(8):
    arr = rng.choice(ids, size=(64, 128), p=weights)
    Image.fromarray(arr, mode="L").save(label_dir / f"frame_{i:03d}.png")

# %%
# Count pixels. Stuff classes are counted too but never enter the share.
cfg = default_class_config()
counts = scan_label_maps(label_dir, cfg)
print(f"scanned {counts.files_scanned} files, {counts.total_pixels} pixels")

# %%
# Shares over thing classes only. Classes with no pixels at all (truck, bus,
# ...) still get a small share thanks to +1 smoothing, which keeps their
# inverse finite.
dist = thing_distribution(counts, cfg, smoothing=1)
table = sampling_probabilities(dist)

print(f"{'class':<14}{'pixels':>8}{'share':>9}{'P':>9}")
for class_id, name, p in table.items():
    print(f"{name:<14}{counts.counts[class_id]:8d}{dist.shares[class_id]:9.4f}{p:9.4f}")

# %%
# With smoothing, absent classes end up with the largest probability of all.
# Raise ``smoothing`` to flatten the table, or drop classes you never want to
# generate from the class config.
