"""
Training a small U-Net on synthetic terrain
============================================

Generates a few dozen procedural tiles, trains a depth-2 model for a handful
of epochs and segments one validation tile. Outputs land in ./demo_out.
The desk-scale run uses the same calls with the defaults (640 tiles of
64x64, depth 3, 16 base filters, 12 epochs); see the README.
"""

import logging
from pathlib import Path

import numpy as np

from landseg.data import CLASS_NAMES, encode_image, encode_rgb_mask, load_split, write_dataset
from landseg.metrics import class_assign
from landseg.train import TrainConfig, evaluate, train
from landseg.unet import forward

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path("demo_out")

# tile i is generated from seed + i, so this is reproducible
write_dataset(n_tiles=60, seed=1, size=32, split_fraction=0.8, root=out / "data", overwrite=True)

cfg = TrainConfig(dataset_root=str(out / "data"), checkpoint_out=str(out / "run"),
                  depth=2, base_filters=8, epochs=6, batch_size=8, seed=0)
result = train(cfg)

_, x_val, y_val = load_split(out / "data", "val")
report = evaluate(result.model, x_val, y_val)
for name, d in zip(CLASS_NAMES, report.per_class_dice):
    print(f"dice[{name}] {d:.3f}")
print(f"macro Dice {report.macro_dice:.3f}, pixel accuracy {report.accuracy:.3f}")

# segment one tile; the color mask uses the class palette
probs, _ = forward(result.model, x_val[:1], "eval")
pred = class_assign(probs)[0]
(out / "tile.png").write_bytes(encode_image(x_val[0, :3]))
(out / "truth.png").write_bytes(encode_rgb_mask(y_val[0]))
(out / "pred.png").write_bytes(encode_rgb_mask(pred))
print("pixels agreeing with truth:", np.mean(pred == y_val[0]))
