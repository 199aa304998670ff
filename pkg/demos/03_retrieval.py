"""
Retrieving similar tiles by binary hash
=======================================

The bottleneck of a trained U-Net, averaged over space, describes a tile.
Thresholding each dimension at its corpus median gives a bit string, and
tiles are ranked by Hamming distance. Run 02_train_and_segment.py first;
this reuses its checkpoint and data.
"""

from pathlib import Path

import numpy as np

from landseg import cbir
from landseg.checkpoint import load_checkpoint
from landseg.data import CLASS_NAMES, load_split

out = Path("demo_out")
model = load_checkpoint(out / "run" / "best.ckpt").model
ids, x, y = load_split(out / "data", "train")
names = [f"{i:05d}" for i in ids]

index = cbir.build_index(model, zip(names, x))
print(f"{len(index)} tiles, {index.bits}-bit codes")
print("first code", "".join(map(str, index.codes[0])))

# majority class of each tile, just to see whether neighbours agree
majority = {n: int(np.bincount(m.ravel(), minlength=4).argmax()) for n, m in zip(names, y)}

q = 5
print("query", names[q], "mostly", CLASS_NAMES[majority[names[q]]])
for rank, (name, dist) in enumerate(cbir.query(index, model, x[q], k=6), 1):
    print(f"  {rank}. {name}  distance {dist:2d}  mostly {CLASS_NAMES[majority[name]]}")

images = dict(zip(names, x))
p5 = cbir.majority_class_precision(index, model, images, majority, k=5)
print(f"majority-class precision@5 over the corpus: {p5:.3f}")

# the index file is small and round-trips byte for byte
cbir.save_index(out / "train.idx", index)
assert cbir.load_index(out / "train.idx") == index
