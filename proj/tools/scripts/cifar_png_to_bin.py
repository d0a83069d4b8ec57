"""Repacks the PNG-strip CIFAR-10 distribution into the canonical binary batches.

Each input PNG holds 10000 images, one per row, 1024 RGB pixels per row in
row-major order. Output records are 1 label byte followed by the R, G and B
planes (1024 bytes each).
"""
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def repack(png: Path, labels: list[int], out: Path) -> None:
    pixels = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    if pixels.shape != (len(labels), 1024, 3):
        raise SystemExit(f"{png}: unexpected shape {pixels.shape}")
    planes = pixels.transpose(0, 2, 1).reshape(len(labels), 3072)
    records = np.empty((len(labels), 3073), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = planes
    out.write_bytes(records.tobytes())


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train_labels = json.loads((src / "train_lables.json").read_text())
    test_labels = json.loads((src / "test_lables.json").read_text())
    for b in range(5):
        repack(src / f"data_batch_{b + 1}.png",
               train_labels[b * 10000:(b + 1) * 10000],
               dst / f"data_batch_{b + 1}.bin")
    repack(src / "test_batch.png", test_labels, dst / "test_batch.bin")


if __name__ == "__main__":
    main()
