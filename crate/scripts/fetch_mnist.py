"""Builds IDX files for the desk-scale MNIST subset.

The 10,000 digits come from the `mnist` npm package (grayscale values in
[0, 1] with three decimals). Each digit class is split in order: the first
80% go to the training files, the rest to the test files.

    python3 scripts/fetch_mnist.py [out_dir]
"""

import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile

TRAIN_FRACTION = 0.8


def write_idx(path, images, labels_path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True)
        tgz = next(pathlib.Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tgz) as t:
            t.extractall(tmp)
        split = {"train": ([], []), "test": ([], [])}
        for digit in range(10):
            raw = json.loads((pathlib.Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())["data"]
            count = len(raw) // 784
            cut = int(count * TRAIN_FRACTION)
            for i in range(count):
                pixels = [min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784]]
                images, labels = split["train" if i < cut else "test"]
                images.append(pixels)
                labels.append(digit)
    for name, (images, labels) in split.items():
        write_idx(out / f"{name}-images-idx3-ubyte", images, out / f"{name}-labels-idx1-ubyte", labels)
        print(f"{name}: {len(images)} images")


if __name__ == "__main__":
    main()
