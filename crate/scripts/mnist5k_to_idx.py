"""Convert the 5000-sample MNIST excerpt bundled with mlxtend into IDX files.

Usage: python3 scripts/mnist5k_to_idx.py path/to/mlxtend-*.whl data/mnist

Per digit, the first 400 samples go to the train files and the last 100 to
the t10k (test) files. Sample order within each split follows the source.
"""
import gzip
import struct
import sys
import zipfile


def write_idx(images, labels, img_path, lbl_path):
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for px in images:
            f.write(bytes(px))
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    seen = {}
    train, test = ([], []), ([], [])
    for line in raw.strip().split("\n"):
        vals = [int(float(v)) for v in line.split(",")]
        px, label = vals[:-1], vals[-1]
        k = seen.get(label, 0)
        seen[label] = k + 1
        dst = train if k < 400 else test
        dst[0].append(px)
        dst[1].append(label)
    write_idx(*train, f"{out_dir}/train-images-idx3-ubyte", f"{out_dir}/train-labels-idx1-ubyte")
    write_idx(*test, f"{out_dir}/t10k-images-idx3-ubyte", f"{out_dir}/t10k-labels-idx1-ubyte")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
