"""Place CIFAR-10 in the binary layout the loader reads (data_batch_1..5.bin, test_batch.bin).

Two sources:
  python3 scripts/fetch_cifar10.py                       # official binary tarball
  python3 scripts/fetch_cifar10.py --npm-tarball FILE    # PNG sprites from `npm pack tfjs-cifar10@1.1.1`

The second path needs Pillow (``pip install .[data]``).
"""

import argparse
import io
import json
import os
import tarfile
import urllib.request

import numpy as np

OFFICIAL_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]


def from_official(out: str, url: str = OFFICIAL_URL) -> None:
    with urllib.request.urlopen(url) as resp:
        raw = resp.read()
    with tarfile.open(fileobj=io.BytesIO(raw), mode="r:gz") as tar:
        for member in tar.getmembers():
            name = os.path.basename(member.name)
            if name in FILES:
                with open(os.path.join(out, name), "wb") as fh:
                    fh.write(tar.extractfile(member).read())


def _records(png: bytes, labels) -> bytes:
    from PIL import Image

    pixels = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
    n = len(labels)
    planes = pixels.reshape(n, 32, 32, 3).transpose(0, 3, 1, 2).reshape(n, 3072)
    return np.concatenate([np.asarray(labels, np.uint8)[:, None], planes], axis=1).tobytes()


def from_npm(out: str, tarball: str) -> None:
    """Each PNG sprite holds 10000 images row-major; labels come from the JSON lists (sic 'lables')."""
    with tarfile.open(tarball, "r:gz") as tar:
        read = lambda name: tar.extractfile(f"package/{name}").read()
        train = json.loads(read("train_lables.json"))
        test = json.loads(read("test_lables.json"))
        for i in range(5):
            chunk = train[i * 10000 : (i + 1) * 10000]
            with open(os.path.join(out, f"data_batch_{i + 1}.bin"), "wb") as fh:
                fh.write(_records(read(f"data_batch_{i + 1}.png"), chunk))
        with open(os.path.join(out, "test_batch.bin"), "wb") as fh:
            fh.write(_records(read("test_batch.png"), test))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/cifar-10-batches-bin")
    ap.add_argument("--npm-tarball", help="tfjs-cifar10 package tarball to convert instead of downloading")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if args.npm_tarball:
        from_npm(args.out, args.npm_tarball)
    else:
        from_official(args.out)
    from dcnet.data import load_cifar10

    train, test = load_cifar10(args.out)
    print(f"{args.out}: {len(train)} training and {len(test)} test images")


if __name__ == "__main__":
    main()
