#!/usr/bin/env python3
"""Regenerate the sample images in data/ from the scikit-image gallery.

Every image is converted to 8-bit greyscale and resized so its short side
is 256 pixels, then written as binary PGM. Cameraman (the only image in
data/test/) is kept out of the training set.

    python3 scripts/make_data.py [--out data]
"""

import argparse
from pathlib import Path

import numpy as np
from skimage import data
from skimage.color import rgb2gray
from skimage.transform import resize

TEST = {"cameraman": data.camera}
TRAIN = {
    "astronaut": data.astronaut,
    "chelsea": data.chelsea,
    "coffee": data.coffee,
    "rocket": data.rocket,
    "coins": data.coins,
    "moon": data.moon,
    "grass": data.grass,
    "gravel": data.gravel,
    "brick": data.brick,
    "clock": data.clock,
}


def to_grey_256(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.float64)
    if img.ndim == 3:
        img = rgb2gray(img[..., :3] / 255.0) * 255.0
    h, w = img.shape
    scale = 256.0 / min(h, w)
    shape = (round(h * scale), round(w * scale))
    img = resize(img, shape, anti_aliasing=True, preserve_range=True)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    args = ap.parse_args()
    for sub, images in (("test", TEST), ("train", TRAIN)):
        d = args.out / sub
        d.mkdir(parents=True, exist_ok=True)
        for name, load in images.items():
            write_pgm(d / f"{name}.pgm", to_grey_256(load()))
            print(d / f"{name}.pgm")


if __name__ == "__main__":
    main()
