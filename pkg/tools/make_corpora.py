"""Regenerate the IDX corpora shipped under src/adaptmerge/corpora/.

digits  -- scikit-learn's bundled 8x8 handwritten digits (1797 samples),
           0..16 intensities rescaled to 0..255, stratified 80/20 split.
letters -- uppercase A-Z rendered from the DejaVu TrueType faces with random
           size, rotation, shear and offset, then reduced to 8x8 block counts
           exactly like the digits were. Used only for backbone pretraining;
           its classes never appear in a digit task.

    python tools/make_corpora.py
"""
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from sklearn.datasets import load_digits

from adaptmerge.data import write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "adaptmerge" / "corpora"
FONT_DIR = Path("/usr/share/fonts/truetype/dejavu")
FACES = ["DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf", "DejaVuSerif-Bold.ttf",
         "DejaVuSansMono.ttf", "DejaVuSansMono-Bold.ttf"]


def stratified_split(labels, test_fraction, seed):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(len(idx) * test_fraction))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(train), np.sort(test)


def digits():
    d = load_digits()
    images = np.round(d.images * 255.0 / 16.0).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    tr, te = stratified_split(labels, 0.2, seed=0)
    return images, labels, tr, te


def render_letter(ch, font_path, rng):
    size = int(rng.integers(30, 38))
    stroke = int(rng.integers(0, 2))
    font = ImageFont.truetype(str(font_path), size)
    canvas = Image.new("L", (48, 48), 0)
    draw = ImageDraw.Draw(canvas)
    x0, y0, x1, y1 = draw.textbbox((0, 0), ch, font=font, stroke_width=stroke)
    draw.text(((48 - (x1 - x0)) / 2 - x0, (48 - (y1 - y0)) / 2 - y0), ch, fill=255, font=font,
              stroke_width=stroke, stroke_fill=255)
    shear = rng.uniform(-0.25, 0.25)
    canvas = canvas.transform((48, 48), Image.AFFINE, (1, shear, -shear * 24, 0, 1, 0), resample=Image.BILINEAR)
    canvas = canvas.rotate(rng.uniform(-12, 12), resample=Image.BILINEAR, center=(24, 24))
    dx, dy = rng.integers(-2, 3, size=2)
    crop = canvas.crop((8 + dx, 8 + dy, 40 + dx, 40 + dy))
    bitmap = (np.asarray(crop) > 127).astype(np.int64)
    counts = bitmap.reshape(8, 4, 8, 4).sum(axis=(1, 3))
    return np.round(counts * 255.0 / 16.0).astype(np.uint8)


def letters(per_class=180):
    rng = np.random.default_rng(1234)
    images, labels = [], []
    for c, ch in enumerate("ABCDEFGHIJKLMNOPQRSTUVWXYZ"):
        for i in range(per_class):
            images.append(render_letter(ch, FONT_DIR / FACES[i % len(FACES)], rng))
            labels.append(c)
    images, labels = np.stack(images), np.array(labels, dtype=np.uint8)
    tr, te = stratified_split(labels, 1 / 6, seed=1)
    return images, labels, tr, te


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (images, labels, tr, te) in {"digits": digits(), "letters": letters()}.items():
        for split, idx in (("train", tr), ("test", te)):
            write_idx(OUT / f"{name}-{split}-images.idx", images[idx])
            write_idx(OUT / f"{name}-{split}-labels.idx", labels[idx])
        print(f"{name}: {len(tr)} train / {len(te)} test, {len(np.unique(labels))} classes")


if __name__ == "__main__":
    main()
