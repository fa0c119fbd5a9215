"""Regenerates the natural-image fixtures and their reference values.

Crops come from scikit-image's bundled sample photographs. Reference JPEG
round trips use Pillow (libjpeg, 4:2:0, standard tables); metrics use
scikit-image's PSNR/SSIM and a NumPy blocking-effect factor. Run from this
directory:  python3 make_fixtures.py
"""

import io
import json
import os

import numpy as np
from PIL import Image
from skimage import data
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

CROPS = {
    # name: (loader, y0, x0, h, w) — sizes deliberately not multiples of 16
    "astronaut": (data.astronaut, 40, 150, 128, 120),
    "coffee": (data.coffee, 100, 200, 112, 136),
    "chelsea": (data.chelsea, 60, 100, 125, 131),
    "motorcycle": (data.stereo_motorcycle, 300, 500, 120, 160),
    "rocket": (data.rocket, 100, 150, 96, 144),
    "hubble": (data.hubble_deep_field, 200, 300, 104, 104),
}
QUALITIES = [10, 20]


def bef(plane):
    h, w = plane.shape
    dh = plane[:, :-1] - plane[:, 1:]
    dv = plane[:-1, :] - plane[1:, :]
    bh = (np.arange(w - 1) % 8) == 7
    bv = (np.arange(h - 1) % 8) == 7
    boundary = np.concatenate([(dh[:, bh] ** 2).ravel(), (dv[bv, :] ** 2).ravel()])
    inner = np.concatenate([(dh[:, ~bh] ** 2).ravel(), (dv[~bv, :] ** 2).ravel()])
    d_b, d_bc = boundary.mean(), inner.mean()
    if d_b <= d_bc:
        return 0.0
    return float(np.log2(8) / np.log2(min(h, w)) * (d_b - d_bc))


def psnrb(ref, test):
    ref = ref.astype(np.float64)
    test = test.astype(np.float64)
    mse = np.mean((ref - test) ** 2)
    b = np.mean([bef(test[..., c]) for c in range(3)])
    return float(10 * np.log10(255.0**2 / (mse + b)))


def metrics(ref, test):
    return {
        "psnr": float(peak_signal_noise_ratio(ref, test, data_range=255)),
        "ssim": float(
            structural_similarity(
                ref, test, channel_axis=2, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=255,
            )
        ),
        "psnrb": psnrb(ref, test),
    }


def pil_jpeg(img, q):
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=q, subsampling=2)
    return np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"))


def main():
    os.makedirs("natural", exist_ok=True)
    ref = {"images": {}, "pil_jpeg": {}}
    for name, (load, y0, x0, h, w) in CROPS.items():
        img = load()
        if isinstance(img, tuple):
            img = img[0]
        img = np.ascontiguousarray(img[y0 : y0 + h, x0 : x0 + w, :3])
        assert img.shape[:2] == (h, w), (name, img.shape)
        Image.fromarray(img).save(f"natural/{name}.png")
        ref["images"][name] = {"height": h, "width": w}
        for q in QUALITIES:
            dec = pil_jpeg(img, q)
            if name == "astronaut":
                Image.fromarray(dec).save(f"pil_{name}_q{q}.png")
            ref["pil_jpeg"].setdefault(str(q), {})[name] = metrics(img, dec)
    with open("reference.json", "w") as f:
        json.dump(ref, f, indent=2, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
