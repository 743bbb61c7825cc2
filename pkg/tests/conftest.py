import numpy as np
import pytest
from PIL import Image

from captcha_bench import ClassId, SynthConfig, build_dataset


def checker_image(width, height, a=60, b=200, tile=16):
    """Deterministic checkerboard RGB array; distinct per size."""
    yy, xx = np.mgrid[0:height, 0:width]
    mask = ((xx // tile) + (yy // tile)) % 2
    img = np.where(mask[..., None] == 0, a, b).astype(np.uint8)
    img = np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img
    return img


def solid_image(width, height, rgb):
    img = np.zeros((height, width, 3), dtype=np.uint8)
    img[:] = rgb
    return img


def save_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


CLASS_COLORS = {
    ClassId.TEXT: (220, 40, 40),
    ClassId.PUZZLE: (40, 220, 40),
    ClassId.IMAGE: (40, 40, 220),
    ClassId.BUTTON: (220, 220, 40),
}


@pytest.fixture
def source_dirs(tmp_path):
    """Webpage and per-class captcha source directories with tiny images."""
    webpage_dir = tmp_path / "webpages"
    for i, (w, h) in enumerate([(320, 240), (400, 260), (360, 300)]):
        save_png(webpage_dir / f"page_{i}.png", checker_image(w, h, a=30 + 10 * i))
    captcha_dirs = {}
    for cls in ClassId:
        d = tmp_path / "captchas" / cls.label
        for j, (w, h) in enumerate([(80, 50), (64, 64)]):
            arr = solid_image(w, h, CLASS_COLORS[cls])
            arr[::7, :] = (10, 10, 10)  # stripes so resizing is non-trivial
            save_png(d / f"{cls.label}_{j}.png", arr)
        captcha_dirs[cls] = d
    return webpage_dir, captcha_dirs


@pytest.fixture
def small_dataset(tmp_path, source_dirs):
    """A 12-image synthetic dataset (2 per class + 4 negatives) on disk."""
    webpage_dir, captcha_dirs = source_dirs
    cfg = SynthConfig(per_class_target=2, negative_count=4, rng_seed=11,
                      scale_range=(0.2, 0.4))
    out = tmp_path / "dataset"
    manifest = build_dataset(webpage_dir, captcha_dirs, out, cfg)
    return manifest
