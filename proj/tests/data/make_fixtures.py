"""Regenerates the small archives used by the loader tests."""
import os

import numpy as np

here = os.path.dirname(os.path.abspath(__file__))
rng = np.random.default_rng(7)


def images(n, *shape):
    x = rng.integers(0, 256, size=(n, *shape), dtype=np.uint8)
    x[0].flat[0] = 255
    x[0].flat[1] = 0
    return x


def labels(n, classes):
    return (np.arange(n) % classes).astype(np.uint8).reshape(n, 1)


np.savez_compressed(
    os.path.join(here, "mini_medmnist.npz"),
    train_images=images(12, 6, 6), train_labels=labels(12, 4),
    val_images=images(8, 6, 6), val_labels=labels(8, 4),
    test_images=images(8, 6, 6), test_labels=labels(8, 4),
)

np.savez_compressed(
    os.path.join(here, "missing_val_labels.npz"),
    train_images=images(4, 6, 6), train_labels=labels(4, 2),
    val_images=images(4, 6, 6),
    test_images=images(4, 6, 6), test_labels=labels(4, 2),
)

# Stored (not deflated), float RGB, int64 labels, no validation split.
np.savez(
    os.path.join(here, "float_rgb_noval.npz"),
    train_images=rng.random((20, 4, 4, 3), dtype=np.float32),
    train_labels=(np.arange(20) % 2).astype(np.int64),
    test_images=rng.random((6, 4, 4, 3), dtype=np.float32),
    test_labels=(np.arange(6) % 2).astype(np.int64),
)

np.savez(
    os.path.join(here, "int16_images.npz"),
    train_images=np.zeros((2, 4, 4), dtype=np.int16), train_labels=labels(2, 2),
    val_images=np.zeros((2, 4, 4), dtype=np.int16), val_labels=labels(2, 2),
    test_images=np.zeros((2, 4, 4), dtype=np.int16), test_labels=labels(2, 2),
)

# Reference values the tests compare against.
with np.load(os.path.join(here, "mini_medmnist.npz")) as z:
    ref = z["train_images"]
    np.savetxt(os.path.join(here, "mini_medmnist_train0.txt"), ref[0].reshape(-1) / 255.0, fmt="%.17g")
