"""Shared builders for the test suite."""

import numpy as np

from bidiraam import SyntheticSpec, build_aam, generate_synthetic_dataset, train_aam


def render_at_offset(aam, values, offset, size=(128, 128), background=0.0):
    """Place template-frame ``values`` into an image at an integer offset.

    Raster pixel (r, c) of the frame lands on image pixel (r + oy, c + ox), so
    sampling the image at the mesh of ``s0 + shift`` returns ``values``
    exactly. Returns ``(image, shift)``.
    """
    frame = aam.frame
    ox, oy = (int(o) for o in offset)
    img = np.full(size, float(background))
    img[frame.rows + oy, frame.cols + ox] = values
    shift = np.array([ox, oy], dtype=float) - frame.origin
    return img, shift


def square_shape(x0, y0, width, centre=True):
    pts = [(x0, y0), (x0 + width, y0), (x0 + width, y0 + width), (x0, y0 + width)]
    if centre:
        pts.append((x0 + width / 2, y0 + width / 2))
    return np.array(pts, dtype=float).reshape(-1)


def blob_template(points):
    """Smooth, asymmetric analytic appearance."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    return (np.exp(-((x - 18) ** 2 + (y - 22) ** 2) / (2 * 9.0 ** 2))
            + 0.6 * np.exp(-((x - 28) ** 2 + (y - 12) ** 2) / (2 * 6.0 ** 2)))


def translation_model(kind="translation"):
    """40 px square template with an analytic blob appearance and no local modes."""
    return build_aam(square_shape(0, 0, 40), appearance=blob_template, global_kind=kind)


def synthetic_pair(count=30, **spec):
    ds = generate_synthetic_dataset(SyntheticSpec(count=count, **spec))
    return ds, train_aam(ds.images, ds.shapes, 0.95, 0.95)
