"""File formats: landmark files, grey-level images, model files, run configs, CSV tables."""

import json
import math
import re
from dataclasses import fields
from pathlib import Path

import numpy as np

from .geometry import TemplateFrame, as_points, as_vector
from .model import AppearanceModel, ShapeModel, assemble_aam

MODEL_FORMAT = "bidiraam-model"
MODEL_VERSION = 1


class FormatError(ValueError):
    """A file does not follow its declared format."""


# --- landmark files -------------------------------------------------------

def write_pts(path, shape):
    pts = as_points(shape)
    lines = ["version: 1", f"n_points: {len(pts)}", "{"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in pts]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pts(path):
    """Landmarks of a ``.pts`` file as an interleaved (x1, y1, ...) vector."""
    text = Path(path).read_text().splitlines()
    lines = [ln.strip() for ln in text if ln.strip()]
    if len(lines) < 3 or not re.fullmatch(r"version:\s*1", lines[0]):
        raise FormatError(f"{path}: expected 'version: 1' header")
    m = re.fullmatch(r"n_points:\s*(\d+)", lines[1])
    if not m:
        raise FormatError(f"{path}: expected 'n_points: <count>' on line 2")
    n = int(m.group(1))
    try:
        open_at = lines.index("{")
        close_at = lines.index("}", open_at)
    except ValueError:
        raise FormatError(f"{path}: missing '{{' or '}}'") from None
    body = lines[open_at + 1:close_at]
    if len(body) != n:
        raise FormatError(f"{path}: declares {n} points but lists {len(body)}")
    try:
        pts = np.array([[float(t) for t in ln.split()] for ln in body])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if pts.shape != (n, 2) or not np.all(np.isfinite(pts)):
        raise FormatError(f"{path}: every point line needs two finite numbers")
    return as_vector(pts)


# --- images ---------------------------------------------------------------

def write_pgm(path, image, value_range=None):
    """16-bit binary PGM; ``value_range`` maps linearly onto 0..65535.

    By default the range is [-0.25, 1.25], widened to cover the image so that
    nothing clips. The range is stored as a header comment so :func:`read_pgm`
    restores the original intensities to within half a quantisation step.
    """
    img = np.asarray(image, dtype=float)
    if value_range is None:
        value_range = (min(-0.25, float(img.min())), max(1.25, float(img.max())))
    lo, hi = map(float, value_range)
    q = np.clip(np.round((img - lo) / (hi - lo) * 65535.0), 0, 65535).astype(">u2")
    h, w = img.shape
    header = f"P5\n# range {lo!r} {hi!r}\n{w} {h}\n65535\n".encode()
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path):
    """Binary (P5) or plain (P2) PGM as floats.

    Values are scaled to [0, 1] by the maximum value, or mapped back through
    a ``# range lo hi`` comment when present.
    """
    data = Path(path).read_bytes()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            end = len(data) if end < 0 else end
            comments.append(data[pos + 1:end].decode(errors="replace").strip())
            pos = end
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode(errors="replace"))
    magic = tokens[0]
    if magic not in ("P2", "P5"):
        raise FormatError(f"{path}: not a PGM file (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: bad PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM dimensions or maximum value")
    if magic == "P5":
        body = data[pos + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(body) < w * h * dtype.itemsize:
            raise FormatError(f"{path}: truncated pixel data")
        raw = np.frombuffer(body, dtype=dtype, count=w * h)
    else:
        raw = np.array(data[pos:].split()[:w * h], dtype=np.int64)
        if raw.size < w * h:
            raise FormatError(f"{path}: truncated pixel data")
    img = raw.reshape(h, w).astype(float)
    for c in comments:
        m = re.fullmatch(r"range\s+(\S+)\s+(\S+)", c)
        if m:
            lo, hi = float(m.group(1)), float(m.group(2))
            return lo + img / maxval * (hi - lo)
    return img / maxval


def read_image(path):
    """PGM or ``.npy`` single-channel image."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        img = np.load(path, allow_pickle=False).astype(float)
        if img.ndim != 2 or not np.all(np.isfinite(img)):
            raise FormatError(f"{path}: expected a finite 2-D array")
        return img
    return read_pgm(path)


IMAGE_SUFFIXES = (".pgm", ".npy")


# --- model files ----------------------------------------------------------

def save_model(path, aam):
    """Write an AAM as an ``.npz`` archive with a JSON header entry."""
    sm, am = aam.shape_model, aam.appearance_model
    frame = am.frame
    header = {
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "v": int(sm.v), "n": int(sm.n), "m": int(am.m), "k": int(aam.k),
        "global_kind": aam.global_basis.kind, "mode": aam.mode,
        "shape_retained_variance": float(sm.retained_variance), "shape_scale": float(sm.scale),
        "appearance_retained_variance": float(am.retained_variance),
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "s0": sm.s0, "shape_basis": sm.basis, "shape_eigenvalues": sm.eigenvalues,
        "triangles": frame.triangles, "frame_origin": frame.origin,
        "frame_size": np.array([frame.height, frame.width], dtype=np.int64), "frame_mask": frame.mask,
        "A0": am.mean, "appearance_basis": am.basis, "appearance_eigenvalues": am.eigenvalues,
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read model archive ({exc})") from None
    try:
        header = json.loads(arrays.pop("header").tobytes().decode())
    except (KeyError, ValueError):
        raise FormatError(f"{path}: missing or unreadable header") from None
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model format {header.get('format')!r} "
                          f"version {header.get('version')!r}")
    sm = ShapeModel(arrays["s0"], arrays["shape_basis"], arrays["shape_eigenvalues"],
                    header["shape_retained_variance"], header["shape_scale"])
    frame = TemplateFrame(sm.s0, arrays["triangles"], origin=tuple(arrays["frame_origin"]),
                          size=tuple(int(s) for s in arrays["frame_size"]))
    if not np.array_equal(frame.mask, arrays["frame_mask"]):
        raise FormatError(f"{path}: stored template mask does not match the mesh")
    am = AppearanceModel(frame, arrays["A0"], arrays["appearance_basis"], arrays["appearance_eigenvalues"],
                         header["appearance_retained_variance"])
    aam = assemble_aam(sm, am, header["global_kind"], header["mode"])
    if (aam.shape_model.n, aam.m, aam.k) != (header["n"], header["m"], header["k"]):
        raise FormatError(f"{path}: header dimensions disagree with the stored arrays")
    return aam


# --- run configuration files ----------------------------------------------

class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path or '<config>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line


def _list(text, convert):
    return tuple(convert(t.strip()) for t in text.split(",") if t.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


EXPERIMENT_KEYS = {
    "algorithms": lambda s: _list(s, str),
    "training_sizes": lambda s: _list(s, int),
    "folds": int, "test_size": int, "trials": int, "rng_seed": int,
    "perturbation_px": float, "fitted_threshold_px": float,
    "anchor_indices": lambda s: _list(s, int),
    "shape_variance": float, "appearance_variance": float,
    "max_iters": int, "param_tol": float,
}
DATA_KEYS = {"source": str, "images": str, "landmarks": str, "test_images": str, "test_landmarks": str}


def _synthetic_keys():
    from .synthetic import SyntheticSpec
    out = {}
    for f in fields(SyntheticSpec):
        if f.type in ("tuple", tuple):
            out[f.name] = (lambda conv: lambda s: _list(s, conv))(int if f.name == "image_size" else float)
        elif f.type in ("int", int):
            out[f.name] = int
        elif f.type in ("float", float):
            out[f.name] = float
        else:
            out[f.name] = str
    return out


def parse_run_config(text, path=None):
    """Parse a ``[section]`` / ``key = value`` experiment description.

    Sections: ``data`` (``source = synthetic`` or ``files``), ``synthetic``
    (training population), ``test`` (overrides for a held-out synthetic test
    set) and ``experiment``. Returns ``{section: {key: value}}``.
    """
    synth = _synthetic_keys()
    schema = {"data": DATA_KEYS, "synthetic": synth, "test": synth, "experiment": EXPERIMENT_KEYS}
    out, section = {}, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[\s*(\w+)\s*\]", line)
        if m:
            section = m.group(1).lower()
            if section not in schema:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            if section in out:
                raise ConfigError(f"duplicate section [{section}]", lineno, path)
            out[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in out[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        try:
            out[section][key] = schema[section][key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, path) from None
    if "experiment" not in out:
        raise ConfigError("missing [experiment] section", None, path)
    source = out.get("data", {}).get("source", "synthetic")
    if source not in ("synthetic", "files"):
        raise ConfigError(f"unknown data source {source!r}", None, path)
    if source == "files" and not {"images", "landmarks"} <= out.get("data", {}).keys():
        raise ConfigError("file data needs 'images' and 'landmarks' directories", None, path)
    return out


# --- CSV ------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.10g}"
    return str(value)


def csv_text(rows, columns):
    """Deterministic CSV: fixed column order, floats to 10 significant digits."""
    lines = [",".join(columns)]
    for row in rows:
        get = row.get if isinstance(row, dict) else (lambda k, r=row: getattr(r, k))
        lines.append(",".join(_fmt(get(c)) for c in columns))
    return "\n".join(lines) + "\n"
