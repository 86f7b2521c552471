"""On-disk cohorts: CSV manifests and little-endian binary tile features."""
import csv
import os
import struct

import numpy as np

from .core import SlideBag

FEATURE_MAGIC = b"WB"
TRUTH_MAGIC = b"WT"
MANIFEST_FIELDS = ("id", "percent", "true_percent", "slide_label", "features", "truth", "image", "truth_mask")


def _write_blob(path, magic, array, dtype):
    array = np.asarray(array)
    n = array.shape[0]
    d = array.shape[1] if array.ndim == 2 else 1
    with open(path, "wb") as fh:
        # 8-byte header: 2-byte magic, uint32 row count, uint16 width
        fh.write(magic + struct.pack("<IH", n, d))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_blob(path, magic, dtype):
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8 or head[:2] != magic:
            raise ValueError(f"{path}: bad header")
        n, d = struct.unpack("<IH", head[2:])
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != n * d:
        raise ValueError(f"{path}: expected {n * d} values, found {data.size}")
    return data.reshape(n, d)


def write_features(path, features):
    _write_blob(path, FEATURE_MAGIC, features, "<f4")


def read_features(path):
    return _read_blob(path, FEATURE_MAGIC, "<f4").astype(np.float64)


def write_truth(path, truth):
    _write_blob(path, TRUTH_MAGIC, np.asarray(truth).reshape(-1), "u1")


def read_truth(path):
    return _read_blob(path, TRUTH_MAGIC, "u1")[:, 0].astype(np.int8)


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_manifest(path, rows):
    """``rows``: dicts keyed by MANIFEST_FIELDS; file paths relative to the manifest."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") if row.get(k) is not None else "" for k in MANIFEST_FIELDS})


def manifest_row(bag: SlideBag, features, truth="", image="", truth_mask=""):
    return {
        "id": bag.id,
        "percent": _fmt(bag.percent),
        "true_percent": _fmt(bag.true_percent),
        "slide_label": "" if bag.slide_label is None else str(bag.slide_label),
        "features": features,
        "truth": truth,
        "image": image,
        "truth_mask": truth_mask,
    }


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        return list(reader)


def resolve(manifest_path, rel):
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), rel)


def load_cohort(manifest_path):
    """Load every slide listed in a manifest into SlideBags (truth when present)."""
    bags = []
    for row in read_manifest(manifest_path):
        feats = read_features(resolve(manifest_path, row["features"]))
        truth = read_truth(resolve(manifest_path, row["truth"])) if row["truth"] else None
        bag = SlideBag(
            row["id"], feats, float(row["percent"]),
            int(row["slide_label"]) if row["slide_label"] else None,
            truth,
            true_percent=float(row["true_percent"]) if row["true_percent"] else None,
            meta={k: row[k] for k in ("features", "truth", "image", "truth_mask")},
        )
        bags.append(bag)
    return bags


def rebase_row(row, src_manifest, dst_manifest):
    """Rewrite a manifest row's relative paths for a manifest in another directory."""
    out = dict(row)
    dst_dir = os.path.dirname(os.path.abspath(dst_manifest))
    for key in ("features", "truth", "image", "truth_mask"):
        if row.get(key):
            out[key] = os.path.relpath(resolve(src_manifest, row[key]), dst_dir)
    return out
