"""Binary checkpoints for networks and cached datasets, plus the text trigger catalog.

Layout of a binary file (all integers little-endian)::

    magic        4 bytes   b"BDMN" (network) or b"BDMD" (dataset)
    version      uint16    currently 1
    header_len   uint32    byte length of the header that follows
    header       UTF-8 JSON: {"kind", "arch", "meta", "arrays": [[name, shape], ...]}
    payload      each array in header order as little-endian float64, row-major

Integer arrays (dataset labels) are stored as float64 and restored exactly.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .networks import build
from .numeric import ContractError

NETWORK_MAGIC = b"BDMN"
DATASET_MAGIC = b"BDMD"
FORMAT_VERSION = 1


def _write(path, magic: bytes, kind: str, arch: dict, arrays: "OrderedDict[str, np.ndarray]",
           meta: Optional[dict] = None):
    header = {"kind": kind, "arch": arch, "meta": meta or {},
              "arrays": [[name, list(a.shape)] for name, a in arrays.items()]}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read(path, magic: bytes) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise ContractError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {version}")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    off = 10 + hlen
    arrays = OrderedDict()
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(data):
        raise ContractError(f"{path}: {len(data) - off} trailing bytes")
    return header, arrays


def save_network(path, net, meta: Optional[dict] = None) -> None:
    arrays = OrderedDict()
    for k, v in net.params.items():
        arrays["param:" + k] = v
    for k, v in net.buffers.items():
        arrays["buffer:" + k] = v
    _write(path, NETWORK_MAGIC, net.kind, net.arch(), arrays, meta)


def load_network(path, with_meta: bool = False):
    header, arrays = _read(path, NETWORK_MAGIC)
    net = build(header["kind"], header["arch"])
    for name, a in arrays.items():
        group, key = name.split(":", 1)
        target = net.params if group == "param" else net.buffers
        if key not in target or target[key].shape != a.shape:
            raise ContractError(f"{path}: array {name} does not fit architecture")
        target[key] = a.copy()
    return (net, header.get("meta", {})) if with_meta else net


def save_dataset(path, train, test, meta: Optional[dict] = None) -> None:
    arrays = OrderedDict(
        train_images=train.images, train_labels=train.labels.astype(np.float64),
        test_images=test.images, test_labels=test.labels.astype(np.float64),
        norm_mean=train.norm_mean, norm_std=train.norm_std,
    )
    _write(path, DATASET_MAGIC, "dataset", {"n_classes": train.n_classes}, arrays, meta)


def load_dataset(path, with_meta: bool = False):
    from .testbed import LabeledImageSet

    header, a = _read(path, DATASET_MAGIC)
    k = header["arch"]["n_classes"]
    train = LabeledImageSet(a["train_images"].copy(), a["train_labels"].astype(np.int64), a["norm_mean"].copy(),
                            a["norm_std"].copy(), k)
    test = LabeledImageSet(a["test_images"].copy(), a["test_labels"].astype(np.int64), a["norm_mean"].copy(),
                           a["norm_std"].copy(), k)
    return (train, test, header.get("meta", {})) if with_meta else (train, test)


def catalog_to_doc(entries) -> dict:
    """Trigger catalog as a JSON-ready mapping: name, kind, shape and row-major normalized pixels."""
    rows = [{"name": e.name, "kind": e.kind, "shape": list(e.trigger.shape),
             "pixels": [float(v) for v in e.trigger.reshape(-1)], "meta": e.meta} for e in entries]
    return {"format": "trigger-catalog", "version": 1, "triggers": rows}


def catalog_from_doc(doc: dict) -> List:
    from .testbed import CatalogEntry

    return [CatalogEntry(r["name"], np.array(r["pixels"], dtype=np.float64).reshape(r["shape"]), r["kind"],
                         r.get("meta", {})) for r in doc["triggers"]]


def save_catalog(path, entries) -> None:
    Path(path).write_text(json.dumps(catalog_to_doc(entries), indent=1) + "\n", encoding="utf-8")


def load_catalog(path) -> List:
    return catalog_from_doc(json.loads(Path(path).read_text(encoding="utf-8")))
