"""Shared plumbing: seeded RNG hierarchy, atomic file writes, dense-array persistence."""

import json
import os
import tempfile
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch


def spawn_seed(master_seed: int, *labels) -> int:
    """Derive a child seed from a master seed and a label path.

    All randomness in a run (data subsetting, weight init, attack noise) is
    funneled through seeds derived this way, so a single master seed replays
    the whole run.  Labels hash via crc32, which is stable across processes
    (Python's hash() is salted and would break replay).
    """
    key = tuple(zlib.crc32(str(l).encode()) for l in labels)
    ss = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(ss.generate_state(1)[0])


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63 - 1))
    return g


@contextmanager
def atomic_open(path, mode="w"):
    """Write to a temp file in the target directory, rename on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_torch_save(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_array(path, arr):
    """Persist a dense array in .npy format (self-describing shape + dtype header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.save(fh, np.asarray(arr))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_array(path) -> np.ndarray:
    return np.load(path)


def write_json(path, obj):
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
