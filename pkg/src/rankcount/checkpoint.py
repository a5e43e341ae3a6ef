"""Checkpoint files with embedded content digests.

A checkpoint is a ``torch.save`` dict holding a kind tag, metadata (config
snapshot, provenance) and a tensor state. ``payload_sha256`` covers the
metadata JSON and every tensor; loading recomputes and compares it. Probe
checkpoints reference their rank checkpoint by file SHA-256.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .encoders import EncoderConfig
from .exceptions import DigestMismatchError
from .probe import ProbeModel
from .ranking import RankModel, TrainConfig, init_rank_model

FORMAT = "rankcount-checkpoint/1"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _payload_digest(kind: str, meta: dict, state: dict) -> str:
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.contiguous().numpy().tobytes())
    return h.hexdigest()


def _write(path, kind: str, meta: dict, state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in state.items()}
    blob = {
        "format": FORMAT,
        "kind": kind,
        "meta": json.dumps(meta, sort_keys=True),
        "state": state,
        "payload_sha256": _payload_digest(kind, meta, state),
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def _read(path, kind: str):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        meta = json.loads(blob["meta"])
        state = blob["state"]
        stored = blob["payload_sha256"]
        ok = blob.get("format") == FORMAT and blob.get("kind") == kind
    except Exception:
        raise DigestMismatchError(path, "unreadable or corrupt checkpoint") from None
    if not ok or _payload_digest(kind, meta, state) != stored:
        raise DigestMismatchError(path)
    return meta, state


def save_rank_model(model: RankModel, path, config: Optional[dict] = None,
                    upstream: Optional[dict] = None) -> Path:
    meta = {"config": config, "provenance": model.provenance(), "upstream": upstream or {}}
    return _write(path, "rank_model", meta, model.state_dict())


def load_rank_model(path) -> RankModel:
    meta, state = _read(path, "rank_model")
    prov = meta["provenance"]
    enc = prov["encoder"]
    enc_cfg = EncoderConfig(enc["architecture"], enc["feature_dim"], tuple(enc["input_size"]),
                            enc.get("backbone_weights"))
    model = init_rank_model(enc_cfg, 0)
    model.load_state_dict(state)
    model.train_cfg = TrainConfig(**prov["train"]) if prov.get("train") else None
    model.epoch = prov["epoch"]
    model.val_accuracy = prov["val_accuracy"]
    model.config = meta.get("config")
    model.eval()
    return model


def save_probe(probe: ProbeModel, path, rank_path, config: Optional[dict] = None,
               upstream: Optional[dict] = None) -> Path:
    digest = file_digest(rank_path)
    meta = {
        "config": config,
        "upstream": upstream or {},
        # relative, so identical runs in different directories hash equal
        "rank_checkpoint": os.path.relpath(Path(rank_path).resolve(), Path(path).resolve().parent),
        "rank_sha256": digest,
        "train": None if probe.train_cfg is None else vars(probe.train_cfg).copy(),
    }
    state = {
        "weight": torch.from_numpy(np.asarray(probe.weight, dtype=np.float64)),
        "bias": torch.tensor(probe.bias, dtype=torch.float64),
    }
    probe.rank_digest = digest
    return _write(path, "probe", meta, state)


def load_probe(path, rank_path=None) -> ProbeModel:
    """Load a probe and the rank checkpoint it references.

    The rank file (``rank_path`` or the recorded location) must hash to the
    digest stored in the probe checkpoint.
    """
    meta, state = _read(path, "probe")
    rank_path = Path(rank_path) if rank_path else Path(path).parent / meta["rank_checkpoint"]
    if not rank_path.is_file():
        raise FileNotFoundError(f"rank checkpoint not found: {rank_path}")
    if file_digest(rank_path) != meta["rank_sha256"]:
        raise DigestMismatchError(rank_path, "rank checkpoint does not match the probe's recorded digest")
    rank_model = load_rank_model(rank_path)
    train = TrainConfig(**meta["train"]) if meta.get("train") else None
    probe = ProbeModel(rank_model, state["weight"].numpy(), float(state["bias"]), train,
                       meta["rank_sha256"])
    probe.config = meta.get("config")
    return probe
