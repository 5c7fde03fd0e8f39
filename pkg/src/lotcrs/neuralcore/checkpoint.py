"""Binary checkpoint container.

Layout: ``LOTCRSCK`` magic, u32 format version, u64 header length, a UTF-8
JSON header (shapes, vocabulary, config, stage), then every parameter as
little-endian float64 in row-major order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ModelParams
from .vocab import Vocabulary

MAGIC = b"LOTCRSCK"
FORMAT_VERSION = 1
STAGES = ("init", "pretrained", "teacher", "finetuned_rec", "finetuned_gen")


class CheckpointError(ValueError):
    pass


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocabulary
    item_ids: list[str]
    stage: str = "init"
    config: dict = field(default_factory=dict)
    parent: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")
        if len(self.vocab) != self.params.vocab_size:
            raise CheckpointError(
                f"vocabulary size {len(self.vocab)} does not match embedding rows {self.params.vocab_size}"
            )
        if len(self.item_ids) != self.params.n_items:
            raise CheckpointError(
                f"{len(self.item_ids)} item ids for {self.params.n_items} item embedding rows"
            )

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config)

    @property
    def checksum(self) -> str:
        return self.params.checksum()

    def save(self, path: str | Path) -> None:
        header = {
            "version": FORMAT_VERSION,
            "stage": self.stage,
            "max_len": self.params.max_len,
            "shapes": {n: list(self.params[n].shape) for n in PARAM_NAMES},
            "vocab": self.vocab.to_json(),
            "item_ids": self.item_ids,
            "config": self.config,
            "config_fingerprint": self.fingerprint,
            "parent": self.parent,
            "checksum": self.checksum,
        }
        blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            for n in PARAM_NAMES:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        with open(path, "rb") as fh:
            data = fh.read()
        if data[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, off)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off += struct.calcsize("<IQ")
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        vocab = Vocabulary.from_json(header["vocab"])
        d = header["shapes"]["tok_emb"][1]
        expected = ModelParams.expected_shapes(len(vocab), len(header["item_ids"]), d)
        tensors = {}
        for n in PARAM_NAMES:
            shape = tuple(header["shapes"][n])
            if shape != expected[n]:
                raise CheckpointError(f"{path}: parameter {n} has shape {shape}, expected {expected[n]}")
            size = int(np.prod(shape)) * 8
            if off + size > len(data):
                raise CheckpointError(f"{path}: truncated at parameter {n}")
            tensors[n] = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=off).reshape(shape).copy()
            off += size
        if off != len(data):
            raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
        ckpt = cls(
            params=ModelParams(tensors, header["max_len"]),
            vocab=vocab,
            item_ids=list(header["item_ids"]),
            stage=header["stage"],
            config=header["config"],
            parent=header.get("parent"),
        )
        if ckpt.checksum != header["checksum"]:
            raise CheckpointError(f"{path}: parameter checksum mismatch")
        return ckpt
