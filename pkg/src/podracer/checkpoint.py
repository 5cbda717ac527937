"""Binary checkpoint format for agent artifacts.

Layout (all integers little-endian)::

    b"PODRCKPT"                     8-byte magic
    u32 version                     currently 1
    repeated tensor records:
        u32 name_length, name (UTF-8)
        u32 rank, u64 dims[rank]
        f64 payload[prod(dims)]
    u32 crc32                       zlib CRC-32 of every preceding byte

Non-tensor metadata (ids, lineage, score) is a JSON document stored as the
rank-1 tensor ``meta.json`` holding one byte value per element.
"""
from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .agent import AgentArtifact, Lineage
from .ppo import TransitionBuffer
from .tensor_core import AdamState, GaussianPolicy, MlpParams

MAGIC = b"PODRCKPT"
VERSION = 1
SUPPORTED_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptionError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_tensors(blob: bytes) -> dict:
    if len(blob) < len(MAGIC) + 8:
        raise CorruptionError(f"file too short ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("CRC-32 mismatch")
    if body[:8] != MAGIC:
        raise CorruptionError("bad magic")
    (version,) = struct.unpack_from("<I", body, 8)
    if version > SUPPORTED_VERSION or version < 1:
        raise VersionError(f"checkpoint version {version} not supported (max {SUPPORTED_VERSION})")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if pos + nlen > len(body):
                raise CorruptionError("tensor name runs past end of file")
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if rank > 8:
                raise CorruptionError(f"tensor {name!r} has implausible rank {rank}")
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
            end = pos + 8 * count
            if end > len(body):
                raise CorruptionError(f"tensor {name!r} payload runs past end of file")
            if name in tensors:
                raise CorruptionError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(body[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
            pos = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptionError(f"malformed tensor table: {exc}") from None
    return tensors


def artifact_tensors(artifact: AgentArtifact, extra_meta: dict | None = None) -> dict:
    t: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(artifact.actor.mean_net.weights, artifact.actor.mean_net.biases)):
        t[f"actor.W{i}"], t[f"actor.b{i}"] = w, b
    t["actor.log_std"] = artifact.actor.log_std
    for i, (w, b) in enumerate(zip(artifact.critic.weights, artifact.critic.biases)):
        t[f"critic.W{i}"], t[f"critic.b{i}"] = w, b
    opt = artifact.optimizer
    t["optim.m"], t["optim.v"] = opt.m, opt.v
    for key in ("t", "lr", "beta1", "beta2", "eps"):
        t[f"optim.{key}"] = np.array(float(getattr(opt, key)))
    buf = artifact.buffer_snapshot
    if buf is not None:
        for name in TransitionBuffer.FIELDS:
            t[f"buffer.{name}"] = getattr(buf, name)
        t["buffer.filled"] = buf._filled
    meta = {
        "agent_id": artifact.agent_id,
        "algo_tag": artifact.algo_tag,
        "parent_id": artifact.lineage.parent_id,
        "mutation_seed": artifact.lineage.mutation_seed,
        "score": artifact.score,
        "env_steps": artifact.env_steps,
        "activation": artifact.actor.mean_net.activation,
        "extra": extra_meta or {},
    }
    t["meta.json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    return t


def _mlp(tensors, prefix: str) -> MlpParams:
    weights, biases = [], []
    i = 0
    while f"{prefix}.W{i}" in tensors:
        weights.append(tensors[f"{prefix}.W{i}"])
        biases.append(tensors[f"{prefix}.b{i}"])
        i += 1
    return MlpParams(tuple(weights), tuple(biases))


def artifact_from_tensors(tensors: dict):
    try:
        meta = json.loads(bytes(tensors["meta.json"].astype(np.uint8)).decode("utf-8"))
        actor = GaussianPolicy(_mlp(tensors, "actor"), tensors["actor.log_std"])
        critic = _mlp(tensors, "critic")
        opt = AdamState(
            tensors["optim.m"], tensors["optim.v"], int(tensors["optim.t"]),
            float(tensors["optim.lr"]), float(tensors["optim.beta1"]),
            float(tensors["optim.beta2"]), float(tensors["optim.eps"]),
        )
        buf = None
        if "buffer.states" in tensors:
            states, actions = tensors["buffer.states"], tensors["buffer.actions"]
            buf = TransitionBuffer(states.shape[0], states.shape[1], actions.shape[1])
            for name in TransitionBuffer.FIELDS:
                getattr(buf, name)[:] = tensors[f"buffer.{name}"]
            buf._filled[:] = tensors["buffer.filled"].astype(bool)
        artifact = AgentArtifact(
            actor, critic, opt, buf,
            Lineage(meta["parent_id"], meta["mutation_seed"]),
            meta["algo_tag"], meta["agent_id"], meta["score"], int(meta["env_steps"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptionError(f"checkpoint content is inconsistent: {exc}") from None
    return artifact, meta.get("extra", {})


def save_checkpoint(artifact: AgentArtifact, path, extra_meta: dict | None = None) -> None:
    blob = encode_tensors(artifact_tensors(artifact, extra_meta))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint_with_meta(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return artifact_from_tensors(decode_tensors(blob))


def load_checkpoint(path) -> AgentArtifact:
    return load_checkpoint_with_meta(path)[0]
