"""
Checkpoint container for flow models and OC-SVM baselines.

Layout (see docs/CHECKPOINT_FORMAT.md):

    MAGIC (8 bytes) | header length (uint64 LE) | header JSON (UTF-8) | payload | SHA-256 (32 bytes)

The header lists every tensor (name, shape, byte offset); the payload is the tensors'
float64 little-endian bytes, row-major, back to back. The trailing digest covers every
byte before it, so any corruption is detected before a model is built.
"""

import hashlib
import json
import os
import struct
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from feasiflow.app.base_dist import BaseKind, GaussianBase, ResamplingBase
from feasiflow.app.coupling_flow import CouplingLayer, FlowModel
from feasiflow.app.errors import CheckpointError, UsageError
from feasiflow.app.nn_core import DenseLayer, DenseNet
from feasiflow.app.ocsvm import OcSvmModel

MAGIC = b"FFLOWCK\n"
FORMAT_VERSION = 1
DIGEST_BYTES = 32
_LENGTH = struct.Struct("<Q")
_F8 = np.dtype("<f8")


class CheckpointKind(str, Enum):
    FLOW = "flow"
    OCSVM = "ocsvm"


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(ge=0)
    nbytes: int = Field(ge=0)


class CheckpointHeader(BaseModel):
    format_version: int
    kind: CheckpointKind
    meta: Dict[str, Any]
    tensors: List[TensorEntry]
    payload_bytes: int = Field(ge=0)


# ============================================================================
# CONTAINER
# ============================================================================

def write_container(
    path: Union[str, Path], kind: CheckpointKind, meta: Dict[str, Any], tensors: Dict[str, np.ndarray]
) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=_F8).tobytes()
        entries.append(TensorEntry(name=name, shape=list(np.shape(array)), offset=offset, nbytes=len(data)))
        chunks.append(data)
        offset += len(data)

    header = CheckpointHeader(
        format_version=FORMAT_VERSION, kind=kind, meta=meta, tensors=entries, payload_bytes=offset
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)
    digest = hashlib.sha256(body).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    os.replace(tmp, path)
    return path


def read_container(path: Union[str, Path]) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    data = path.read_bytes()

    prefix = len(MAGIC) + _LENGTH.size
    if len(data) < prefix + DIGEST_BYTES:
        raise CheckpointError("checkpoint is truncated", path=str(path))
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a feasiflow checkpoint (bad magic)", path=str(path))
    (header_len,) = _LENGTH.unpack(data[len(MAGIC):prefix])
    if len(data) < prefix + header_len + DIGEST_BYTES:
        raise CheckpointError("checkpoint is truncated", path=str(path))

    body, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch", path=str(path))

    try:
        header = CheckpointHeader.model_validate_json(body[prefix:prefix + header_len])
    except ValidationError as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc.errors()[0]['msg']}", path=str(path)) from exc
    if header.format_version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {header.format_version} (expected {FORMAT_VERSION})",
            path=str(path),
        )

    payload = body[prefix + header_len:]
    if len(payload) != header.payload_bytes:
        raise CheckpointError("checkpoint payload size does not match its header", path=str(path))

    tensors = {}
    for entry in header.tensors:
        expected = int(np.prod(entry.shape, dtype=np.int64)) * _F8.itemsize
        if entry.nbytes != expected or entry.offset + entry.nbytes > len(payload):
            raise CheckpointError(f"tensor {entry.name} is out of bounds", path=str(path))
        raw = np.frombuffer(payload, dtype=_F8, count=expected // _F8.itemsize, offset=entry.offset)
        tensors[entry.name] = raw.reshape(entry.shape).astype(np.float64)
    return header, tensors


def checkpoint_id(path: Union[str, Path]) -> str:
    """Short identifier: the first 16 hex digits of the checkpoint's trailing digest."""
    data = Path(path).read_bytes()
    return data[-DIGEST_BYTES:].hex()[:16]


# ============================================================================
# FLOW MODELS
# ============================================================================

def _net_tensors(prefix: str, net: DenseNet, tensors: Dict[str, np.ndarray]) -> List[str]:
    for j, layer in enumerate(net.layers):
        tensors[f"{prefix}.W{j}"] = layer.weight
        tensors[f"{prefix}.b{j}"] = layer.bias
    return [layer.activation.value for layer in net.layers]


def _net_from_tensors(prefix: str, activations: List[str], tensors: Dict[str, np.ndarray]) -> DenseNet:
    try:
        return DenseNet([
            DenseLayer(tensors[f"{prefix}.W{j}"], tensors[f"{prefix}.b{j}"], activation)
            for j, activation in enumerate(activations)
        ])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc.args[0]}") from exc


def save_checkpoint(model: FlowModel, path: Union[str, Path]) -> Path:
    tensors: Dict[str, np.ndarray] = {}
    layers_meta = []
    for k, layer in enumerate(model.layers):
        layers_meta.append({
            "mask": [int(v) for v in layer.mask],
            "scale_clamp": float(layer.scale_clamp),
            "s_activations": _net_tensors(f"layer{k}.s", layer.s_net, tensors),
            "t_activations": _net_tensors(f"layer{k}.t", layer.t_net, tensors),
        })

    base_meta: Dict[str, Any] = {"kind": model.base.kind.value}
    if isinstance(model.base, ResamplingBase):
        base_meta["truncation"] = int(model.base.truncation)
        base_meta["ema_decay"] = float(model.base.ema_decay)
        base_meta["accept_activations"] = _net_tensors("base.accept", model.base.accept_net, tensors)
        tensors["base.z_ema"] = np.array([model.base.z_ema])

    meta = {"dim": model.dim, "num_layers": len(model.layers), "layers": layers_meta, "base": base_meta}
    return write_container(path, CheckpointKind.FLOW, meta, tensors)


def load_checkpoint(path: Union[str, Path]) -> FlowModel:
    header, tensors = read_container(path)
    if header.kind is not CheckpointKind.FLOW:
        raise CheckpointError(f"checkpoint holds a {header.kind.value} model, not a flow", path=str(path))
    meta = header.meta
    try:
        dim = int(meta["dim"])
        layers = [
            CouplingLayer(
                mask=np.array(item["mask"], dtype=bool),
                s_net=_net_from_tensors(f"layer{k}.s", item["s_activations"], tensors),
                t_net=_net_from_tensors(f"layer{k}.t", item["t_activations"], tensors),
                scale_clamp=float(item["scale_clamp"]),
            )
            for k, item in enumerate(meta["layers"])
        ]
        if len(layers) != int(meta["num_layers"]):
            raise CheckpointError("layer count in checkpoint header is inconsistent", path=str(path))

        base_meta = meta["base"]
        if BaseKind(base_meta["kind"]) is BaseKind.RESAMPLING:
            base = ResamplingBase(
                dim=dim,
                accept_net=_net_from_tensors("base.accept", base_meta["accept_activations"], tensors),
                truncation=int(base_meta["truncation"]),
                z_ema=float(tensors["base.z_ema"][0]),
                ema_decay=float(base_meta["ema_decay"]),
            )
        else:
            base = GaussianBase(dim)
        return FlowModel(dim=dim, layers=layers, base=base)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed flow checkpoint: {exc}", path=str(path)) from exc


# ============================================================================
# OC-SVM
# ============================================================================

def save_ocsvm(model: OcSvmModel, path: Union[str, Path]) -> Path:
    meta = {
        "dim": int(model.support_vectors.shape[1]),
        "n_train": int(model.n_train),
        "iterations": int(model.iterations),
        "kkt_gap": float(model.kkt_gap),
    }
    tensors = {
        "support_vectors": model.support_vectors,
        "alphas": model.alphas,
        "rho": np.array([model.rho]),
        "gamma": np.array([model.gamma]),
        "nu": np.array([model.nu]),
    }
    return write_container(path, CheckpointKind.OCSVM, meta, tensors)


def load_ocsvm(path: Union[str, Path]) -> OcSvmModel:
    header, tensors = read_container(path)
    if header.kind is not CheckpointKind.OCSVM:
        raise CheckpointError(f"checkpoint holds a {header.kind.value} model, not an OC-SVM", path=str(path))
    try:
        return OcSvmModel(
            support_vectors=tensors["support_vectors"],
            alphas=tensors["alphas"],
            rho=float(tensors["rho"][0]),
            gamma=float(tensors["gamma"][0]),
            nu=float(tensors["nu"][0]),
            n_train=int(header.meta["n_train"]),
            iterations=int(header.meta["iterations"]),
            kkt_gap=float(header.meta.get("kkt_gap", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed OC-SVM checkpoint: {exc}", path=str(path)) from exc


def checkpoint_size(path: Union[str, Path]) -> int:
    return Path(path).stat().st_size
