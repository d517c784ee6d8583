"""Whole-model checkpoints on top of the tensor container in :mod:`instabnn.data`."""
from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .arch import ArchSpec, ModelOptions
from .bitops import pack
from .data import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .nn.models import Model, build_model
from .quant import attach_quantizers
from .train import OptimState

__all__ = ["save_model", "load_model", "model_from_checkpoint"]


def save_model(path, model: Model, meta: dict | None = None, optim: OptimState | None = None,
               packed_weights: bool = False) -> None:
    """Parameters, running stats, optional optimizer state and metadata.

    With ``packed_weights`` the signs of binary-conv weights are stored too,
    bit-packed, as ``<conv>.weight.bits``.
    """
    tensors = dict(model.state_dict())
    if packed_weights:
        for name, conv in model.binary_convs():
            w = conv.weight.data
            tensors[f"{name}.weight.bits"] = pack(np.where(w >= 0, 1.0, -1.0))
    if optim is not None:
        for k, v in optim.to_tensors().items():
            tensors[f"optim.{k}"] = v
    full_meta = dict(meta or {})
    full_meta["arch"] = model.arch.to_dict()
    full_meta["options"] = asdict(model.options)
    full_meta["quantized"] = any(type(m).__name__ == "LsqQuantizer" for m in model.modules())
    full_meta["dtype"] = str(np.dtype(model.dtype))
    save_checkpoint(path, tensors, full_meta)


def model_from_checkpoint(ck: Checkpoint, strict: bool = True) -> Model:
    meta = ck.meta
    try:
        arch = ArchSpec.from_dict(meta["arch"])
        options = ModelOptions(**meta["options"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint metadata does not describe a model: {exc}") from None
    model = build_model(arch, options, seed=0, dtype=np.dtype(meta.get("dtype", "float32")))
    if meta.get("quantized"):
        attach_quantizers(model)
    state = {k: v for k, v in ck.model_state().items() if not k.endswith(".weight.bits")}
    try:
        model.load_state_dict(state, strict=strict)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its model description: {exc}") from None
    return model


def load_model(path) -> tuple[Model, Checkpoint]:
    ck = load_checkpoint(path)
    return model_from_checkpoint(ck), ck
