"""Checkpoint format: a directory holding a plain-text manifest, the resolved
config, and one raw little-endian binary blob per tensor, each content-hashed.

Stored state covers the full model state dict (parameters and buffers, so a
load reproduces outputs bit-wise), SGD momentum buffers, the step counter,
and the pseudo-label threshold.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, load_config, save_config

FORMAT_VERSION = 1
_MAGIC = "alignseg-checkpoint"

_TO_NP = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_FROM_NP = {v: k for k, v in _TO_NP.items()}


class CheckpointError(RuntimeError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _tensor_bytes(t: torch.Tensor) -> tuple[bytes, str]:
    if t.dtype not in _TO_NP:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    code = _TO_NP[t.dtype]
    arr = np.ascontiguousarray(t.detach().cpu().numpy()).astype(code, copy=False)
    return arr.tobytes(), code


def _shape_str(shape: torch.Size) -> str:
    return ",".join(str(d) for d in shape) if len(shape) else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split(","))


@dataclass
class CheckpointBundle:
    cfg: TrainConfig
    model_state: dict[str, torch.Tensor]
    momentum: dict[int, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    tau: float = 0.0


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    tau: float = 0.0,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config_path = path / "config.yaml"
    save_config(cfg, config_path)
    lines = [
        f"{_MAGIC} v{FORMAT_VERSION}",
        f"step {step}",
        f"tau {tau!r}",
        f"config config.yaml sha256 {_sha256(config_path.read_bytes())}",
    ]
    entries: list[tuple[str, torch.Tensor]] = [
        (f"model:{name}", tensor) for name, tensor in model.state_dict().items()
    ]
    if optimizer is not None:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        for idx, p in enumerate(params):
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                entries.append((f"optim:momentum:{idx}", buf))
    for idx, (name, tensor) in enumerate(entries):
        data, code = _tensor_bytes(tensor)
        filename = f"t{idx:04d}.bin"
        (path / filename).write_bytes(data)
        lines.append(
            f"tensor {name} {code} {_shape_str(tensor.shape)} {filename} sha256 {_sha256(data)}"
        )
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.is_file():
        raise CheckpointError(f"no manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or not lines[0].startswith(_MAGIC):
        raise CheckpointError(f"{manifest} is not a recognized checkpoint manifest")
    version = lines[0].removeprefix(_MAGIC).strip()
    if version != f"v{FORMAT_VERSION}":
        raise CheckpointError(
            f"checkpoint format {version} does not match supported v{FORMAT_VERSION}"
        )
    step, tau, cfg = 0, 0.0, None
    model_state: dict[str, torch.Tensor] = {}
    momentum: dict[int, torch.Tensor] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "step":
            step = int(rest)
        elif kind == "tau":
            tau = float(rest)
        elif kind == "config":
            filename, _, digest = rest.split(" ")
            blob = (path / filename).read_bytes()
            if _sha256(blob) != digest:
                raise CheckpointError(f"config hash mismatch in {path / filename}")
            cfg = load_config(path / filename)
        elif kind == "tensor":
            name, code, shape_s, filename, _, digest = rest.split(" ")
            blob = (path / filename).read_bytes()
            if _sha256(blob) != digest:
                raise CheckpointError(f"tensor hash mismatch in {path / filename}")
            if code not in _FROM_NP:
                raise CheckpointError(f"unsupported dtype code {code} for {name}")
            arr = np.frombuffer(blob, dtype=code).reshape(_parse_shape(shape_s)).copy()
            tensor = torch.from_numpy(arr).to(_FROM_NP[code])
            if name.startswith("model:"):
                model_state[name.removeprefix("model:")] = tensor
            elif name.startswith("optim:momentum:"):
                momentum[int(name.rsplit(":", 1)[1])] = tensor
            else:
                raise CheckpointError(f"unknown tensor namespace in '{name}'")
        else:
            raise CheckpointError(f"unknown manifest line kind '{kind}'")
    if cfg is None:
        raise CheckpointError("manifest carries no config entry")
    return CheckpointBundle(cfg=cfg, model_state=model_state, momentum=momentum, step=step, tau=tau)


def apply_model_state(model: torch.nn.Module, bundle: CheckpointBundle) -> None:
    missing, unexpected = model.load_state_dict(bundle.model_state, strict=True), None
    del missing, unexpected


def apply_optimizer_state(optimizer: torch.optim.Optimizer, bundle: CheckpointBundle) -> None:
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for idx, buf in bundle.momentum.items():
        if idx >= len(params):
            raise CheckpointError(f"momentum entry {idx} beyond {len(params)} parameters")
        optimizer.state[params[idx]]["momentum_buffer"] = buf.clone()


def restore_model(path: str | Path) -> tuple[torch.nn.Module, CheckpointBundle]:
    """Rebuild the model from the embedded config and load its weights."""
    from .model import build_model

    bundle = load_checkpoint(path)
    model = build_model(bundle.cfg, seed=bundle.cfg.seed)
    apply_model_state(model, bundle)
    return model, bundle
