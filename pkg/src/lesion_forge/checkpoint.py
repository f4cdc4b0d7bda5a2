"""Versioned checkpoint container with byte-stable serialization.

Weights and optimizer state are stored as numpy arrays inside a pickled
payload, so identical training runs produce identical checkpoint bytes
(torch's zip-based serializer does not guarantee that).
"""

from __future__ import annotations

import hashlib
import pickle
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

FORMAT_VERSION = 1


def _to_numpy_tree(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": True, "data": obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        converted = [_to_numpy_tree(v) for v in obj]
        return converted if isinstance(obj, list) else tuple(converted)
    return obj


def _to_tensor_tree(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__") is True:
            return torch.from_numpy(np.array(obj["data"]))
        return {k: _to_tensor_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        converted = [_to_tensor_tree(v) for v in obj]
        return converted if isinstance(obj, list) else tuple(converted)
    return obj


def _write(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def _read(path: Path) -> dict:
    with open(Path(path), "rb") as fh:
        payload = pickle.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format_version {version}")
    return payload


def checkpoint_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# GAN checkpoints


def save_gan_checkpoint(path, generator, discriminator, g_opt, d_opt, growth, config,
                        task: str = "mass") -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "gan",
        "task": task,
        "network_spec": generator.spec.to_dict(),
        "growth_state": growth.to_dict(),
        "config": config.to_dict(),
        "generator_built": sorted(int(k) for k in generator.in_adapters.keys()),
        "discriminator_built": sorted(int(k) for k in discriminator.in_adapters.keys()),
        "generator_state": _to_numpy_tree(generator.state_dict()),
        "discriminator_state": _to_numpy_tree(discriminator.state_dict()),
        "g_optimizer": _to_numpy_tree(g_opt.state_dict()) if g_opt is not None else None,
        "d_optimizer": _to_numpy_tree(d_opt.state_dict()) if d_opt is not None else None,
    }
    _write(path, payload)


def _rebuild_staged(cls, spec, built: list[int], **kwargs):
    net = cls(spec, top_resolution=built[0], **kwargs)
    for resolution in built[1:]:
        net.grow(resolution)
    return net


def load_gan_checkpoint(path, load_optimizers: bool = False) -> dict:
    from .networks import Discriminator, Generator, NetworkSpec
    from .training import GanTrainConfig, GrowthState

    payload = _read(path)
    if payload["kind"] != "gan":
        raise ValidationError(f"expected a gan checkpoint, got '{payload['kind']}'")
    spec = NetworkSpec.from_dict(payload["network_spec"])
    config = GanTrainConfig.from_dict(payload["config"])
    generator = _rebuild_staged(Generator, spec, payload["generator_built"])
    discriminator = _rebuild_staged(Discriminator, spec, payload["discriminator_built"])
    generator.load_state_dict(_to_tensor_tree(payload["generator_state"]), strict=True)
    discriminator.load_state_dict(_to_tensor_tree(payload["discriminator_state"]), strict=True)
    out = {
        "generator": generator,
        "discriminator": discriminator,
        "growth_state": GrowthState.from_dict(payload["growth_state"]),
        "config": config,
        "task": payload["task"],
        "spec": spec,
    }
    if load_optimizers:
        betas = (config.adam_beta1, config.adam_beta2)
        g_opt = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas,
                                 eps=config.adam_epsilon)
        d_opt = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=betas,
                                 eps=config.adam_epsilon)
        if payload["g_optimizer"] is not None:
            g_opt.load_state_dict(_to_tensor_tree(payload["g_optimizer"]))
        if payload["d_optimizer"] is not None:
            d_opt.load_state_dict(_to_tensor_tree(payload["d_optimizer"]))
        out["g_optimizer"] = g_opt
        out["d_optimizer"] = d_opt
    return out


def load_generator(path):
    return load_gan_checkpoint(path)["generator"]


# ---------------------------------------------------------------------------
# classifier checkpoints


def save_classifier_checkpoint(path, model, config, samples_seen: int,
                               optimizer=None, extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "classifier",
        "config": config.to_dict(),
        "samples_seen": samples_seen,
        "model_state": _to_numpy_tree(model.state_dict()),
        "optimizer": _to_numpy_tree(optimizer.state_dict()) if optimizer is not None else None,
        "extra": extra or {},
    }
    _write(path, payload)


def load_classifier_checkpoint(path) -> dict:
    from .classifier import ClassifierConfig, build_backbone

    payload = _read(path)
    if payload["kind"] != "classifier":
        raise ValidationError(f"expected a classifier checkpoint, got '{payload['kind']}'")
    config = ClassifierConfig.from_dict(payload["config"])
    model = build_backbone(config)
    model.load_state_dict(_to_tensor_tree(payload["model_state"]), strict=True)
    return {
        "model": model,
        "config": config,
        "samples_seen": payload["samples_seen"],
        "extra": payload.get("extra", {}),
    }


# ---------------------------------------------------------------------------
# optimizer state serialization helpers (used by tests and resume paths)


def optimizer_state_to_arrays(optimizer: torch.optim.Optimizer) -> dict:
    return _to_numpy_tree(optimizer.state_dict())


def load_optimizer_state(optimizer: torch.optim.Optimizer, arrays: dict) -> None:
    optimizer.load_state_dict(_to_tensor_tree(arrays))
