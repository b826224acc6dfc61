"""Binary checkpoint container: magic, JSON header, then raw little-endian arrays.

Layout::

    b"MCMLAB\\x00\\x01" | uint64 header length | UTF-8 JSON header | array bytes

The header always carries ``version``, ``arch``, ``schedule``, ``seed`` and
``step``; the ``arrays`` entry indexes every payload block by name.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCMLAB\x00\x01"
FORMAT_VERSION = 1
REQUIRED_FIELDS = ("version", "arch", "schedule", "seed", "step")


class CheckpointError(IOError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header.setdefault("version", FORMAT_VERSION)
    missing = [k for k in REQUIRED_FIELDS if k not in header]
    if missing:
        raise CheckpointError(f"checkpoint header missing fields: {missing}")

    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header["arrays"] = index
    raw = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not an mcmlab checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    arrays = {}
    for entry in header.get("arrays", []):
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        chunk = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dt).reshape(entry["shape"]).copy()
    return header, arrays


# -- module and optimizer payloads -------------------------------------------

def module_arrays(module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    import torch

    state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + "/")}
    if not state:
        raise CheckpointError(f"checkpoint has no arrays under {prefix!r}")
    module.load_state_dict(state)


def optimizer_payload(opt, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Split an optimizer state dict into JSON metadata and tensor arrays."""
    import torch

    sd = opt.state_dict()
    arrays, state_meta = {}, {}
    for idx, entry in sd["state"].items():
        state_meta[str(idx)] = {}
        for key, val in entry.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}/{idx}/{key}"] = val.detach().cpu().numpy()
                state_meta[str(idx)][key] = "array"
            else:
                state_meta[str(idx)][key] = val
    return {"param_groups": sd["param_groups"], "state": state_meta}, arrays


def load_optimizer_payload(opt, meta: dict, arrays: dict[str, np.ndarray], prefix: str) -> None:
    import torch

    state = {}
    for idx, entry in meta["state"].items():
        state[int(idx)] = {key: torch.from_numpy(arrays[f"{prefix}/{idx}/{key}"]) if val == "array" else val
                           for key, val in entry.items()}
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


# -- model checkpoints ---------------------------------------------------------

def save_teacher(path, model, schedule, seed: int, step: int, extra: dict | None = None) -> None:
    header = {"kind": "teacher", "arch": model.arch, "schedule": schedule.to_config(), "seed": seed, "step": step}
    header.update(extra or {})
    write_container(path, header, module_arrays(model, "model"))


def _schedule_and_arch(header: dict):
    from .schedule import NoiseSchedule

    return NoiseSchedule.from_config(header["schedule"]), dict(header["arch"])


def _build_denoiser(arch: dict, schedule):
    from .diffusion import Denoiser

    arch = dict(arch)
    arch.pop("num_train_steps", None)
    param = arch.pop("parametrization", "eps")
    return Denoiser(**arch, num_train_steps=schedule.T, schedule=schedule, parametrization=param)


def load_teacher(path):
    """Returns ``(model, schedule, header)``."""
    header, arrays = read_container(path)
    if header.get("kind") not in ("teacher", "teacher_state"):
        raise CheckpointError(f"{path}: expected a teacher checkpoint, found {header.get('kind')!r}")
    schedule, arch = _schedule_and_arch(header)
    model = _build_denoiser(arch, schedule)
    load_module_arrays(model, arrays, "model")
    model.eval()
    return model, schedule, header


def save_teacher_state(path, state, schedule, config) -> None:
    """Everything needed to resume teacher training exactly where it stopped."""
    meta, opt_arrays = optimizer_payload(state.optimizer, "opt")
    arrays = module_arrays(state.model, "model")
    arrays.update(opt_arrays)
    arrays["generator"] = state.generator.get_state().numpy()
    header = {"kind": "teacher_state", "arch": state.model.arch, "schedule": schedule.to_config(),
              "seed": config.seed, "step": state.step, "optimizer": meta, "log": state.log,
              "teacher_config": config.to_dict()}
    write_container(path, header, arrays)


def load_teacher_state(path, dataset, config, schedule):
    import torch

    from .diffusion import init_teacher_state

    header, arrays = read_container(path)
    if header.get("kind") != "teacher_state":
        raise CheckpointError(f"{path}: not a resumable teacher state")
    state = init_teacher_state(dataset, config, schedule)
    load_module_arrays(state.model, arrays, "model")
    load_optimizer_payload(state.optimizer, header["optimizer"], arrays, "opt")
    state.generator.set_state(torch.from_numpy(arrays["generator"]))
    state.step = int(header["step"])
    state.log = list(header["log"])
    return state


def save_student(path, student, seed: int, step: int, motion_kind: str, extra: dict | None = None) -> None:
    """Online and target backbones plus the motion head (with its EMA twin) if present."""
    net = getattr(student.backbone, "net", student.backbone)
    arrays = module_arrays(student.backbone, "online")
    arrays.update(module_arrays(student.target_backbone, "target"))
    if student.head is not None:
        arrays.update(module_arrays(student.head, "head"))
    header = {"kind": "student", "arch": net.arch, "schedule": student.schedule.to_config(), "seed": seed,
              "step": step, "motion_kind": motion_kind, "sigma_data": student.weights.sigma_data,
              "ema_rate": student.ema_rate, "preconditioned": net is not student.backbone,
              "head": None if student.head is None else
              {"in_dim": student.head.in_dim, "hidden": student.head.hidden, "out_dim": student.head.out_dim}}
    header.update(extra or {})
    write_container(path, header, arrays)


def load_student(path):
    """Returns ``(student, header)``."""
    from .consistency import make_student
    from .motion import MotionHead

    header, arrays = read_container(path)
    if header.get("kind") != "student":
        raise CheckpointError(f"{path}: expected a student checkpoint, found {header.get('kind')!r}")
    schedule, arch = _schedule_and_arch(header)
    net = _build_denoiser(arch, schedule)
    head = None
    if header.get("head"):
        h = header["head"]
        head = MotionHead(h["in_dim"], h["hidden"], h["out_dim"], ema_rate=header["ema_rate"])
    student = make_student(net, schedule, header["sigma_data"], header["ema_rate"], head,
                           warm_start=header["preconditioned"])
    load_module_arrays(student.backbone, arrays, "online")
    load_module_arrays(student.target_backbone, arrays, "target")
    if head is not None:
        load_module_arrays(head, arrays, "head")
    return student, header


def save_discriminator(path, D, schedule, seed: int, step: int) -> None:
    header = {"kind": "discriminator", "arch": D.config, "schedule": schedule.to_config(), "seed": seed,
              "step": step, "encoder_digest": D.encoder.digest()}
    write_container(path, header, module_arrays(D, "disc"))


def load_discriminator(path):
    from .adversarial import Discriminator

    header, arrays = read_container(path)
    if header.get("kind") != "discriminator":
        raise CheckpointError(f"{path}: expected a discriminator checkpoint")
    D = Discriminator(**header["arch"])
    if D.encoder.digest() != header["encoder_digest"]:
        raise CheckpointError(f"{path}: frozen encoder digest mismatch")
    load_module_arrays(D, arrays, "disc")
    return D, header
