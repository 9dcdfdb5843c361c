"""
Checkpoint container and run manifest.

A checkpoint is a directory holding ``manifest.json`` (format version,
configuration, task bookkeeping, per-stage task-agnostic results, generator
state and a table of tensors) and one ``.bin`` file per tensor: little-endian
float64 values in row-major order without a header. Shapes and CRC-32
checksums live in the manifest.

Both the checkpoint directory and the run manifest are written to a
temporary location first and moved into place.
"""

from collections.abc import Mapping
import json
import logging
import os
from pathlib import Path
import re
import shutil
import tempfile
from typing import Any
from typing import Final
import zlib

import numpy as np

from . import __version__
from .autodiff import FloatArray
from .autodiff import ParameterSet
from .autodiff import Tensor
from .config import TrainConfig
from .exceptions import CheckpointCorruptionError
from .exceptions import CheckpointVersionError
from .inference import ClassPrototype
from .metrics import AccuracyMatrix
from .networks import TaskEmbedding
from .trainer import TrainedState
from .trainer import build_specs


logger = logging.getLogger(__name__)

FORMAT_VERSION: Final[int] = 1
MANIFEST_NAME: Final[str] = "manifest.json"
_DTYPE: Final[str] = "<f8"


def _file_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def _state_tensors(state: TrainedState) -> dict[str, FloatArray]:
    tensors: dict[str, FloatArray] = {}
    tensors.update({f"phi/{n}": a for n, a in state.phi.arrays().items()})
    tensors.update({f"theta/{n}": a for n, a in state.theta.arrays().items()})
    for emb in state.embeddings:
        tensors[f"embedding/{emb.task}"] = emb.vector.data
    for t, mask in sorted(state.stored_masks.items()):
        tensors[f"stored_mask/{t}"] = mask
    for c, proto in state.prototypes.items():
        tensors[f"prototype/{c}/mean"] = proto.mean
        tensors[f"prototype/{c}/precision"] = proto.precision
    return tensors


def _atomic_dir(path: Path, fill: Any, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise FileExistsError(f"Output path '{path}' already exists.")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        fill(tmp)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def write_checkpoint(state: TrainedState, path: Path, *, overwrite: bool = False) -> Path:
    """
    Write ``state`` to the checkpoint directory ``path``.

    Parameters
    ----------
    state : TrainedState
        Run state to persist.
    path : Path
        Target directory.
    overwrite : bool, default False
        Replace an existing directory.

    Returns
    -------
    Path
        ``path``.

    Raises
    ------
    FileExistsError
        If ``path`` exists and ``overwrite`` is false.
    """
    path = Path(path)
    tensors = _state_tensors(state)
    entries: list[dict[str, Any]] = []

    def fill(tmp: Path) -> None:
        for name, array in tensors.items():
            payload = np.ascontiguousarray(array, dtype=_DTYPE).tobytes(order="C")
            file = _file_name(name)
            (tmp / file).write_bytes(payload)
            entries.append(
                {
                    "name": name,
                    "file": file,
                    "shape": list(np.shape(array)),
                    "crc32": zlib.crc32(payload),
                }
            )
        manifest = {
            "format_version": FORMAT_VERSION,
            "masklet_version": __version__,
            "config": state.config.to_dict(),
            "input_dim": state.target_spec.input_dim,
            "trained_tasks": state.trained_tasks,
            "frozen": [e.frozen for e in state.embeddings],
            "accuracy": state.accuracy.to_list(),
            "task_seconds": list(state.task_seconds),
            "rng_state": state.rng.bit_generator.state,
            "prototype_counts": {str(c): p.count for c, p in state.prototypes.items()},
            "stage_results": {
                mode: {str(j): list(result) for j, result in stages.items()}
                for mode, stages in state.stage_results.items()
            },
            "tensors": entries,
        }
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    _atomic_dir(path, fill, overwrite)
    logger.info("Checkpoint with %d tensors written to %s", len(tensors), path)
    return path


def _read_manifest(path: Path) -> dict[str, Any]:
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"No checkpoint manifest in '{path}'")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointCorruptionError(MANIFEST_NAME, str(path)) from e
    found = manifest.get("format_version")
    if found != FORMAT_VERSION:
        raise CheckpointVersionError(
            int(found) if isinstance(found, int) else -1, FORMAT_VERSION, str(path)
        )
    return manifest


def _read_tensor(path: Path, entry: Mapping[str, Any]) -> FloatArray:
    name = entry["name"]
    try:
        payload = (path / entry["file"]).read_bytes()
    except OSError as e:
        raise CheckpointCorruptionError(name, str(path)) from e
    shape = tuple(int(d) for d in entry["shape"])
    if len(payload) != int(np.prod(shape)) * 8 or zlib.crc32(payload) != entry["crc32"]:
        raise CheckpointCorruptionError(name, str(path))
    return np.frombuffer(payload, dtype=_DTYPE).astype(np.float64).reshape(shape)


def read_checkpoint(path: Path) -> TrainedState:
    """
    Restore a :class:`TrainedState` written by :func:`write_checkpoint`.

    Raises
    ------
    FileNotFoundError
        If ``path`` holds no manifest.
    CheckpointVersionError
        If the format version differs from :data:`FORMAT_VERSION`.
    CheckpointCorruptionError
        If the manifest is unreadable or a tensor fails its size or CRC check.
    """
    path = Path(path)
    manifest = _read_manifest(path)
    cfg = TrainConfig.from_mapping(manifest["config"]).validate()
    tensors = {e["name"]: _read_tensor(path, e) for e in manifest["tensors"]}

    target_spec, hnet_spec = build_specs(cfg, int(manifest["input_dim"]))
    phi = ParameterSet.from_arrays(
        {n: tensors[f"phi/{n}"] for n, _ in hnet_spec.layout()}, requires_grad=True
    )
    theta = ParameterSet.from_arrays(
        {n: tensors[f"theta/{n}"] for n, _ in target_spec.layout()},
        requires_grad=cfg.target_trainable,
    )
    embeddings = [
        TaskEmbedding(
            t,
            Tensor(tensors[f"embedding/{t}"], requires_grad=not frozen),
            frozen,
        )
        for t, frozen in enumerate(manifest["frozen"])
    ]

    state_dict = manifest["rng_state"]
    rng = np.random.Generator(getattr(np.random, state_dict["bit_generator"])())
    rng.bit_generator.state = state_dict

    stored = {
        int(n.split("/", 1)[1]): a for n, a in tensors.items() if n.startswith("stored_mask/")
    }
    prototypes = {
        int(c): ClassPrototype(
            int(c),
            tensors[f"prototype/{c}/mean"],
            tensors[f"prototype/{c}/precision"],
            int(count),
        )
        for c, count in manifest.get("prototype_counts", {}).items()
    }
    stage_results = {
        mode: {int(j): (float(acc), float(sel)) for j, (acc, sel) in stages.items()}
        for mode, stages in manifest.get("stage_results", {}).items()
    }
    logger.info("Checkpoint read from %s (%d trained tasks)", path, manifest["trained_tasks"])
    return TrainedState(
        config=cfg,
        target_spec=target_spec,
        hnet_spec=hnet_spec,
        phi=phi,
        theta=theta,
        embeddings=embeddings,
        rng=rng,
        accuracy=AccuracyMatrix.from_list(manifest["accuracy"]),
        stored_masks=dict(sorted(stored.items())),
        trained_tasks=int(manifest["trained_tasks"]),
        task_seconds=[float(s) for s in manifest.get("task_seconds", [])],
        prototypes=dict(sorted(prototypes.items())),
        stage_results=stage_results,
    )


def write_run_manifest(run_dir: Path, manifest: Mapping[str, Any]) -> Path:
    """
    Atomically write ``run_manifest.json`` into ``run_dir``.

    The manifest must be JSON-serializable.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target = run_dir / "run_manifest.json"
    fd, tmp_name = tempfile.mkstemp(prefix=".run_manifest.", dir=run_dir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target
