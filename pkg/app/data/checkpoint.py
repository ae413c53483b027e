"""
Checkpoint persistence.

A checkpoint is a safetensors file: the safetensors header already records
tensor names, shapes, dtypes and byte offsets (little-endian float64 for all
parameters). One metadata entry, ``manifest``, carries canonical JSON with the
format version, run digests, training position, the fitted preprocessing
metadata and a SHA-256 checksum over every tensor's bytes together with the
canonical JSON of the other manifest fields.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
from loguru import logger
from safetensors import SafetensorError, safe_open  # type: ignore
from safetensors.torch import load_file, save_file  # type: ignore

from app.core.errors import CheckpointError

FORMAT_VERSION = 1
RNG_KEY = "__rng_state__"


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Model tensors plus everything needed to rebuild and audit them."""

    tensors: Dict[str, torch.Tensor]
    config_digest: str
    data_digest: str = ""
    iteration: int = 0
    val_loss: Optional[float] = None
    feature_names: Tuple[str, ...] = ()
    metadata: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None

    def checksum(self) -> str:
        return manifest_checksum(self._all_tensors(), self.manifest())

    def manifest(self) -> Dict[str, Any]:
        """Manifest fields without the checksum."""
        return {
            "format_version": FORMAT_VERSION,
            "config_digest": self.config_digest,
            "data_digest": self.data_digest,
            "iteration": self.iteration,
            "val_loss": self.val_loss,
            "feature_names": list(self.feature_names),
            "metadata": self.metadata,
        }

    def _all_tensors(self) -> Dict[str, torch.Tensor]:
        tensors = {k: v.detach().contiguous() for k, v in self.tensors.items()}
        if self.rng_state is not None:
            tensors[RNG_KEY] = self.rng_state.detach().contiguous()
        return tensors


def tensor_checksum(tensors: Dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        tensor = tensors[name]
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def canonical_json(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def manifest_checksum(tensors: Dict[str, torch.Tensor], manifest: Dict[str, Any]) -> str:
    """SHA-256 over the tensor checksum and every manifest field except ``checksum``."""
    fields = {k: v for k, v in manifest.items() if k != "checksum"}
    digest = hashlib.sha256(tensor_checksum(tensors).encode("utf-8"))
    digest.update(canonical_json(fields).encode("utf-8"))
    return digest.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> str:
    """Write ``checkpoint`` and return the SHA-256 of the file bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.clone() for k, v in checkpoint._all_tensors().items()}  # pylint: disable=protected-access
    manifest = checkpoint.manifest()
    manifest["checksum"] = manifest_checksum(tensors, manifest)
    save_file(tensors, str(path), metadata={"manifest": canonical_json(manifest)})
    file_digest = hashlib.sha256(path.read_bytes()).hexdigest()
    logger.info(f"Saved checkpoint {path} (iteration {checkpoint.iteration}, sha256 {file_digest[:12]})")
    return file_digest


def _read_manifest(path: Path) -> Dict[str, Any]:
    with safe_open(str(path), framework="pt") as handle:
        metadata = handle.metadata() or {}
    if "manifest" not in metadata:
        raise CheckpointError(f"{path}: no manifest; not a checkpoint file")
    try:
        return json.loads(metadata["manifest"])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupted manifest ({e})") from e


def load_checkpoint(
    path: Union[str, Path], expected_config_digest: Optional[str] = None
) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises CheckpointError on a version mismatch, a checksum mismatch, or a
    config digest different from ``expected_config_digest`` when given.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        manifest = _read_manifest(path)
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}"
        )
    actual = manifest_checksum(tensors, manifest)
    if actual != manifest.get("checksum"):
        raise CheckpointError(
            f"{path}: checksum mismatch (manifest {manifest.get('checksum')}, content {actual})"
        )
    config_digest = manifest["config_digest"]
    if expected_config_digest is not None and expected_config_digest != config_digest:
        raise CheckpointError(
            f"{path}: config digest mismatch: checkpoint {config_digest}, "
            f"run config {expected_config_digest}"
        )

    rng_state = tensors.pop(RNG_KEY, None)
    logger.debug(f"Loaded checkpoint {path} with {len(tensors)} tensors")
    return Checkpoint(
        tensors=tensors,
        config_digest=config_digest,
        data_digest=manifest.get("data_digest", ""),
        iteration=int(manifest.get("iteration", 0)),
        val_loss=manifest.get("val_loss"),
        feature_names=tuple(manifest.get("feature_names", ())),
        metadata=manifest.get("metadata", {}),
        rng_state=rng_state,
    )
