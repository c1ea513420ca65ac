"""
Versioned model checkpoints: an .npz archive with a JSON header and one
array per parameter in declaration order
"""
import hashlib
import json
import logging
import os
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .admissibility import CamModel
from .exceptions import CheckpointError
from .models import Backbone, EnvKind

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = '__header__'


def weights_checksum(model: CamModel) -> str:
    digest = hashlib.sha256()
    for param in model.parameters():
        digest.update(param.name.encode('utf-8'))
        digest.update(np.ascontiguousarray(param.value, dtype=np.float64).tobytes())
    return digest.hexdigest()


def architecture_hash(architecture: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON of a model architecture record"""
    canonical = json.dumps(architecture, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass
class LoadedCheckpoint:
    """A model read back from disk with its header"""
    model: CamModel
    header: Dict[str, Any]

    @property
    def config_hash(self) -> Optional[str]:
        return self.header.get('config_hash')

    @property
    def model_hash(self) -> str:
        return self.header['model_hash']


def save_model(model: CamModel, path: Union[str, Path], config_hash: Optional[str] = None) -> Path:
    """
    Write a checkpoint atomically

    Args:
        model: Model to persist
        path: Target file (.npz)
        config_hash: Hash of the resolved run configuration

    Returns:
        Path of the written file
    """
    path = Path(path)
    params = model.parameters()
    header = {
        'format_version': FORMAT_VERSION,
        **model.architecture(),
        'names': [p.name for p in params],
        'shapes': [list(p.shape) for p in params],
        'config_hash': config_hash,
        'model_hash': architecture_hash(model.architecture()),
        'checksum': weights_checksum(model),
    }
    arrays = {p.name: p.value for p in params}
    arrays[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))

    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, 'wb') as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
    logger.info(f"saved checkpoint {path}")
    return path


def load_model(path: Union[str, Path]) -> LoadedCheckpoint:
    """
    Read a checkpoint, verifying version, layout and weight checksum

    Raises:
        CheckpointError: The file is missing, truncated, corrupted or from another format version
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive[HEADER_KEY]))
            arrays = {name: np.array(archive[name], dtype=np.float64) for name in header['names']}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        logger.error(f"Error reading checkpoint {path}: {e}")
        raise CheckpointError(f"could not read checkpoint {path}: {e}") from e

    version = header.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")

    try:
        model = CamModel.initialize(
            EnvKind(header['env']), Backbone(header['backbone']),
            hidden=int(header['hidden']), layers=max(int(header['layers']), 1),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} has an unusable header: {e}") from e

    params = model.parameters()
    if [p.name for p in params] != header['names']:
        raise CheckpointError(f"checkpoint {path} does not match the {header['backbone']} layout")
    for param, shape in zip(params, header['shapes']):
        values = arrays[param.name]
        if list(values.shape) != list(shape) or param.shape != values.shape:
            raise CheckpointError(f"parameter {param.name} has shape {values.shape}, expected {param.shape}")
        param.value = values
        param.zero_grad()

    if weights_checksum(model) != header['checksum']:
        raise CheckpointError(f"checkpoint {path} failed its weight checksum")
    logger.debug(f"loaded checkpoint {path} ({header['backbone']}, {header['env']})")
    return LoadedCheckpoint(model, header)
