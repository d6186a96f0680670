"""
Persistence service
Instance directories: meta.json plus little-endian float64 binaries (or CSV)
"""
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from lowramp.models import ChannelSpec, InstanceKind, PriorSpec, ProblemInstance
from lowramp.services.channels import ChannelService
from lowramp.services.instance_service import symmetric_scores
from lowramp.validation import ConfigError, ShapeMismatch

logger = logging.getLogger(__name__)

META_FILE = 'meta.json'
DTYPE = '<f8'
FORMATS = ('bin', 'csv')


def array_digest(values):
    """sha256 of the little-endian float64 bytes of an array"""
    return hashlib.sha256(np.ascontiguousarray(values, dtype=DTYPE).tobytes()).hexdigest()


def save_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)


def _write_array(directory, name, values, fmt):
    values = np.asarray(values, dtype=float)
    if fmt == 'csv':
        np.savetxt(directory / f"{name}.csv", np.atleast_2d(values) if values.ndim < 2
                   else values.reshape(values.shape[0], -1), delimiter=',', fmt='%.12g')
    else:
        np.ascontiguousarray(values, dtype=DTYPE).tofile(directory / f"{name}.bin")


def _read_array(directory, name, fmt, shape):
    if fmt == 'csv':
        values = np.loadtxt(directory / f"{name}.csv", delimiter=',', ndmin=2)
    else:
        values = np.fromfile(directory / f"{name}.bin", dtype=DTYPE)
    size = int(np.prod(shape))
    if values.size != size:
        raise ShapeMismatch(f"{name} holds {values.size} values, meta.json declares {shape}")
    return values.reshape(shape)


class PersistenceService:
    """Reads and writes instance directories"""

    @staticmethod
    def instance_meta(instance, fmt='bin'):
        meta = {
            'kind': instance.kind.value,
            'n': instance.n,
            'm': instance.m,
            'alpha': instance.alpha,
            'seed': instance.seed,
            'format': fmt,
            'channel': instance.channel.to_config(),
            'priors': [prior.to_config() for prior in instance.priors],
            'y_sha256': array_digest(instance.y),
            'rank': None,
        }
        if instance.x0 is not None:
            meta['rank'] = int(instance.x0.shape[1])
        elif instance.u0 is not None:
            meta['rank'] = int(instance.u0.shape[1])
        return meta

    @staticmethod
    def save_instance(instance, directory, fmt='bin'):
        """
        Write ``meta.json``, ``Y`` and the planted arrays into ``directory``

        Args:
            instance (ProblemInstance): Instance to persist
            directory: Target directory (created if missing)
            fmt (str): 'bin' for raw little-endian float64, 'csv' for text

        Returns:
            dict: The metadata written
        """
        if fmt not in FORMATS:
            raise ConfigError(f"Unknown instance format {fmt!r}, expected one of {FORMATS}")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = PersistenceService.instance_meta(instance, fmt)
        _write_array(directory, 'Y', instance.y, fmt)
        if instance.x0 is not None:
            _write_array(directory, 'X0', instance.x0, fmt)
        if instance.u0 is not None:
            _write_array(directory, 'U0', instance.u0, fmt)
            _write_array(directory, 'V0', instance.v0, fmt)
        save_json(directory / META_FILE, meta)
        logger.info(f"Saved {instance.kind.value} instance N={instance.n} to {directory}")
        return meta

    @staticmethod
    def load_instance(directory):
        """Read an instance directory back and recompute S and R"""
        directory = Path(directory)
        with open(directory / META_FILE, 'r', encoding='utf-8') as handle:
            meta = json.load(handle)
        kind = InstanceKind(meta['kind'])
        n, m, fmt = int(meta['n']), int(meta['m']), meta.get('format', 'bin')
        channel = ChannelSpec.from_config(meta['channel'])
        priors = tuple(PriorSpec.from_config(p) for p in meta.get('priors', []))
        rank = meta.get('rank')
        if kind is InstanceKind.SYMMETRIC:
            y = _read_array(directory, 'Y', fmt, (n * (n - 1) // 2,))
        else:
            y = _read_array(directory, 'Y', fmt, (n, m))
        if fmt == 'bin' and array_digest(y) != meta.get('y_sha256'):
            raise ConfigError(f"Y in {directory} does not match its recorded digest")

        x0 = u0 = v0 = None
        if rank is not None and kind is InstanceKind.SYMMETRIC:
            x0 = _read_array(directory, 'X0', fmt, (n, rank))
        elif rank is not None:
            u0 = _read_array(directory, 'U0', fmt, (n, rank))
            v0 = _read_array(directory, 'V0', fmt, (m, rank))

        if kind is InstanceKind.SYMMETRIC:
            S, R = symmetric_scores(channel, n, y)
        else:
            S, R = ChannelService.score_matrices(channel, y)
        return ProblemInstance(kind, n, m, y, S, R, channel, priors, meta.get('seed'),
                               x0=x0, u0=u0, v0=v0)

    @staticmethod
    def save_estimates(directory, arrays, fmt='bin'):
        """Final estimates next to the instance, one file per name (``x_hat.bin``, ``sigma.bin``, ...)"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, values in arrays.items():
            _write_array(directory, name, values, fmt)


def save_instance(instance: ProblemInstance, directory, fmt='bin'):
    return PersistenceService.save_instance(instance, directory, fmt)


def load_instance(directory):
    return PersistenceService.load_instance(directory)
