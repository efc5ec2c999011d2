""" Checkpoint directories: manifest.json plus one little-endian float64 blob.

    manifest.json:
        {"format": "evdetr-ckpt-v1", "dtype": "<f8",
         "entries": [{"name", "shape", "offset", "nbytes"}, ...],
         "meta": {...}}

    Optimizer moments are stored as entries named adam.m.<param> and
    adam.v.<param>; step count, hyperparameters and RNG counters go in meta.
"""

import json
import logging
import pathlib

import numpy as np

from .optim import AdamState

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)

FORMAT = "evdetr-ckpt-v1"
DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, adam=None, meta=None):
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = [(p.name, p.values) for p in params]
    meta = dict(meta or {})
    if adam is not None:
        arrays += [(f"adam.m.{n}", a) for n, a in adam.m.items()]
        arrays += [(f"adam.v.{n}", a) for n, a in adam.v.items()]
        meta['adam'] = {k: getattr(adam, k) for k in ('lr', 'beta1', 'beta2', 'eps', 'weight_decay', 'step')}
    entries, offset = [], 0
    with open(path/'params.bin', 'wb') as blob:
        for name, values in arrays:
            data = np.ascontiguousarray(values, dtype=DTYPE).tobytes()
            blob.write(data)
            entries.append({'name': name, 'shape': list(values.shape), 'offset': offset, 'nbytes': len(data)})
            offset += len(data)
    manifest = {'format': FORMAT, 'dtype': DTYPE, 'entries': entries, 'meta': meta}
    (path/'manifest.json').write_text(json.dumps(manifest, indent=1, sort_keys=True))
    logger.info("checkpoint %s: %d arrays, %d bytes", path, len(entries), offset)
    return path


def load_checkpoint(path):
    """ Returns (arrays by name, AdamState or None, meta). """
    path = pathlib.Path(path)
    manifest_path = path/'manifest.json'
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get('format') != FORMAT:
        raise CheckpointError(f"unknown checkpoint format: {manifest.get('format')!r}")
    if manifest.get('dtype') != DTYPE:
        raise CheckpointError(f"unsupported dtype: {manifest.get('dtype')!r}")
    blob = (path/'params.bin').read_bytes()
    arrays = {}
    for e in manifest['entries']:
        start, end = e['offset'], e['offset'] + e['nbytes']
        if end > len(blob) or e['nbytes'] != 8 * int(np.prod(e['shape'], dtype=np.int64)):
            err = CheckpointError(f"entry {e['name']} does not fit the blob")
            err.add_note(f"checkpoint: {path}")
            raise err
        arrays[e['name']] = np.frombuffer(blob[start:end], dtype=DTYPE).reshape(e['shape']).astype(np.float64)
    meta = manifest['meta']
    adam = None
    if 'adam' in meta:
        adam = AdamState(**meta['adam'])
        for name in list(arrays):
            for prefix, moments in (('adam.m.', adam.m), ('adam.v.', adam.v)):
                if name.startswith(prefix):
                    moments[name[len(prefix):]] = arrays.pop(name)
    return arrays, adam, meta


def restore(params, arrays):
    """ Copies stored values into params; every parameter must be present. """
    missing = [p.name for p in params if p.name not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    params.load_values({p.name: arrays[p.name] for p in params})


@test
def save_load_preserves_everything(tmp_path):
    from .params import ParamStore
    s = ParamStore()
    s.add('enc.w', np.arange(6.0).reshape(2, 3) / 7)
    s.add('enc.b', [np.pi])
    adam = AdamState(step=12)
    adam.m['enc.b'] = np.array([0.25])
    adam.v['enc.b'] = np.array([0.5])
    save_checkpoint(tmp_path/'ck', s, adam, meta={'rng': {'seed': 1, 'counter': 9}})
    arrays, adam2, meta = load_checkpoint(tmp_path/'ck')
    test.eq(['enc.w', 'enc.b'], list(arrays))
    test.eq((np.arange(6.0).reshape(2, 3) / 7).tolist(), arrays['enc.w'].tolist())
    test.eq(12, adam2.step)
    test.eq([0.25], list(adam2.m['enc.b']))
    test.eq({'seed': 1, 'counter': 9}, meta['rng'])
    manifest = json.loads((tmp_path/'ck'/'manifest.json').read_text())
    test.eq("evdetr-ckpt-v1", manifest['format'])
    test.eq({'name': 'enc.b', 'shape': [1], 'offset': 48, 'nbytes': 8}, manifest['entries'][1])
    test.eq(np.pi, np.frombuffer((tmp_path/'ck'/'params.bin').read_bytes()[48:56], '<f8')[0])


@test
def restore_requires_all_parameters(tmp_path):
    from .params import ParamStore
    s = ParamStore()
    s.add('a', [1.0])
    save_checkpoint(tmp_path/'ck', s)
    s.add('b', [2.0])
    arrays, adam, _ = load_checkpoint(tmp_path/'ck')
    test.eq(None, adam)
    with test.raises(CheckpointError, "checkpoint lacks parameters: b"):
        restore(s, arrays)


@test
def wrong_format_rejected(tmp_path):
    (tmp_path/'manifest.json').write_text('{"format": "other", "dtype": "<f8", "entries": [], "meta": {}}')
    with test.raises(CheckpointError, "unknown checkpoint format: 'other'"):
        load_checkpoint(tmp_path)
    with test.raises(FileNotFoundError, f"no checkpoint at {tmp_path/'nothing'}"):
        load_checkpoint(tmp_path/'nothing')
