""" This module contains the experiment configuration of the Sequence-Density-Workbench.

**Description:**

    One JSON file describes one run:

        {"name": "toy-hier", "seed": 0,
         "dataset": {"source": "synthetic", "synthetic": {"family": "within-step-AR", "L": 8},
                     "transforms": [{"op": "permute"}], "split": [0.8, 0.1, 0.1]},
         "model": {"family": "RNN-HIER", "width": 32, "emit_width": 32},
         "train": {"total_updates": 2000, "batch_size": 32},
         "eval": {"convention": "step-average", "bound": "elbo", "k": 64}}

    Dataset sources: synthetic | wav | pianoroll | trajectory | manifest.
    Transforms, applied in order to every sequence:
        1. {"op": "stride", "M": 50}                 frames -> frames
        2. {"op": "multiframe", "L": 200, "T": 40}   frames -> steps
        3. {"op": "permute", "seed": 3}              steps -> steps (seed defaults to the global seed)
        4. {"op": "flatten"}                         steps -> width-1 steps, last and only for flat families

Validation is total: validate_config() returns every problem and load_config() raises
one ConfigError listing them, before any data or model is built.

"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

from SDW.datasets import (BINARY, CONTINUOUS, PIANO_KEYS, SPLITS, SyntheticSpec,
                          as_step_sequence, dataset_statistics, flatten_steps, load_manifest,
                          load_pianoroll, load_trajectory, load_wav, make_permutation, permute_steps,
                          reshape_multiframe, split_dataset, stride_subsample, synth_generate)
from SDW.errors import ConfigError, DataFormatError
from SDW.evaluation import BOUND_KINDS, CONVENTIONS, DEFAULT_K, parse_bound
from SDW.models import FLAT_FAMILIES, ModelConfig
from SDW.training import TrainHyper

logger = logging.getLogger(__name__)

SOURCES = ('synthetic', 'wav', 'pianoroll', 'trajectory', 'manifest')
TRANSFORM_OPS = ('stride', 'multiframe', 'permute', 'flatten')
OUTPUT_ROOT_ENV = 'SDW_OUTPUT_ROOT'
DEFAULT_OUTPUT_ROOT = 'runs'


def output_root():
    return os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


@dataclass
class DatasetSection:
    name: str = 'dataset'
    source: str = 'synthetic'
    synthetic: dict = None           # SyntheticSpec fields (seed defaults to the global seed)
    paths: dict = None               # split -> list of files; key "all" is split by ``split``
    manifest: str = None
    transforms: list = field(default_factory=list)
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    convention: str = None           # customary reporting convention of the data


@dataclass
class EvalSection:
    convention: str = 'step-average'
    bound: str = None                # None: exact (deterministic) / elbo (stochastic)
    k: int = DEFAULT_K
    noise_seed: int = 0


@dataclass
class DatasetBundle:
    """Transformed splits plus what the model needs to know about the step."""
    splits: dict
    element_kind: tuple              # step kinds before any flatten
    frames_per_step: int
    statistics: dict
    permutation: list = None


def _section(cls, d, name, found):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        found.append('%s section must be an object' % name)
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        found.append('unknown %s keys %s' % (name, unknown))
    return cls(**{k: v for k, v in d.items() if k in known})


# EMBEDDING ExperimentConfig CLASS ---------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str = 'run'
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, d, found=None):
        """Parses a config dict; structural problems are appended to ``found``."""
        raise_now = found is None
        found = [] if found is None else found
        unknown = sorted(set(d) - {'name', 'seed', 'dataset', 'model', 'train', 'eval'})
        if unknown:
            found.append('unknown top-level keys %s' % unknown)
        cfg = cls(name=d.get('name', 'run'), seed=d.get('seed', 0),
                  dataset=_section(DatasetSection, d.get('dataset'), 'dataset', found),
                  model=_section(ModelConfig, d.get('model'), 'model', found),
                  train=_section(TrainHyper, d.get('train'), 'train', found),
                  eval=_section(EvalSection, d.get('eval'), 'eval', found))
        leak = cfg.model.leak
        if isinstance(leak, dict) and leak.get('scheme') == 'random' and 'seed' not in leak:
            cfg.model = replace(cfg.model, leak=dict(leak, seed=cfg.seed))
        if raise_now and found:
            raise ConfigError(found)
        return cfg

    def to_dict(self):
        return {'name': self.name, 'seed': self.seed, 'dataset': asdict(self.dataset),
                'model': self.model.to_dict(), 'train': self.train.to_dict(), 'eval': asdict(self.eval)}

    def hash(self):
        return config_hash(self)

    def problems(self):
        return validate_config(self)

    def build_datasets(self):
        return build_datasets(self)

    def synthetic_spec(self):
        spec = dict(self.dataset.synthetic or {})
        spec.setdefault('seed', self.seed)
        return SyntheticSpec(**spec)


def config_hash(cfg):
    """SHA-256 of the canonical JSON of the config."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_config(path, seed=None):
    """Reads and validates a JSON config; ``seed`` overrides the global seed.

    Raises: ConfigError listing every problem.

    """
    try:
        with open(path, encoding='utf-8') as f:
            d = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(['unreadable config %s: %s' % (path, e)])
    if not isinstance(d, dict):
        raise ConfigError(['config must be a JSON object'])
    if seed is not None:
        d = dict(d, seed=int(seed))
    found = []
    cfg = ExperimentConfig.from_dict(d, found)
    found += validate_config(cfg)
    if found:
        raise ConfigError(found)
    return cfg


def save_config(cfg, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


# EMBEDDING VALIDATION ---------------------------------------------------------------

def _source_files(section):
    return [p for files in (section.paths or {}).values() for p in files]


def _input_signature(cfg, found):
    """Returns ('frames' | 'steps', element kinds) of the raw data, or (None, None)."""
    ds = cfg.dataset
    if ds.source == 'synthetic':
        if not isinstance(ds.synthetic or {}, dict):
            found.append('synthetic spec must be an object')
            return None, None
        try:
            spec = cfg.synthetic_spec()
        except TypeError as e:
            found.append('synthetic spec: %s' % e)
            return None, None
        found.extend('synthetic spec: %s' % p for p in spec.problems())
        return 'steps', ((BINARY if spec.binarize else CONTINUOUS),) * spec.L
    if ds.source == 'wav':
        return 'frames', (CONTINUOUS,)
    if ds.source == 'pianoroll':
        return 'steps', (BINARY,) * PIANO_KEYS
    if ds.source == 'trajectory':
        return 'steps', (BINARY, CONTINUOUS, CONTINUOUS)
    try:
        with open(ds.manifest, encoding='utf-8') as f:
            manifest = json.load(f)
    except (OSError, TypeError, ValueError) as e:
        found.append('unreadable manifest %s: %s' % (ds.manifest, e))
        return None, None
    if manifest.get('format') not in ('npy', 'wav', 'pianoroll', 'trajectory'):
        found.append('manifest %s: unknown format %r' % (ds.manifest, manifest.get('format')))
        return None, None
    if manifest.get('format') == 'wav':
        return 'frames', (CONTINUOUS,)
    if manifest.get('format') == 'pianoroll':
        return 'steps', (BINARY,) * PIANO_KEYS
    if manifest.get('format') == 'trajectory':
        return 'steps', (BINARY, CONTINUOUS, CONTINUOUS)
    kinds = manifest.get('element_kind')
    if not kinds:
        found.append('manifest %s declares no element_kind' % ds.manifest)
        return None, None
    return 'steps', tuple(kinds)


def _positive(t, key, found, index):
    value = t.get(key)
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        found.append('transform %d (%s): %s must be a positive integer' % (index, t.get('op'), key))
        return False
    return True


def trace_transforms(cfg, found):
    """Type-checks the transform chain. Returns the step kinds the model sees before
    any flatten (None when the chain is broken) and whether the chain flattens."""
    ds = cfg.dataset
    state, kinds = _input_signature(cfg, found)
    if state is None:
        return None, False
    flattened = False
    for index, t in enumerate(ds.transforms):
        op = t.get('op') if isinstance(t, dict) else None
        if op not in TRANSFORM_OPS:
            found.append('transform %d: op must be one of %s' % (index, TRANSFORM_OPS))
            return None, False
        if flattened:
            found.append('transform %d (%s): flatten must be the last transform' % (index, op))
            return None, False
        if op == 'stride':
            if state != 'frames':
                found.append('transform %d: stride applies to frame sequences only' % index)
                return None, False
            _positive(t, 'M', found, index)
        elif op == 'multiframe':
            if state != 'frames':
                found.append('transform %d: multiframe applies to frame sequences only' % index)
                return None, False
            if _positive(t, 'L', found, index) & _positive(t, 'T', found, index):
                state, kinds = 'steps', kinds * t['L']
            else:
                return None, False
        elif op == 'permute':
            if state != 'steps':
                found.append('transform %d: permute applies to step sequences only' % index)
                return None, False
            perm = make_permutation(len(kinds), t.get('seed', cfg.seed))
            kinds = tuple(kinds[i] for i in perm)
        elif op == 'flatten':
            if state != 'steps':
                found.append('transform %d: flatten applies to step sequences only' % index)
                return None, False
            if len(set(kinds)) != 1:
                found.append('flat model not applicable: flatten on mixed element kinds %s' % sorted(set(kinds)))
            flattened = True
    if state != 'steps':
        found.append('frame data must be cut into steps with a multiframe transform')
        return None, flattened
    return kinds, flattened


def validate_config(cfg):
    """Returns every problem of the config (empty list when valid)."""
    found = []
    ds = cfg.dataset
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        found.append('seed must be an integer')
    if ds.source not in SOURCES:
        found.append('dataset source must be one of %s' % (SOURCES,))
    else:
        if ds.source in ('wav', 'pianoroll', 'trajectory'):
            if not ds.paths:
                found.append('dataset source %s needs paths' % ds.source)
            elif set(ds.paths) - set(SPLITS) - {'all'}:
                found.append('dataset paths keys must be among %s or "all"' % (SPLITS,))
            for p in _source_files(ds):
                if not os.path.isfile(p):
                    found.append('missing data file %s' % p)
        if ds.source == 'manifest' and not ds.manifest:
            found.append('dataset source manifest needs a manifest path')
    if len(ds.split) != 3 or min(ds.split) < 0 or abs(sum(ds.split) - 1.0) > 1e-9:
        found.append('split must be three non-negative fractions summing to 1')
    if ds.convention is not None and ds.convention not in CONVENTIONS:
        found.append('dataset convention must be one of %s' % (CONVENTIONS,))

    kinds, flattened = (None, False)
    if ds.source in SOURCES:
        kinds, flattened = trace_transforms(cfg, found)
    found.extend(cfg.model.problems(kinds))
    if cfg.model.family in FLAT_FAMILIES and kinds is not None and not flattened:
        found.append('%s needs a trailing flatten transform' % cfg.model.family)
    if flattened and cfg.model.family not in FLAT_FAMILIES:
        found.append('flatten transform given for non-flat family %s' % cfg.model.family)

    found.extend(cfg.train.problems())
    if cfg.eval.convention not in CONVENTIONS:
        found.append('eval convention must be one of %s' % (CONVENTIONS,))
    try:
        parse_bound(cfg.eval.bound)
    except ValueError:
        found.append('eval bound must be one of %s' % (BOUND_KINDS,))
    if not isinstance(cfg.eval.k, int) or cfg.eval.k < 1:
        found.append('eval k must be an integer >= 1')
    return found


# EMBEDDING DATASET CONSTRUCTION -----------------------------------------------------

def _load_raw(cfg):
    ds = cfg.dataset
    if ds.source == 'synthetic':
        return {'all': synth_generate(cfg.synthetic_spec())}
    if ds.source == 'manifest':
        splits, _ = load_manifest(ds.manifest)
        return splits
    reader = {'wav': load_wav, 'pianoroll': load_pianoroll, 'trajectory': load_trajectory}[ds.source]
    return {name: [reader(p) for p in files] for name, files in ds.paths.items()}


def _apply(seq, t, seed):
    op = t['op']
    if op == 'stride':
        return [stride_subsample(seq, t['M'])]
    if op == 'multiframe':
        return reshape_multiframe(seq, t['L'], t['T'])
    if op == 'permute':
        return [permute_steps(seq, make_permutation(seq.L, t.get('seed', seed)))]
    return [as_step_sequence(flatten_steps(seq))]


def build_datasets(cfg):
    """Loads, splits and transforms the data of a (validated) config.

    Returns: DatasetBundle

    """
    ds = cfg.dataset
    raw = _load_raw(cfg)
    if 'all' in raw:
        pooled = raw.pop('all')
        for name, part in split_dataset(pooled, tuple(ds.split), cfg.seed).items():
            raw[name] = raw.get(name, []) + part
    kinds, _ = trace_transforms(cfg, [])
    if kinds is None:
        raise ConfigError(validate_config(cfg) or ['broken transform chain'])
    permutation = None
    splits = {}
    for name in SPLITS:
        data = raw.get(name, [])
        for t in ds.transforms:
            if t['op'] == 'permute' and data:
                permutation = list(make_permutation(data[0].L, t.get('seed', cfg.seed)))
            data = [out for seq in data for out in _apply(seq, t, cfg.seed)]
        splits[name] = data
    if not splits['train']:
        raise DataFormatError('empty dataset: no training sequences after transforms')
    statistics = {name: dataset_statistics(data) for name, data in splits.items() if data}
    for name, data in splits.items():
        logger.info('%s/%s: %d sequences', ds.name, name, len(data))
    return DatasetBundle(splits, tuple(kinds), len(kinds), statistics, permutation)
