""" This module contains classes and functions to ingest, derive, synthesise and batch
multivariate sequence data for the Sequence-Density-Workbench.

**Description:**

    Raw data enters the workbench either as a uni-variate frame sequence (mono 16-bit
    WAV audio) or as a multivariate step sequence (piano-roll or pen-trajectory text
    files, one step per line). The transforms in this module derive the datasets the
    experiments are run on:
        1. reshape_multiframe()  frames -> T x L steps (non-overlapping chunks)
        2. stride_subsample()    keeps one frame out of every M
        3. permute_steps()       fixed permutation of the elements inside every step
        4. flatten_steps()       steps -> frames (row-major)
    Synthetic data with tunable intra-step correlation is produced by synth_generate(),
    and make_batches() turns a list of sequences into a deterministic batch stream.

All containers are immutable once constructed (their numpy buffers are read-only), so
they can be shared between threads, e.g. with the ``PrefetchThread`` below.

"""

import csv
import json
import logging
import os
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.io import wavfile

from SDW.errors import DataFormatError, TransformError

logger = logging.getLogger(__name__)

CONTINUOUS = 'continuous'
BINARY = 'binary'
ELEMENT_KINDS = (CONTINUOUS, BINARY)

PIANO_KEYS = 88          # A0 .. C8
TRAJECTORY_WIDTH = 3     # pen state, x, y
PCM_SCALE = 32768.0      # signed 16-bit full scale

SYNTHETIC_FAMILIES = ('within-step-AR', 'iid-noise', 'sinusoid-mixture')
SPLITS = ('train', 'valid', 'test')


def _check_binary(values):
    return bool(np.all((values == 0.0) | (values == 1.0)))


# EMBEDDING FrameSequence / StepSequence CLASSES --------------------------------------

@dataclass(frozen=True, eq=False)
class FrameSequence:
    """A uni-variate sequence of scalar frames.

    Args:
        frames: 1-D array of finite values.
        source: identifier of where the frames came from.
        original_length: length of the raw source before any transform.
        kind: element kind shared by every frame (continuous or binary).
    """
    frames: np.ndarray
    source: str = 'memory'
    original_length: int = None
    kind: str = CONTINUOUS

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 1:
            raise DataFormatError('frames must be a one-dimensional array')
        if frames.size == 0:
            raise DataFormatError('empty sequence')
        if not np.all(np.isfinite(frames)):
            raise DataFormatError('non-finite frame value')
        if self.kind not in ELEMENT_KINDS:
            raise DataFormatError('unknown element kind %r' % (self.kind,))
        if self.kind == BINARY and not _check_binary(frames):
            raise DataFormatError('non-binary value in a binary frame sequence')
        frames.setflags(write=False)
        object.__setattr__(self, 'frames', frames)
        if self.original_length is None:
            object.__setattr__(self, 'original_length', int(frames.size))

    def __len__(self):
        return int(self.frames.size)


@dataclass(frozen=True, eq=False)
class StepSequence:
    """A length-T sequence of L-dimensional steps.

    Args:
        steps: T x L array.
        element_kind: per-dimension tag, ``'continuous'`` or ``'binary'``.
            Defaults to all continuous.
        source: identifier of where the steps came from.
    """
    steps: np.ndarray
    element_kind: tuple = None
    source: str = 'memory'

    def __post_init__(self):
        steps = np.array(self.steps, dtype=np.float64)
        if steps.ndim != 2:
            raise DataFormatError('steps must be a T x L array')
        if steps.shape[0] < 1 or steps.shape[1] < 1:
            raise DataFormatError('empty sequence')
        if not np.all(np.isfinite(steps)):
            raise DataFormatError('non-finite element value')
        kinds = self.element_kind
        if kinds is None:
            kinds = (CONTINUOUS,) * steps.shape[1]
        kinds = tuple(kinds)
        if len(kinds) != steps.shape[1]:
            raise DataFormatError('element_kind has %d entries for L=%d' % (len(kinds), steps.shape[1]))
        for i, kind in enumerate(kinds):
            if kind not in ELEMENT_KINDS:
                raise DataFormatError('unknown element kind %r' % (kind,))
            if kind == BINARY and not _check_binary(steps[:, i]):
                raise DataFormatError('non-binary value in binary dimension %d' % i)
        steps.setflags(write=False)
        object.__setattr__(self, 'steps', steps)
        object.__setattr__(self, 'element_kind', kinds)

    @property
    def T(self):
        return int(self.steps.shape[0])

    @property
    def L(self):
        return int(self.steps.shape[1])

    @property
    def is_single_typed(self):
        return len(set(self.element_kind)) == 1

    def __len__(self):
        return self.T


@dataclass(frozen=True)
class LeakSplit:
    """Partition of the element indices of a step into the leaked subset (a) and its
    complement (b). Indices are 0-based, so interleave(U=2) leaks positions 0, 2, 4, ...
    (the odd elements in 1-based counting)."""
    a_indices: tuple
    b_indices: tuple
    scheme: str
    U: int = None
    V: int = None
    seed: int = None

    @property
    def L(self):
        return len(self.a_indices) + len(self.b_indices)

    def to_dict(self):
        return {'scheme': self.scheme, 'U': self.U, 'V': self.V, 'seed': self.seed,
                'a_indices': list(self.a_indices), 'b_indices': list(self.b_indices)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d['a_indices']), tuple(d['b_indices']), d['scheme'],
                   d.get('U'), d.get('V'), d.get('seed'))


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic dataset. Generation is a pure function of these."""
    family: str = 'within-step-AR'
    T: int = 16
    L: int = 8
    rho: float = 0.9            # within-step lag-1 coefficient
    step_coeff: float = 0.5     # coupling of x_{t,1} to x_{t-1,L}
    noise_scale: float = 1.0
    n_sequences: int = 100
    seed: int = 0
    binarize: bool = False      # threshold at 0 -> binary (piano-roll like) data

    def problems(self):
        found = []
        if self.family not in SYNTHETIC_FAMILIES:
            found.append('synthetic family must be one of %s' % (SYNTHETIC_FAMILIES,))
        if not 0.0 <= self.rho < 1.0:
            found.append('rho must lie in [0, 1)')
        if not -1.0 < self.step_coeff < 1.0:
            found.append('step_coeff must lie in (-1, 1)')
        if not self.noise_scale > 0:
            found.append('noise_scale must be > 0')
        if self.T < 1 or self.L < 1 or self.n_sequences < 1:
            found.append('T, L and n_sequences must be >= 1')
        return found

    def to_dict(self):
        return asdict(self)


# EMBEDDING READERS ------------------------------------------------------------------

def load_wav(path):
    """Reads a mono 16-bit PCM WAV file.

    Args:
        path: path to the WAV file.

    Returns: FrameSequence with amplitudes mapped to [-1, 1] by x / 32768.

    """
    try:
        _, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise DataFormatError('unreadable WAV file %s: %s' % (path, e))
    if data.ndim != 1:
        raise DataFormatError('multi-channel audio is not supported (%d channels)' % data.shape[1])
    if data.dtype != np.int16:
        raise DataFormatError('unsupported encoding %s, expected 16-bit PCM' % data.dtype)
    if data.size == 0:
        raise DataFormatError('empty sequence')
    return FrameSequence(data.astype(np.float64) / PCM_SCALE, source=str(path))


def _read_rows(path, width):
    rows = []
    try:
        csvfile = open(path, newline='', encoding='utf-8')
    except OSError as e:
        raise DataFormatError('unreadable file %s: %s' % (path, e))
    with csvfile:
        for line, row in enumerate(csv.reader(csvfile), start=1):
            if not any(token.strip() for token in row):
                continue
            if len(row) != width:
                raise DataFormatError('expected %d values, found %d' % (width, len(row)), line=line)
            try:
                values = [float(token) for token in row]
            except ValueError:
                raise DataFormatError('malformed value in %r' % (','.join(row),), line=line)
            if not all(np.isfinite(values)):
                raise DataFormatError('non-finite value', line=line)
            rows.append((line, values))
    if not rows:
        raise DataFormatError('empty sequence')
    return rows


def load_pianoroll(path):
    """Reads a piano-roll text file: one step per line, 88 comma separated 0/1 values.

    Returns: StepSequence with L = 88 and binary elements.

    """
    rows = _read_rows(path, PIANO_KEYS)
    for line, values in rows:
        if not all(v in (0.0, 1.0) for v in values):
            raise DataFormatError('non-binary value', line=line)
    return StepSequence(np.array([v for _, v in rows]), (BINARY,) * PIANO_KEYS, source=str(path))


def load_trajectory(path):
    """Reads a pen trajectory: one step per line, ``pen,x,y`` with pen in {0, 1}."""
    rows = _read_rows(path, TRAJECTORY_WIDTH)
    for line, values in rows:
        if values[0] not in (0.0, 1.0):
            raise DataFormatError('pen dimension not binary', line=line)
    return StepSequence(np.array([v for _, v in rows]), (BINARY, CONTINUOUS, CONTINUOUS),
                        source=str(path))


# EMBEDDING TRANSFORMS ---------------------------------------------------------------

def _positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise TransformError('%s must be a positive integer, got %r' % (name, value))
    return int(value)


def reshape_multiframe(seq, L, T):
    """Cuts a frame sequence into non-overlapping T x L step sequences.

    A trailing remainder shorter than L*T frames is dropped. A sequence shorter than
    L*T yields an empty list.

    Args:
        seq: FrameSequence.
        L: frames per step.
        T: steps per output sequence.

    Returns: list of StepSequence.

    """
    L = _positive_int(L, 'L')
    T = _positive_int(T, 'T')
    chunk = L * T
    count = len(seq) // chunk
    if count == 0:
        logger.debug('%s: %d frames is shorter than one %d-frame chunk', seq.source, len(seq), chunk)
    kinds = (seq.kind,) * L
    return [StepSequence(seq.frames[k * chunk:(k + 1) * chunk].reshape(T, L), kinds,
                         source='%s[%d]' % (seq.source, k))
            for k in range(count)]


def as_step_sequence(seq):
    """Views a frame sequence as width-1 steps (the input form of the flat models)."""
    return StepSequence(seq.frames.reshape(-1, 1), (seq.kind,), source=seq.source)


def stride_subsample(seq, M):
    """Keeps frames 1, M+1, 2M+1, ... (1-based). Output length is ceil(len / M)."""
    M = _positive_int(M, 'M')
    return FrameSequence(seq.frames[::M], source=seq.source,
                         original_length=seq.original_length, kind=seq.kind)


def make_permutation(L, seed):
    """Draws the fixed within-step permutation used for permuted datasets."""
    return tuple(int(i) for i in np.random.default_rng(seed).permutation(_positive_int(L, 'L')))


def inverse_permutation(perm):
    perm = np.asarray(perm)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return tuple(int(i) for i in inverse)


def permute_steps(seq, perm):
    """Reorders the elements of every step: out[t, i] = in[t, perm[i]] (0-based perm)."""
    perm = np.asarray(perm)
    if perm.ndim != 1 or perm.size != seq.L or not np.issubdtype(perm.dtype, np.integer) \
            or not np.array_equal(np.sort(perm), np.arange(seq.L)):
        raise TransformError('permutation is not a bijection on %d elements' % seq.L)
    kinds = tuple(seq.element_kind[i] for i in perm)
    return StepSequence(seq.steps[:, perm], kinds, source=seq.source)


def flatten_steps(seq):
    """Row-major concatenation of the steps. Only defined on single-typed data."""
    if not seq.is_single_typed:
        raise TransformError('flat model not applicable: mixed element kinds %s'
                             % (sorted(set(seq.element_kind)),))
    return FrameSequence(seq.steps.reshape(-1), source=seq.source, kind=seq.element_kind[0])


def make_leak_split(L, scheme, U=None, V=None, seed=0):
    """Builds the leaked subset used by the delta-RNN.

    Args:
        L: number of elements per step.
        scheme: ``'interleave'`` (every U-th element, starting with the first) or
            ``'random'`` (V elements drawn uniformly with ``seed``).

    Returns: LeakSplit

    """
    L = _positive_int(L, 'L')
    if scheme == 'interleave':
        if U is None or not 2 <= U <= L:
            raise TransformError('interleave split needs 2 <= U <= L (U=%r, L=%d)' % (U, L))
        a = tuple(range(0, L, int(U)))
        V, seed = None, None
    elif scheme == 'random':
        if V is None or not 1 <= V < L:
            raise TransformError('random split needs 1 <= V < L (V=%r, L=%d)' % (V, L))
        chosen = np.random.default_rng(seed).choice(L, size=int(V), replace=False)
        a = tuple(sorted(int(i) for i in chosen))
        U = None
    else:
        raise TransformError('unknown leak scheme %r' % (scheme,))
    b = tuple(i for i in range(L) if i not in a)
    return LeakSplit(a, b, scheme, U, V, seed)


# EMBEDDING SYNTHESIS ----------------------------------------------------------------

def synth_generate(spec):
    """Generates a synthetic dataset as a pure function of ``spec``.

    The within-step-AR family runs a stationary order-1 autoregression over the
    elements of each step (coefficient rho, unit marginal variance before scaling);
    the first element of step t continues from the last element of step t-1 with
    coefficient ``step_coeff``.

    Returns: list of StepSequence

    """
    found = spec.problems()
    if found:
        raise TransformError('; '.join(found))
    rng = np.random.default_rng(spec.seed)
    N, T, L = spec.n_sequences, spec.T, spec.L
    eps = rng.standard_normal((N, T, L))
    if spec.family == 'within-step-AR':
        x = np.empty((N, T, L))
        keep_elem, keep_step = np.sqrt(1.0 - spec.rho ** 2), np.sqrt(1.0 - spec.step_coeff ** 2)
        for t in range(T):
            if t == 0:
                x[:, 0, 0] = eps[:, 0, 0]
            else:
                x[:, t, 0] = spec.step_coeff * x[:, t - 1, L - 1] + keep_step * eps[:, t, 0]
            for i in range(1, L):
                x[:, t, i] = spec.rho * x[:, t, i - 1] + keep_elem * eps[:, t, i]
    elif spec.family == 'iid-noise':
        x = eps
    else:
        # three sinusoids per sequence over the flattened frame index
        n = np.arange(T * L).reshape(T, L)
        amplitude = rng.uniform(0.2, 1.0, size=(N, 3))
        omega = rng.uniform(0.01, 0.3, size=(N, 3))
        phase = rng.uniform(0.0, 2 * np.pi, size=(N, 3))
        x = np.sin(omega[:, :, None, None] * n + phase[:, :, None, None])
        x = (amplitude[:, :, None, None] * x).sum(axis=1) + 0.1 * eps
    x = spec.noise_scale * x
    kind = CONTINUOUS
    if spec.binarize:
        x = (x > 0).astype(np.float64)
        kind = BINARY
    source = 'synthetic:%s:%d' % (spec.family, spec.seed)
    return [StepSequence(x[k], (kind,) * L, source='%s[%d]' % (source, k)) for k in range(N)]


def split_dataset(data, fractions=(0.8, 0.1, 0.1), seed=0):
    """Assigns every sequence to exactly one of train/valid/test."""
    if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
        raise TransformError('split fractions must be three non-negative numbers summing to 1')
    order = np.random.default_rng(seed).permutation(len(data))
    n_train = int(np.floor(fractions[0] * len(data)))
    n_valid = int(np.floor(fractions[1] * len(data)))
    cuts = {'train': order[:n_train], 'valid': order[n_train:n_train + n_valid],
            'test': order[n_train + n_valid:]}
    return {name: [data[i] for i in sorted(idx)] for name, idx in cuts.items()}


def dataset_statistics(data):
    """Corpus statistics: number of sequences, total steps, frames per step, total frames."""
    widths = sorted({seq.L for seq in data})
    steps = sum(seq.T for seq in data)
    return {'sequences': len(data), 'steps': steps,
            'frames_per_step': widths[0] if len(widths) == 1 else widths,
            'frames': sum(seq.T * seq.L for seq in data)}


# EMBEDDING MANIFEST -----------------------------------------------------------------

def write_manifest(directory, splits, meta=None):
    """Writes ``<split>.npy`` arrays of shape (N, T, L) and ``manifest.json``.

    Args:
        directory: target directory (must exist).
        splits: dict split name -> list of equally shaped StepSequence.
        meta: extra JSON-serialisable metadata.

    Returns: path of the manifest.

    """
    kinds = None
    files = {}
    for name in SPLITS:
        data = splits.get(name, [])
        files[name] = []
        if not data:
            continue
        if len({(s.T, s.L) for s in data}) != 1:
            raise DataFormatError('split %s mixes sequence shapes' % name)
        kinds = kinds or list(data[0].element_kind)
        filename = '%s.npy' % name
        np.save(os.path.join(directory, filename), np.stack([s.steps for s in data]))
        files[name].append(filename)
    manifest = {'format': 'npy', 'element_kind': kinds, 'splits': files, 'meta': meta or {}}
    path = os.path.join(directory, 'manifest.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def load_manifest(path):
    """Reads a dataset manifest.

    The manifest lists, per split, files relative to the manifest directory: ``.npy``
    arrays ((N, T, L) or (T, L)), ``.wav`` audio, or ``.csv`` text whose layout is the
    manifest ``format`` (``pianoroll`` or ``trajectory``).

    Returns: (dict split -> list of FrameSequence/StepSequence, manifest dict)

    """
    try:
        with open(path, encoding='utf-8') as f:
            manifest = json.load(f)
    except (OSError, ValueError) as e:
        raise DataFormatError('unreadable manifest %s: %s' % (path, e))
    root = os.path.dirname(os.path.abspath(path))
    kinds = manifest.get('element_kind')
    readers = {'pianoroll': load_pianoroll, 'trajectory': load_trajectory}
    out = {}
    for name in SPLITS:
        out[name] = []
        for rel in manifest.get('splits', {}).get(name, []):
            full = os.path.join(root, rel)
            if rel.endswith('.npy'):
                array = np.load(full)
                array = array[None] if array.ndim == 2 else array
                out[name].extend(StepSequence(a, kinds, source='%s[%d]' % (rel, k))
                                 for k, a in enumerate(array))
            elif rel.endswith('.wav'):
                out[name].append(load_wav(full))
            elif manifest.get('format') in readers:
                out[name].append(readers[manifest['format']](full))
            else:
                raise DataFormatError('cannot read %s with manifest format %r' % (rel, manifest.get('format')))
    return out, manifest


# EMBEDDING BATCHING -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Batch:
    """Padded batch. ``mask[b, t]`` is 1.0 for real steps and 0.0 for padding."""
    steps: np.ndarray
    mask: np.ndarray
    lengths: tuple
    indices: tuple
    element_kind: tuple = field(default=())

    @property
    def size(self):
        return int(self.steps.shape[0])


def collate(data, indices=None):
    """Stacks sequences of one width into a padded Batch."""
    if indices is None:
        indices = range(len(data))
    chosen = [data[i] for i in indices]
    widths = {seq.L for seq in chosen}
    if len(widths) != 1:
        raise DataFormatError('sequences in a batch must share L, found %s' % sorted(widths))
    T = max(seq.T for seq in chosen)
    steps = np.zeros((len(chosen), T, widths.pop()))
    mask = np.zeros((len(chosen), T))
    for b, seq in enumerate(chosen):
        steps[b, :seq.T] = seq.steps
        mask[b, :seq.T] = 1.0
    return Batch(steps, mask, tuple(seq.T for seq in chosen), tuple(int(i) for i in indices),
                 chosen[0].element_kind)


class BatchStream(object):
    """Deterministic epoch-wise batch stream.

    The order of epoch ``e`` is ``default_rng([seed, e]).permutation(n)``; every sequence
    appears exactly once per epoch and the last batch of an epoch may be smaller.
    """

    def __init__(self, data, batch_size, seed=0, shuffle=True):
        if len(data) == 0:
            raise DataFormatError('empty dataset')
        self.data = list(data)
        self.batch_size = _positive_int(batch_size, 'batch_size')
        self.seed = seed
        self.shuffle = shuffle

    def __len__(self):
        return -(-len(self.data) // self.batch_size)

    def order(self, epoch):
        if not self.shuffle:
            return np.arange(len(self.data))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.data))

    def epoch(self, epoch):
        order = self.order(epoch)
        return [collate(self.data, order[k:k + self.batch_size])
                for k in range(0, len(order), self.batch_size)]

    def __iter__(self):
        epoch = 0
        while True:
            for batch in self.epoch(epoch):
                yield batch
            epoch += 1


def make_batches(data, batch_size, seed=0):
    """Returns the deterministic BatchStream over ``data``."""
    return BatchStream(data, batch_size, seed)


# EMBEDDING PrefetchThread CLASS -----------------------------------------------------

class PrefetchThread(threading.Thread):
    """Fills a bounded queue from a batch iterator in a background thread.

    A single producer keeps the emitted order equal to the order of the iterator.
    """

    def __init__(self, batches, depth=4, name='Prefetch-1'):
        threading.Thread.__init__(self, name=name, daemon=True)
        self._batches = batches
        self._queue = queue.Queue(maxsize=depth)
        self._stop_event = threading.Event()

    def run(self):
        logger.debug('Starting %s', self.name)
        for batch in self._batches:
            while not self.stopped():
                try:
                    self._queue.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self.stopped():
                break
        logger.debug('Exiting %s', self.name)

    def get(self):
        return self._queue.get()

    def stop(self):
        self._stop_event.set()

    def stopped(self):
        return self._stop_event.is_set()
