""" This module contains classes and functions to log the progress of a training run to file.

**Description:**

    The training loop hands every parameter update, every validation pass and the
    wall-clock time to the classes below, which append them to files inside the run
    directory. These logfiles can then be plotted using plot_metrics().
    The run directory holds:
        1. metrics.jsonl     one JSON object per update (update, total, recon, kl, coeff, aux, lr, loss)
        2. validation.jsonl  one JSON object per validation pass
        3. wallclock.csv     Update, Seconds, Hours every 1,000 updates and at the end of the run

The metrics log carries no timestamps, so two runs with the same config and seed
write byte-identical files. Times only go to wallclock.csv.

"""

import csv
import json
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)

METRIC_FIELDS = ['update', 'total', 'recon', 'kl', 'coeff', 'aux', 'lr', 'loss']
WALLCLOCK_FIELDS = ['Update', 'Seconds', 'Hours']


class MetricsLog(object):
    """Append-only JSON-lines file, flushed after every record."""

    def __init__(self, PATH, filename='metrics.jsonl'):
        ''' Constructor for this class. '''
        self.filename = os.path.join(str(PATH), filename)
        self._file = open(self.filename, mode='a', encoding='utf-8')
        logger.debug('Log Started: %s', self.filename)

    def __del__(self):
        ''' Destructor for this class. '''
        self.close()

    def append(self, record):
        self._file.write(json.dumps(record, sort_keys=True) + '\n')
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()


class WallClockLog(object):
    """CSV of the accumulated training time; the header is written once per file."""

    def __init__(self, PATH, filename='wallclock.csv'):
        ''' Constructor for this class. '''
        self.filename = os.path.join(str(PATH), filename)
        tmp_check_file = os.path.isfile(self.filename)
        self._file = open(self.filename, mode='a', newline='', encoding='utf-8')
        self._writer = csv.DictWriter(self._file, fieldnames=WALLCLOCK_FIELDS)
        if not tmp_check_file:
            self._writer.writeheader()
        self._last = 0.0

    def __del__(self):
        ''' Destructor for this class. '''
        self.close()

    def log_time(self, update, seconds):
        """Appends one row.

        Args:
            update: number of updates completed.
            seconds: accumulated training time, never smaller than the previous row.
        Returns:

        """
        if seconds < self._last:
            raise ValueError('wall-clock time must be monotone (%.3f < %.3f)' % (seconds, self._last))
        self._last = seconds
        self._writer.writerow({'Update': int(update), 'Seconds': '%.3f' % seconds,
                               'Hours': '%.6f' % (seconds / 3600.0)})
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()


def read_metrics(path):
    """Reads a JSON-lines log back into a list of dicts."""
    with open(path, encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def read_wallclock(path):
    with open(path, newline='', encoding='utf-8') as f:
        return [{'Update': int(row['Update']), 'Seconds': float(row['Seconds']), 'Hours': float(row['Hours'])}
                for row in csv.DictReader(f)]


def plot_metrics(path, out=None, validation=None):
    """Plots loss, reconstruction and KL curves of a metrics log.

    Args:
        path: metrics.jsonl of a run.
        out: image file to write. Default: metrics.png next to the log.
        validation: optional validation.jsonl drawn on the loss panel.
    Returns: path of the written image.

    """
    records = read_metrics(path)
    if out is None:
        out = os.path.join(os.path.dirname(os.path.abspath(path)), 'metrics.png')
    updates = [r['update'] for r in records]
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 9))
    axes[0].plot(updates, [r['loss'] for r in records], label='train loss')
    if validation is not None and os.path.isfile(validation):
        rows = read_metrics(validation)
        axes[0].plot([r['update'] for r in rows], [-r['score'] for r in rows], 'o-', label='-valid score')
    axes[0].set_ylabel('nats / step')
    axes[0].legend()
    axes[1].plot(updates, [r['recon'] for r in records])
    axes[1].set_ylabel('reconstruction')
    axes[2].plot(updates, [r['kl'] for r in records], label='KL')
    axes[2].plot(updates, [r['coeff'] for r in records], label='KL coefficient')
    axes[2].set_ylabel('KL')
    axes[2].set_xlabel('update')
    axes[2].legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    logger.info('metrics plot written to %s', out)
    return out
