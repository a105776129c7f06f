"""Test the embedding data_log module (SDW.data_log).
The logs are written to a temporary run directory and read back.
"""

import os

import numpy as np
import pytest

import SDW
from SDW.data_log import *


def test_metrics_log(tmp_path):
    """One JSON object per line, keys sorted"""
    log = MetricsLog(tmp_path)
    log.append({'update': 1, 'loss': 2.5})
    log.append({'update': 2, 'loss': 2.0})
    log.close()
    assert read_metrics(os.path.join(str(tmp_path), 'metrics.jsonl')) == [{'loss': 2.5, 'update': 1},
                                                                          {'loss': 2.0, 'update': 2}]
    with open(log.filename) as f:
        assert f.readline() == '{"loss": 2.5, "update": 1}\n'


def test_wallclock_header_is_written_once(tmp_path):
    first = WallClockLog(tmp_path)
    first.log_time(1000, 12.0)
    first.close()
    second = WallClockLog(tmp_path)
    second.log_time(2000, 30.0)
    second.close()
    with open(second.filename) as f:
        lines = f.read().splitlines()
    assert lines[0] == ','.join(WALLCLOCK_FIELDS)
    assert len(lines) == 3
    rows = read_wallclock(second.filename)
    assert [r['Update'] for r in rows] == [1000, 2000]
    assert rows[1]['Hours'] == pytest.approx(30.0 / 3600.0, abs=1e-6)


def test_wallclock_is_monotone(tmp_path):
    log = WallClockLog(tmp_path)
    log.log_time(1000, 10.0)
    with pytest.raises(ValueError):
        log.log_time(2000, 5.0)
    log.close()


def test_plot_metrics(tmp_path):
    """Writes an image next to the log"""
    log = MetricsLog(tmp_path)
    for u in range(1, 6):
        log.append({'update': u, 'total': -float(u), 'recon': -float(u), 'kl': 0.1 * u, 'coeff': 0.2,
                    'aux': 0.0, 'lr': 1e-3, 'loss': float(np.exp(-u))})
    log.close()
    valid = MetricsLog(tmp_path, 'validation.jsonl')
    valid.append({'update': 5, 'score': -1.0})
    valid.close()
    out = plot_metrics(log.filename, validation=valid.filename)
    assert out == os.path.join(str(tmp_path), 'metrics.png')
    assert os.path.getsize(out) > 0


if __name__ == "__main__":

    import tempfile
    test_metrics_log(tempfile.mkdtemp())
