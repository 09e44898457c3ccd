"""
Tests for settings loading, worker helpers and logging setup
"""

import logging
import os
import threading

import pytest

from latentmatch.exceptions import ConfigError
from latentmatch.logger import resident_memory_bytes, setup_logging
from latentmatch.parallel import chunked, fixed_blocks, ordered_map, resolve_workers, worker_pool
from latentmatch.settings import DEFAULTS, load_settings


def test_defaults_without_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert load_settings() == DEFAULTS


def test_settings_file_overrides_defaults(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text('{"training": {"dim": 7}, "ranking": {"mode": "bm25"}, "extra": {}}',
                    encoding='utf-8')
    settings = load_settings(str(path))
    assert settings["training"]["dim"] == 7
    assert settings["training"]["lambda2"] == DEFAULTS["training"]["lambda2"]
    assert settings["ranking"]["mode"] == "bm25"
    assert "extra" not in settings
    assert DEFAULTS["training"]["dim"] == 100


def test_settings_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text('{"training": ', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_settings(str(broken))


def test_fixed_blocks():
    assert fixed_blocks(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert fixed_blocks(0, 4) == []
    with pytest.raises(ValueError):
        fixed_blocks(5, 0)


def test_chunked():
    assert list(chunked(range(7), 3)) == [[0, 1, 2], [3, 4, 5], [6]]
    assert list(chunked([], 3)) == []


def test_ordered_map_keeps_input_order():
    items = list(range(20))
    assert ordered_map(lambda x: x * x, items, workers=4) == [x * x for x in items]


def test_worker_pool_reuses_its_threads():
    def thread_id(_):
        return threading.get_ident()

    with worker_pool(3) as pool:
        assert pool is not None
        first = ordered_map(thread_id, range(30), workers=3)
        second = ordered_map(thread_id, range(30), workers=3)
    assert len(set(first) | set(second)) <= 3

    with worker_pool(1) as pool:
        assert pool is None
        assert ordered_map(thread_id, range(3), workers=1) == [threading.get_ident()] * 3


def test_worker_pool_tasks_can_map_again():
    def inner_sum(n):
        return sum(ordered_map(lambda x: x, list(range(n)), workers=2))

    with worker_pool(2):
        assert ordered_map(inner_sum, [3, 4, 5], workers=2) == [3, 6, 10]


def test_resolve_workers():
    assert resolve_workers(3) == 3
    assert resolve_workers(None) >= 1
    assert resolve_workers(0) >= 1
    with pytest.raises(ValueError):
        resolve_workers(-1)


def test_setup_logging_writes_rotating_files(tmp_path):
    log_dir = str(tmp_path / "logs")
    setup_logging(debug=True, log_dir=log_dir)
    logging.getLogger("latentmatch.test").debug("hello")
    logging.getLogger("training").info("iter 1")
    for handler in logging.getLogger().handlers + logging.getLogger("training").handlers:
        handler.flush()

    with open(os.path.join(log_dir, "latentmatch.log"), encoding="utf-8") as f:
        general = f.read()
    with open(os.path.join(log_dir, "training.log"), encoding="utf-8") as f:
        training = f.read()
    assert "hello" in general
    assert "iter 1" in training
    assert "iter 1" not in general
    assert "hello" not in training
    assert not logging.getLogger("training").propagate
    assert resident_memory_bytes() > 0
    setup_logging()
