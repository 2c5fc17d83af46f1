import warnings

import pytest

from posh.config import (
    Config,
    ConfigError,
    DefaultChoiceWarning,
    parse_coll_algo,
    segment_name,
)


def test_segment_name():
    assert segment_name("abc", 3) == "posh-abc-3"


@pytest.mark.parametrize(
    "value, expect",
    [
        ("linear-put,recursive-doubling", ("linear-put", "recursive-doubling")),
        ("recursive-doubling, binomial-tree", ("binomial-tree", "recursive-doubling")),
        ("broadcast=linear-put,reduce=linear-gather", ("linear-put", "linear-gather")),
    ],
)
def test_parse_coll_algo(value, expect):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert parse_coll_algo(value) == expect


def test_missing_algorithm_warns_and_defaults():
    with pytest.warns(DefaultChoiceWarning, match="reduce"):
        assert parse_coll_algo("linear-put") == ("linear-put", "linear-gather")
    with pytest.warns(DefaultChoiceWarning):
        assert parse_coll_algo(None) == ("binomial-tree", "linear-gather")


@pytest.mark.parametrize("bad", ["quantum-tree", "reduce=linear-put", "broadcast=linear-gather"])
def test_unknown_algorithm_rejected(bad):
    with pytest.raises(ConfigError):
        parse_coll_algo(bad)


def test_from_env():
    env = {
        "POSH_RANK": "2",
        "POSH_NPES": "4",
        "POSH_JOBID": "j1",
        "POSH_HEAP_SIZE": "1048576",
        "POSH_SAFE": "1",
        "POSH_DEBUG": "0",
        "POSH_DEBUG_HOLD_RANK": "3",
        "POSH_COLL_ALGO": "linear-put,recursive-doubling",
        "POSH_COPY": "wideblock",
    }
    cfg = Config.from_env(env)
    assert (cfg.rank, cfg.npes, cfg.jobid, cfg.heap_size) == (2, 4, "j1", 1 << 20)
    assert cfg.safe and not cfg.debug and cfg.debug_hold_rank == 3
    assert (cfg.broadcast_algo, cfg.reduce_algo, cfg.copy_strategy) == (
        "linear-put",
        "recursive-doubling",
        "wideblock",
    )


def test_from_env_defaults_and_overrides():
    cfg = Config.from_env({"POSH_COLL_ALGO": "linear-put,linear-gather"}, heap_size=8192 * 4)
    assert cfg.rank == 0 and cfg.npes == 1 and cfg.jobid.startswith("solo")
    assert cfg.heap_size == 32768 and cfg.debug_hold_rank is None and cfg.copy_strategy is None
    with pytest.raises(ConfigError):
        Config.from_env({"POSH_COLL_ALGO": "linear-put,linear-gather"}, bogus=1)
    with pytest.raises(ConfigError):
        Config.from_env({"POSH_RANK": "4", "POSH_NPES": "4", "POSH_COLL_ALGO": "linear-put,linear-gather"})
