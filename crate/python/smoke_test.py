"""Smoke test for the pyppdmpc extension. Build and install it first:
`maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/pyppdmpc-*.whl`,
then run pytest on this file."""

import json
import tempfile
from pathlib import Path

import pyppdmpc


def test_ego_step_translates_at_constant_speed():
    assert pyppdmpc.ego_step([0.0, 0.0, 10.0, 0.0, 0.0], [0.0, 0.0]) == [2.0, 0.0, 10.0, 0.0, 0.0]


def test_default_config_mentions_both_sections():
    text = pyppdmpc.default_config()
    assert "[run]" in text and "[episode.scenario]" in text


def test_episode_log_is_plain_data():
    log = pyppdmpc.run_episode(3, "pp-dmpc", 0.1)
    assert log["outcome"] == "success"
    assert log["controller"] == "pp-dmpc"
    assert len(log["steps"]) > 0
    json.dumps(log)


def test_batch_writes_tables():
    with tempfile.TemporaryDirectory() as d:
        out = Path(d) / "run"
        rows = pyppdmpc.run_batch(str(out), scenarios=1, sigmas=[0.5], controllers=["dc-mpc"])
        assert len(rows) == 1 and rows[0]["episodes"] == 1
        assert (out / "metrics.tsv").read_text().startswith("# ppdmpc-metrics/1")


def test_errors_surface_as_value_error():
    try:
        pyppdmpc.run_episode(0, "bogus", 0.1)
    except ValueError:
        return
    raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
    print("ok")
