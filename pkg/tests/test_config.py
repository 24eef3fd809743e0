import json

import pytest

from neggrounding.config import ToolConfig, load_config
from neggrounding.errors import MalformedConfig, UnknownKey
from neggrounding.metrics import Protocol


def write(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding="utf-8")
    return path


def test_defaults():
    cfg = load_config()
    assert cfg == ToolConfig()
    assert (cfg.beta, cfg.iou_thresh, cfg.retry_limit, cfg.max_area_ratio) == (2.0, 0.5, 3, 0.85)
    assert cfg.protocol is Protocol.COCO


def test_file_then_overrides(tmp_path):
    path = write(tmp_path, {"beta": 4.0, "protocol": "ap50", "parallelism": 2})
    cfg = load_config(path, {"beta": 1.5, "iou_thresh": None})
    assert cfg.beta == 1.5
    assert cfg.iou_thresh == 0.5
    assert cfg.protocol is Protocol.AP50
    assert cfg.parallelism == 2


def test_unknown_key(tmp_path):
    with pytest.raises(UnknownKey, match="gamma"):
        load_config(write(tmp_path, {"gamma": 3}))


def test_unknown_key_is_malformed(tmp_path):
    with pytest.raises(MalformedConfig):
        load_config(write(tmp_path, {"beta": 2.0, "bogus": True}))


@pytest.mark.parametrize(
    "payload",
    ["{not json", "[1, 2]", {"beta": -1}, {"beta": 0}, {"iou_thresh": 1.5}, {"retry_limit": -1}, {"protocol": "voc"}],
)
def test_malformed(tmp_path, payload):
    with pytest.raises(MalformedConfig):
        load_config(write(tmp_path, payload))


def test_missing_file(tmp_path):
    with pytest.raises(MalformedConfig):
        load_config(tmp_path / "absent.json")


def test_frozen():
    cfg = load_config()
    with pytest.raises(Exception):
        cfg.beta = 3.0


def test_cue_file_from_file(tmp_path):
    cfg = load_config(write(tmp_path, {"cue_file": "domain_cues.txt"}))
    assert str(cfg.cue_file) == "domain_cues.txt"
    assert ToolConfig().cue_file is None
