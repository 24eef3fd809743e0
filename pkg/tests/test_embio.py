import io

import numpy as np
import pytest

from neggrounding import embio
from neggrounding.errors import FormatError


def test_blocks_back_to_back():
    first = np.arange(6, dtype=np.float32).reshape(2, 3)
    second = np.array([[0.5, -0.25]], dtype=np.float32)
    buf = io.BytesIO()
    embio.write_block(buf, first)
    embio.write_block(buf, second)
    buf.seek(0)
    blocks = list(embio.iter_blocks(buf))
    assert len(blocks) == 2
    np.testing.assert_array_equal(blocks[0], first)
    np.testing.assert_array_equal(blocks[1], second)


def test_header_layout():
    buf = io.BytesIO()
    embio.write_block(buf, np.ones((2, 5)))
    raw = buf.getvalue()
    assert raw[:4] == b"EMB1"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 5
    assert len(raw) == 12 + 4 * 10


def test_bad_magic():
    with pytest.raises(FormatError, match="bad magic"):
        embio.read_block(io.BytesIO(b"EMB2" + bytes(8)))


@pytest.mark.parametrize("cut", [2, 13])
def test_truncated(cut):
    buf = io.BytesIO()
    embio.write_block(buf, np.ones((2, 2)))
    with pytest.raises(FormatError, match="truncated"):
        embio.read_block(io.BytesIO(buf.getvalue()[:cut]))


def test_is_binary(tmp_path):
    binary = tmp_path / "emb.bin"
    with open(binary, "wb") as fh:
        embio.write_block(fh, np.zeros((1, 1)))
    text = tmp_path / "emb.jsonl"
    text.write_text('{"caption": "dog", "embeddings": [[0.0]]}\n', encoding="utf-8")
    assert embio.is_binary(binary)
    assert not embio.is_binary(text)


def test_jsonl_reader():
    lines = ['{"caption": "a dog", "embeddings": [[1, 2], [3, 4]]}', "", '{"caption": "no cat", "embeddings": [[0, 1]]}']
    records = list(embio.iter_jsonl(lines))
    assert [c for c, _ in records] == ["a dog", "no cat"]
    assert records[0][1].shape == (2, 2)
    assert records[0][1].dtype == np.float64


def test_jsonl_reader_reports_line():
    with pytest.raises(FormatError, match="line 2"):
        list(embio.iter_jsonl(['{"caption": "a", "embeddings": [[1]]}', '{"caption": "b"}']))


def test_jsonl_writer():
    out = io.StringIO()
    embio.write_jsonl(out, "cat not lying", {"rows": [[0.5]]})
    assert out.getvalue() == '{"caption": "cat not lying", "rows": [[0.5]]}\n'
