"""Smoke test for the extension module.

Build it with `cargo build -p h2mt-py` and copy target/debug/libh2mt.so to
python/h2mt.so, then run `python3 python/smoke_test.py`.
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import h2mt  # noqa: E402

DOC = """# Guide
How the system is organised.

## Storage
Blocks are written once and never edited.

## Network
Peers gossip membership every second.
"""


def main():
    assert h2mt.encode("ab") == [97, 98]
    assert h2mt.decode(h2mt.encode("hello")) == "hello"
    assert abs(h2mt.rouge_l("the cat sat", "the cat ran") - 2 / 3) < 1e-12
    assert h2mt.token_f1("a b", "c d") == 0.0
    ratio = h2mt.cost_model(16, 4096) / h2mt.cost_model(16, 64)
    assert math.isclose(ratio, (4112 / 80) ** 2)

    tree = h2mt.build_tree(DOC, "md", 64)
    nodes = json.loads(tree)
    assert nodes["children"], "tree has sections"

    cache = h2mt.memorize(tree, "mean", 3)
    assert cache[:4] == b"H2MC"
    assert cache == h2mt.memorize(tree, "mean", 3)
    entries = h2mt.cache_entries(cache)
    assert all(len(v) == 64 for _, v in entries)

    answer, trace = h2mt.ask(tree, cache, "how often do peers gossip?", max_new_tokens=4)
    answer, trace = json.loads(answer), json.loads(trace)
    assert answer["retrieved"] == trace["retrieved"]
    assert len(answer["tokens"]) <= 4
    assert answer["n_ret"] <= 64

    try:
        h2mt.ask(tree, cache, "q", seed=4)
    except ValueError as e:
        assert "mismatch" in str(e)
    else:
        raise AssertionError("a cache from another seed must be rejected")
    print("smoke test passed")


if __name__ == "__main__":
    main()
