"""Builds the extension module and exercises the main bindings.

Usage: python3 python/smoke_test.py
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_module():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "condense-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    out = tempfile.mkdtemp(prefix="condense-py-")
    shutil.copy(os.path.join(target, "release", "libcondense.so"), os.path.join(out, "condense.so"))
    sys.path.insert(0, out)


def main():
    build_module()
    import condense

    star = condense.Graph.star(2)
    assert star.sources() == [0, 1]
    assert star.min_cut(3) == 1
    assert condense.linear_identity_check(star, 3)[3] == "not solvable (cut 1 < N=2)"

    gf = condense.Field(8)
    assert gf.order == 256
    assert gf.mul(0x53, 0xCA) == 0x01
    assert gf.mul(0x53, gf.inv(0x53)) == 1
    assert gf.rank([[1, 2], [2, 4]]) == 1

    _, trials, p = condense.rlnc_recovery(star, 2, 2, 20000, seed=1)
    assert trials == 20000 and abs(p - 0.375) < 0.02, p
    assert abs(condense.full_rank_probability(2, 2, 2) - 0.375) < 1e-15

    tree = condense.Graph.binary_tree(6)
    nfc, fwd, ratio = condense.compare_costs(tree, "average", 1, packet_len=64)
    assert (nfc, fwd) == (126 * 65, 64 * 6 * 64)
    assert ratio == fwd / nfc

    result = condense.run_scenario(condense.Graph.star(10), "consensus", 500, seed=3, source_mean=5.0)
    assert abs(result.headline - 5.0) < 0.1, result.headline
    assert result.trajectory_csv().startswith("generation,value,dropped_nodes,lost_messages\n")
    again = condense.run_scenario(condense.Graph.star(10), "consensus", 500, seed=3, source_mean=5.0)
    assert again.arc_generation_csv() == result.arc_generation_csv()

    neural = condense.run_scenario(condense.Graph.binary_tree(2), "neural", 200, seed=2, node_dropout_p=0.2)
    assert all(math.isfinite(v) for _, v, _, _ in neural.trajectory())

    verdict, _, witness = condense.solvability_search(star, "xor")
    assert verdict == "yes" and witness is not None
    assert condense.solvability_search(star, "identity")[0] == "no"

    try:
        condense.Graph.from_arcs(["source", "atomic", "destination"], [(0, 1), (1, 0), (1, 2)], mode="dag")
    except ValueError as e:
        assert "cycle" in str(e)
    else:
        raise AssertionError("cycle accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
