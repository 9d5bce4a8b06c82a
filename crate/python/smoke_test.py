"""Smoke test for the `nsn` Python extension.

Builds the extension with cargo, loads it from a temporary directory and
exercises the main entry points. Run from anywhere:

    python3 python/smoke_test.py
"""

import importlib.util
import math
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_and_import():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "nsn-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    built = os.path.join(target, "release", "libnsn.so")
    if sys.platform == "darwin":
        built = built[:-3] + ".dylib"
    out_dir = tempfile.mkdtemp(prefix="nsn-py-")
    dest = os.path.join(out_dir, "nsn" + sysconfig.get_config_var("EXT_SUFFIX"))
    shutil.copyfile(built, dest)
    spec = importlib.util.spec_from_file_location("nsn", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module, out_dir


def main():
    nsn, tmp = build_and_import()

    assert nsn.flops_linear(64, 128, 4) == 2 * 4 * (64 + 128)
    assert nsn.flops_linear(64, 128) == 2 * 64 * 128
    assert nsn.break_even_rank(64, 128) == 42

    u, s, vt = nsn.svd([[3.0, 0.0], [0.0, 1.0]])
    assert [round(v, 12) for v in s] == [3.0, 1.0]

    x, y = nsn.synth_clusters(0, num_classes=3, dim=8, per_class=30)
    assert len(x) == 90 and len(x[0]) == 8 and sorted(set(y)) == [0, 1, 2]

    model = nsn.Model.mlp([8, 16, 3], max_rank=8, seed=1)
    assert model.max_rank == 8 and model.num_layers == 2
    logits = model.forward(x[:5], rank=2)
    assert len(logits) == 5 and len(logits[0]) == 3
    assert model.flops(2) < model.flops(8)

    w2, w4 = model.weight(0, 2), model.weight(0, 4)
    assert nsn.containment_score(w2, w4, 2, 4) > 1 - 1e-8

    config = "[train]\nepochs = 5\nbatch_size = 16\nanchor_rank = 8\nrank_pool = [1, 2, 4]\ninterpolated_eval_ranks = [3]\n"
    trained = nsn.train(model, x, y, config=config)
    assert set(trained.s) == {1, 2, 4, 8}
    loss, acc = nsn.evaluate(trained, x, y, rank=8)
    assert math.isfinite(loss) and 0.0 <= acc <= 1.0

    path = os.path.join(tmp, "m.nsnc")
    trained.save(path)
    again = nsn.Model.load(path)
    assert again.forward(x[:3], rank=4) == trained.forward(x[:3], rank=4)

    dense = nsn.Model.mlp([8, 16, 3], seed=2)
    replaced = nsn.surgery(dense)
    assert replaced.nsn_layer_count == 2
    a, b = dense.forward(x[:10]), replaced.forward(x[:10])
    err = max(abs(p - q) for ra, rb in zip(a, b) for p, q in zip(ra, rb))
    assert err < 1e-9, err

    try:
        model.forward(x[:1], rank=0)
    except nsn.NsnError as e:
        assert "rank" in str(e)
    else:
        raise AssertionError("rank 0 accepted")

    shutil.rmtree(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
