"""Smoke test for the `dapnet` Python extension.

Build the module first, either with maturin:

    pip install maturin && maturin develop -m crates/py/Cargo.toml

or directly with cargo:

    cargo build -p dapnet-py --release --features extension-module
    cp target/release/libdapnet_py.so python/dapnet.so
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dapnet


def main():
    points, names = dapnet.generate_scene(extent=20.0, density=1.0, seed=3)
    assert names == ["ground", "roof", "tree", "car"], names
    assert all(p[6] is not None for p in points)
    print(f"scene: {len(points)} points, classes {names}")

    coords = [p[:3] for p in points[:40]]
    picked = dapnet.fps(coords, 5)
    assert len(set(picked)) == 5
    groups = dapnet.ball_query(coords, picked, 2.0, 4)
    assert all(len(g) == 4 and g[0] in range(40) for g in groups)
    feats = [[float(i)] for i in range(len(picked))]
    assert dapnet.idw([coords[i] for i in picked], feats, [coords[picked[2]]])[0] == [2.0]

    assert dapnet.poly_lr(1e-3, 1e-5, 100, 100) == 1e-5

    model = dapnet.Model(names, strategy="PGM", seed=1)
    print(model)
    labels = model.predict(points, block_size=10.0, sample_points=256)
    assert len(labels) == len(points) and all(0 <= l < 4 for l in labels)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = dapnet.Model.load(path)
        assert again.predict(points, block_size=10.0, sample_points=256) == labels

        data = os.path.join(tmp, "scene.pts")
        dapnet.save_pts(data, points, names)
        summary = dapnet.train(
            data, os.path.join(tmp, "run"), epochs=1, block_size=10.0, stride=5.0, min_points=50, sample_points=128
        )
        print(summary)

    report = dapnet.evaluate([p[6] for p in points], labels, names)
    print(f"untrained OA {report['overall_accuracy']:.3f}, avg F1 {report['avg_f1']:.3f}")

    try:
        dapnet.Model(names, strategy="nope")
    except dapnet.DapnetError as e:
        print(f"rejected bad strategy: {e}")
    else:
        raise AssertionError("bad strategy accepted")
    print("ok")


if __name__ == "__main__":
    main()
