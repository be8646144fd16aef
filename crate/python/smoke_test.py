"""Smoke test for the `ptrm` extension module.

Build and install with `maturin develop -m crates/py/Cargo.toml`, or copy the
cdylib from `target/*/libptrm.so` to `ptrm.so` somewhere on `sys.path`.
"""

import json
import math
import tempfile

import ptrm


def main():
    assert ptrm.cost_estimate(3600.0, 2.5) == 2.5
    assert ptrm.cost_estimate(1.44, 2.5) == 0.001

    spec = {
        "seed": 3,
        "augmentation": 2,
        "sudoku4": {"count": 40, "val": 8, "golden": 4},
    }
    train, val, golden = ptrm.build_dataset(json.dumps(spec))
    assert (len(train), len(val), len(golden)) == (56, 8, 4)
    p = val[0]
    assert p.kind == "sudoku4" and len(p.x) == 16

    digits = [t - 1 if t > 1 else 0 for t in p.x]
    solutions = ptrm.solve_sudoku(digits)
    assert len(solutions) == 1
    assert [d + 1 for d in solutions[0]] == p.y
    assert len(ptrm.solve_sudoku([0] * 16, limit=1000)) == 288

    grid = list(range(16))
    assert ptrm.dihedral_transform(ptrm.dihedral_transform(grid, 4, 4, 2), 4, 4, 2) == grid

    model = ptrm.Model.init(13, 16, hidden=16, n_latent=2, t_recursions=2, n_sup=2,
                            q_head="attention-pooled", seed=1)
    assert model.num_parameters > 0
    tokens, q = model.infer(p.x)
    assert len(tokens) == 16 and math.isfinite(q)

    rollouts, chosen = model.ptrm_infer(p.x, k=1, sigma=0.0)
    assert rollouts[0][0] == tokens and 0 <= chosen < 1
    rollouts, chosen = model.ptrm_infer(p.x, k=4, sigma=0.5, seed=7)
    assert len(rollouts) == 4

    cfg = {"batch_size": 8, "chunk_size": 4, "epochs": 1, "lr": 1e-3, "warmup_steps": 2}
    trained, report = model.fit(train, val, json.dumps(cfg))
    assert "steps" in json.loads(report)
    exact, cell = trained.evaluate(val)
    assert 0.0 <= exact <= cell <= 1.0

    with tempfile.TemporaryDirectory() as d:
        trained.save(d)
        again = ptrm.Model.load(d)
        assert again.infer(p.x) == trained.infer(p.x)
        assert json.loads(again.config_json()) == json.loads(trained.config_json())

    correct = [[False, True, False], [False, False, False]]
    assert ptrm.pass_at_k(correct, 1) == 0.0
    assert ptrm.pass_at_k(correct, 2) == 0.5
    assert ptrm.best_q_at_k(correct, [[0.0, 1.0, 2.0], [0.0, 0.0, 0.0]], 3) == 0.0
    assert ptrm.cell_accuracy([2, 3, 0], [2, 4, 0], 0) == 0.5

    rows = [[float(i), 2.0 * i, 0.0] for i in range(5)]
    components, variances, projected = ptrm.pca_project(rows, 1)
    assert abs(variances[0] - 10.0) < 1e-9 and len(projected) == 5

    try:
        ptrm.Model.load("/nonexistent/checkpoint")
    except (IOError, ValueError):
        pass
    else:
        raise AssertionError("loading a missing checkpoint should fail")

    print(f"ptrm {ptrm.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
