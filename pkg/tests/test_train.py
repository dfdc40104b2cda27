import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import kronblock as kb
from kronblock import (
    KronShape,
    LAMBDA_GRID,
    MetricRecord,
    TrainConfig,
    TrainingDivergedError,
    make_teacher_dataset,
    prune_blocks,
    train_group_lasso,
    train_kron,
)
from kronblock.network import build_network, dense_spec, kron_spec, net_backward, net_forward
from kronblock.train import dense_tile_sparsity, net_mask_sparsity, soft_threshold
from kronblock.data import batches


def teacher_zero_mask(teacher, block):
    m2, n2 = block
    m1, n1 = teacher.shape[0] // m2, teacher.shape[1] // n2
    return np.array(
        [
            [np.all(teacher[i * m2 : (i + 1) * m2, j * n2 : (j + 1) * n2] == 0) for j in range(n1)]
            for i in range(m1)
        ]
    )


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0, batch_size=4, learning_rate=0.1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=4, learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=4, learning_rate=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=4, learning_rate=0.1, loss="hinge")


def test_soft_threshold_exact_zeros():
    x = np.array([[0.5, -0.2], [0.05, -0.04]])
    out = soft_threshold(x, 0.1)
    assert np.array_equal(out, np.array([[0.4, -0.1], [0.0, 0.0]]))


@given(seed=st.integers(0, 2**31), t=st.floats(0.0, 2.0))
@settings(max_examples=40, deadline=None)
def test_soft_threshold_properties(seed, t):
    x = np.random.default_rng(seed).standard_normal((3, 4))
    out = soft_threshold(x, t)
    below = np.abs(x) <= t
    assert np.all(out[below] == 0.0)
    assert np.allclose(np.abs(out[~below]), np.abs(x[~below]) - t)
    assert np.array_equal(np.sign(out[~below]), np.sign(x[~below]))


@given(seed=st.integers(0, 2**31), t=st.floats(0.0, 3.0))
@settings(max_examples=40, deadline=None)
def test_group_lasso_prox_properties(seed, t):
    from kronblock.linalg import tile_norms
    from kronblock.train import group_lasso_prox

    w = np.random.default_rng(seed).standard_normal((4, 6))
    before = tile_norms(w, 2, 2)
    group_lasso_prox(w, (2, 2), t)
    after = tile_norms(w, 2, 2)
    died = before <= t
    assert np.all(after[died] == 0.0)
    assert np.allclose(after[~died], before[~died] - t)


def test_lambda_zero_matches_plain_sgd(rng):
    # hand-rolled momentum SGD oracle must coincide bit-for-bit at lam=0
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 32, seed=1, classification=True)
    shape = KronShape(2, 4, 2, 2, 2)
    cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=0.05, momentum=0.9, lam=0.0, seed=4)

    net = build_network([kron_spec(shape)], seed=2)
    oracle = net.copy()
    train_kron(net, ds, cfg)

    f = oracle.layers[0].factor
    vel = {
        "s": np.zeros_like(f.s),
        "a": [np.zeros_like(x) for x in f.a],
        "b": [np.zeros_like(x) for x in f.b],
    }
    for epoch in range(1, cfg.epochs + 1):
        for xb, tb in batches(ds, cfg.batch_size, cfg.shuffle, seed=(cfg.seed, epoch)):
            _, cache = net_forward(oracle, xb)
            _, grads, _ = net_backward(oracle, cache, tb, cfg.loss)
            g = grads[0]
            vel["s"] = cfg.momentum * vel["s"] + g.d_s
            f.s -= cfg.learning_rate * vel["s"]
            for i in range(shape.r):
                vel["a"][i] = cfg.momentum * vel["a"][i] + g.d_a[i]
                f.a[i] -= cfg.learning_rate * vel["a"][i]
                vel["b"][i] = cfg.momentum * vel["b"][i] + g.d_b[i]
                f.b[i] -= cfg.learning_rate * vel["b"][i]

    trained = net.layers[0].factor
    assert np.array_equal(trained.s, f.s)
    for x, y in zip(trained.a + trained.b, f.a + f.b):
        assert np.array_equal(x, y)


def test_huge_lambda_kills_mask_in_one_epoch():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 32, seed=1, classification=True)
    net = build_network([kron_spec(KronShape(2, 4, 2, 2, 2))], seed=2)
    cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=0.1, lam=1e4, seed=4)
    net, records = train_kron(net, ds, cfg)
    assert records[-1].sparsity_rate == 1.0
    assert np.array_equal(net.layers[0].factor.s, np.zeros((2, 4)))


def test_teacher_recovery_with_grid_lambda():
    # noiseless regression teacher: the student's zero tiles must cover the
    # teacher's, with lambda taken from the documented sweep grid
    ds, teacher = make_teacher_dataset(8, 16, (2, 2), 0.6, 512, seed=1, classification=False)
    tz = teacher_zero_mask(teacher, (2, 2))
    net = build_network([kron_spec(KronShape(4, 8, 2, 2, 4))], seed=3)
    lam = LAMBDA_GRID[7]  # 3.16e-2
    cfg = TrainConfig(
        epochs=300, batch_size=16, learning_rate=4e-3, momentum=0.0,
        lam=lam, loss="squared_frobenius", seed=5,
    )
    net, records = train_kron(net, ds, cfg)
    student_zero = np.abs(net.layers[0].factor.s) < 1e-6
    assert np.all(student_zero[tz]), "student failed to zero all teacher-zero tiles"
    assert records[-1].eval_loss < 0.1


def test_mask_entries_exact_zero_or_clearly_nonzero():
    ds, _ = make_teacher_dataset(8, 16, (2, 2), 0.6, 256, seed=2, classification=False)
    net = build_network([kron_spec(KronShape(4, 8, 2, 2, 2))], seed=3)
    cfg = TrainConfig(
        epochs=20, batch_size=16, learning_rate=4e-3, momentum=0.0,
        lam=0.05, loss="squared_frobenius", seed=5,
    )
    net, _ = train_kron(net, ds, cfg)
    s = net.layers[0].factor.s
    assert np.all((s == 0.0) | (np.abs(s) > 1e-300))


def test_group_lasso_lambda_zero_is_plain_sgd(rng):
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 32, seed=1, classification=True)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, momentum=0.9, lam=0.0, seed=4)
    net = build_network([dense_spec(4, 8)], seed=2)
    oracle = net.copy()
    train_group_lasso(net, ds, cfg, (2, 2))

    w = oracle.layers[0].w
    vel = np.zeros_like(w)
    for epoch in range(1, cfg.epochs + 1):
        for xb, tb in batches(ds, cfg.batch_size, cfg.shuffle, seed=(cfg.seed, epoch)):
            _, cache = net_forward(oracle, xb)
            _, grads, _ = net_backward(oracle, cache, tb, cfg.loss)
            vel = cfg.momentum * vel + grads[0].d_w
            w -= cfg.learning_rate * vel
    assert np.array_equal(net.layers[0].w, w)


def test_group_lasso_unexcited_tile_dies(rng):
    # features for tile column 3 are always zero -> that tile sees pure shrinkage
    x = rng.standard_normal((64, 8))
    x[:, 6:8] = 0.0
    teacher = rng.standard_normal((4, 8))
    ds = kb.Dataset(x, y=x @ teacher.T)
    net = build_network([dense_spec(4, 8)], seed=2)
    cfg = TrainConfig(
        epochs=80, batch_size=16, learning_rate=2e-3, momentum=0.0,
        lam=3.0, loss="squared_frobenius", seed=4,
    )
    net, _ = train_group_lasso(net, ds, cfg, (2, 2))
    w = net.layers[0].w
    assert np.array_equal(w[:, 6:8], np.zeros((4, 2)))
    assert np.all(np.abs(w[:, :6]) > 0)  # excited tiles survive


def test_group_lasso_tiles_exact_zero_or_positive_norm():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 64, seed=3, classification=True)
    net = build_network([dense_spec(4, 8)], seed=2)
    cfg = TrainConfig(epochs=30, batch_size=16, learning_rate=0.3, momentum=0.0, lam=0.05, seed=4)
    net, _ = train_group_lasso(net, ds, cfg, (2, 2))
    from kronblock.linalg import tile_norms

    norms = tile_norms(net.layers[0].w, 2, 2)
    assert np.all((norms == 0.0) | (norms > 1e-300))


def test_group_lasso_loss_parity_with_kron():
    # noisy regression teacher: both trainers reach the held-out noise floor
    ds, _ = make_teacher_dataset(8, 16, (2, 2), 0.5, 2048, noise_sigma=0.3, seed=6)
    tr, te = kb.train_test_split(ds, 0.25, seed=6)
    cfg = TrainConfig(
        epochs=100, batch_size=32, learning_rate=1e-3, momentum=0.0,
        lam=0.0, loss="squared_frobenius", seed=4,
    )
    knet = build_network([kron_spec(KronShape(4, 8, 2, 2, 4))], seed=2)
    _, krecs = train_kron(knet, tr, cfg, eval_data=te)
    gnet = build_network([dense_spec(8, 16)], seed=2)
    _, grecs = train_group_lasso(gnet, tr, cfg, (2, 2), eval_data=te)
    assert abs(grecs[-1].eval_loss - krecs[-1].eval_loss) <= 0.10 * krecs[-1].eval_loss


def test_group_lasso_requires_dense_net(rng):
    net = build_network([kron_spec(KronShape(2, 4, 2, 2, 1))], seed=0)
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 16, seed=1, classification=True)
    cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=0.1)
    with pytest.raises(ValueError):
        train_group_lasso(net, ds, cfg, (2, 2))


def test_prune_zero_target_keeps_everything():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 32, seed=1, classification=True)
    net = build_network([dense_spec(4, 8)], seed=2)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, seed=4)
    net, records = prune_blocks(net, ds, cfg, (2, 2), target_rate=0.0, rounds=1)
    assert records[-1].sparsity_rate == 0.0


def test_prune_hits_exact_half():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 32, seed=1, classification=True)
    net = build_network([dense_spec(4, 8)], seed=2)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, seed=4)
    net, records = prune_blocks(net, ds, cfg, (2, 2), target_rate=0.5, rounds=1)
    assert records[-1].sparsity_rate == 0.5
    assert dense_tile_sparsity(net, (2, 2)) == 0.5


def test_prune_tie_break_row_major():
    ds, _ = make_teacher_dataset(4, 4, (2, 2), 0.0, 8, seed=1, classification=True)
    net = build_network([dense_spec(4, 4)], seed=2)
    net.layers[0].w[:] = 1.0  # all tiles tie
    # learning rate small enough that updates underflow: weights stay bit-exact
    cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=1e-300, momentum=0.0, seed=4)
    net, _ = prune_blocks(net, ds, cfg, (2, 2), target_rate=0.5, rounds=1)
    from kronblock.linalg import tile_norms

    norms = tile_norms(net.layers[0].w, 2, 2)
    # row-major first two tiles (0,0) and (0,1) pruned
    assert norms[0, 0] == 0.0 and norms[0, 1] == 0.0
    assert norms[1, 0] > 0.0 and norms[1, 1] > 0.0


def test_prune_rate_validation():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 16, seed=1, classification=True)
    net = build_network([dense_spec(4, 8)], seed=2)
    cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=0.05)
    with pytest.raises(ValueError):
        prune_blocks(net, ds, cfg, (2, 2), target_rate=1.0, rounds=1)


def test_prune_accuracy_parity_with_kron():
    # matched ~50% sparsity on the classification teacher task
    ds, _ = make_teacher_dataset(8, 16, (2, 2), 0.5, 1024, seed=9, classification=True)
    tr, te = kb.train_test_split(ds, 0.25, seed=9)
    pnet = build_network([dense_spec(8, 16)], seed=2)
    pcfg = TrainConfig(epochs=120, batch_size=tr.n, learning_rate=0.5, momentum=0.9, seed=4)
    pnet, precs = prune_blocks(pnet, tr, pcfg, (2, 2), target_rate=0.5, rounds=2, eval_data=te)

    knet = build_network([kron_spec(KronShape(4, 8, 2, 2, 4))], seed=2)
    kcfg = TrainConfig(
        epochs=360, batch_size=tr.n, learning_rate=0.5, momentum=0.9, lam=0.055, seed=4
    )
    knet, krecs = train_kron(knet, tr, kcfg, eval_data=te)
    assert abs(krecs[-1].sparsity_rate - precs[-1].sparsity_rate) <= 0.15
    assert abs(krecs[-1].accuracy - precs[-1].accuracy) <= 0.05


def test_determinism_bit_identical_metrics():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 64, seed=1, classification=True)
    runs = []
    for _ in range(2):
        net = build_network([kron_spec(KronShape(2, 4, 2, 2, 2))], seed=2)
        cfg = TrainConfig(epochs=3, batch_size=16, learning_rate=0.1, lam=0.01, seed=4)
        _, records = train_kron(net, ds, cfg)
        runs.append([r.to_dict() for r in records])
    assert runs[0] == runs[1]


def test_monotone_sparsity_in_lambda():
    # >= 5 documented grid points on the regression teacher task
    ds, _ = make_teacher_dataset(8, 16, (2, 2), 0.6, 512, seed=1, classification=False)
    rates = []
    for lam in LAMBDA_GRID[4:]:  # 1e-3 .. 1e-1
        net = build_network([kron_spec(KronShape(4, 8, 2, 2, 4))], seed=3)
        cfg = TrainConfig(
            epochs=120, batch_size=16, learning_rate=4e-3, momentum=0.0,
            lam=lam, loss="squared_frobenius", seed=5,
        )
        _, records = train_kron(net, ds, cfg)
        rates.append(records[-1].sparsity_rate)
    assert all(b >= a for a, b in zip(rates, rates[1:])), rates
    assert rates[-1] > rates[0]  # the grid spans a meaningful response


def test_loss_decreases_over_first_epoch():
    ds, _ = make_teacher_dataset(8, 16, (2, 2), 0.6, 256, seed=1, classification=False)
    net = build_network([kron_spec(KronShape(4, 8, 2, 2, 4))], seed=3)
    out, _ = net_forward(net, ds.x)
    initial = float(np.sum((out - ds.y) ** 2))
    cfg = TrainConfig(
        epochs=1, batch_size=16, learning_rate=4e-3, momentum=0.0,
        lam=0.0, loss="squared_frobenius", seed=5,
    )
    _, records = train_kron(net, ds, cfg)
    assert records[0].eval_loss < initial


def test_divergence_guard():
    ds, _ = make_teacher_dataset(8, 16, (2, 2), 0.5, 64, seed=1, classification=False)
    net = build_network([kron_spec(KronShape(4, 8, 2, 2, 2))], seed=3)
    cfg = TrainConfig(epochs=50, batch_size=16, learning_rate=5.0, loss="squared_frobenius", seed=5)
    with pytest.raises(TrainingDivergedError):
        train_kron(net, ds, cfg)


def test_metric_record_fields_filled():
    ds, _ = make_teacher_dataset(4, 8, (2, 2), 0.5, 64, seed=1, classification=True)
    net = build_network([kron_spec(KronShape(2, 4, 2, 2, 2))], seed=2)
    cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=0.1, lam=0.01, seed=4)
    _, records = train_kron(net, ds, cfg)
    assert len(records) == 2
    rec = records[-1]
    assert isinstance(rec, MetricRecord)
    assert rec.epoch == 2
    assert np.isfinite(rec.train_loss) and np.isfinite(rec.eval_loss)
    assert 0.0 <= rec.accuracy <= 1.0
    assert 0.0 <= rec.sparsity_rate <= 1.0
    assert rec.trainable_params == kb.count_params(KronShape(2, 4, 2, 2, 2))
    assert rec.forward_flops > 0 and rec.backward_flops > 0


def test_mixed_net_sparsity_counts_only_masks(rng):
    net = build_network([kron_spec(KronShape(2, 4, 2, 2, 1)), dense_spec(3, 4)], seed=0)
    net.layers[0].factor.s[:] = 0.0
    assert net_mask_sparsity(net) == 1.0
