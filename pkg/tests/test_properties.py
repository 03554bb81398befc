"""Property-based checks of the core invariants."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forgetd import checkpoint, ledger as L
from forgetd.data import Dataset, flip_labels, make_batch_plan, split_target
from forgetd.ledger import Ledger, PrunePlan, apply_mask, make_prune_mask, record_update
from forgetd.nn import Arch, ModelParams, dense, param_axpy, sgd_step
from forgetd.unlearn import SelectionPlan, make_selection_mask

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
fractions = st.floats(0.0, 1.0)


@given(size=st.integers(1, 300), q=st.floats(0.001, 1.0), stride=st.integers(0, 20), e=st.integers(0, 1000))
def test_selection_count_is_shift_invariant(size, q, stride, e):
    plan = SelectionPlan((q,), stride=stride)
    m0 = make_selection_mask(plan, 0, size, 0)
    m = make_selection_mask(plan, 0, size, e)
    assert m.sum() == m0.sum() == int(np.floor(q * size + 0.5))
    np.testing.assert_array_equal(m, np.roll(m0, e * stride))


@given(values=arrays(np.float64, st.integers(1, 200), elements=finite), p=fractions)
def test_magnitude_mask_dominance(values, p):
    m = make_prune_mask(PrunePlan("magnitude", (p,)), 0, values.size, values)
    assert (~m).sum() == int(np.floor(p * values.size + 0.5))
    if m.any() and (~m).any():
        assert np.abs(values[m]).min() >= np.abs(values[~m]).max()


@given(values=arrays(np.float64, st.integers(1, 100), elements=finite), data=st.data())
def test_apply_mask_is_hadamard(values, data):
    mask = data.draw(arrays(np.bool_, values.size))
    out = apply_mask(values, mask)
    np.testing.assert_array_equal(out.to_dense(), np.where(mask, values, 0.0))
    assert out.encoding == (1 if (~mask).mean() >= 0.5 else 0)


@settings(max_examples=40, deadline=None)
@given(
    deltas=st.lists(arrays(np.float64, 7, elements=finite), min_size=0, max_size=5),
    strategy=st.sampled_from(["full", "random", "magnitude", "global"]),
    p=fractions,
    ids=st.lists(st.integers(0, 2**64 - 1), max_size=4, unique=True),
)
def test_ledger_round_trip(deltas, strategy, p, ids):
    arch = Arch.of([dense(2, 2), dense(2, 1)])  # layer sizes 6 and 3
    sizes = arch.layer_sizes()
    plan = None if strategy == "full" else PrunePlan(strategy, (p,) if strategy == "global" else (p, p))
    led = Ledger.create(arch, 1, len(deltas), plan)
    for b, d in enumerate(deltas):
        flat = np.resize(d, sum(sizes))
        record_update(led, 0, b, ids, [flat[:sizes[0]], flat[sizes[0]:]])
    buf = L.to_bytes(led)
    back = L.from_bytes(buf)
    assert back.equals(led) and L.to_bytes(back) == buf == bytes(buf)
    assert L.ledger_size_bytes(led) == len(buf)


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_checkpoint_round_trip(data):
    arch = Arch.of([dense(3, 2), dense(2, 2)])
    layers = [(data.draw(arrays(np.float64, ws, elements=finite)), data.draw(arrays(np.float64, bs, elements=finite)))
              for ws, bs in arch.param_shapes()]
    p = ModelParams(arch, layers)
    buf = checkpoint.to_bytes(p)
    q = checkpoint.from_bytes(buf)
    assert q.bitwise_equal(p) and checkpoint.to_bytes(q) == buf


@settings(max_examples=60)
@given(w=arrays(np.float64, (2, 3), elements=finite), g=arrays(np.float64, (2, 3), elements=finite),
       lr=st.floats(0.0, 10.0))
def test_step_delta_replays_bitwise(w, g, lr):
    arch = Arch.of([dense(2, 3)])
    p = ModelParams(arch, [(w, np.zeros(3))])
    grads = ModelParams(arch, [(g, np.ones(3))])
    new, delta = sgd_step(p, grads, lr)
    assert param_axpy(p, 1, delta).bitwise_equal(new)


@given(labels=st.lists(st.integers(0, 5), min_size=1, max_size=60), seed=st.integers(0, 2**32))
def test_flip_validity(labels, seed):
    n = len(labels)
    ds = Dataset(np.zeros((n, 1)), labels, np.arange(n), 6)
    f = flip_labels(ds, 6, seed)
    assert (f.labels != ds.labels).all() and ((f.labels >= 0) & (f.labels < 6)).all()


@given(n=st.integers(1, 80), bs=st.integers(1, 30), epochs=st.integers(1, 3), seed=st.integers(0, 99))
def test_plan_covers_each_epoch(n, bs, epochs, seed):
    ds = Dataset(np.zeros((n, 1)), np.zeros(n, int), np.arange(n) * 7 + 3, 1)
    plan = make_batch_plan(ds, bs, epochs, seed)
    for batches in plan.epochs:
        assert all(len(b) == bs for b in batches[:-1]) and 1 <= len(batches[-1]) <= bs
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)), ds.sample_ids)


@given(labels=st.lists(st.integers(0, 3), min_size=2, max_size=50), data=st.data())
def test_split_is_a_partition(labels, data):
    n = len(labels)
    ds = Dataset(np.zeros((n, 1)), labels, np.arange(n), 4)
    ids = data.draw(st.sets(st.integers(0, n - 1), min_size=1))
    sp = split_target(ds, ids)
    t, r = set(sp.targeted.sample_ids.tolist()), set(sp.retained.sample_ids.tolist())
    assert t == ids and not t & r and t | r == set(range(n))
