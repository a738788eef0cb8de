import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from byomkit import byom
from byomkit.checkpoint_store import Checkpoint, LoraFile, SparseDelta, fingerprint
from byomkit.errors import (
    FingerprintMismatch,
    IndexOutOfRange,
    InnerDimMismatch,
    KeyMismatch,
    RankOutOfRange,
    RatioOutOfRange,
    TargetMissing,
)
from byomkit.merging import MergeSpec


def ck(**tensors):
    return Checkpoint({k: np.asarray(v, np.float32) for k, v in tensors.items()})


def lora(rng, d_out=8, d_in=6, r=3, names=("W",), base=None):
    fp = fingerprint(base) if base is not None else "0" * 64
    return LoraFile(
        {n: (rng.standard_normal((d_out, r)), rng.standard_normal((d_in, r))) for n in names}, "factor", fp
    )


def test_post_prune_example():
    out = byom.post_prune(ck(w=[0, 0, 0, 0]), [ck(w=[3, -1, 0.5, -4])], 0.5)
    d = out.deltas[0]
    assert d.indices["w"].tolist() == [0, 3] and d.values["w"].tolist() == [3, -4]
    assert d.base_kind == "pretrained" and d.base_fingerprint == fingerprint(out.base)


def test_post_prune_keep_all_is_lossless(rng, make_ckpt):
    base = make_ckpt(rng)
    tasks = [make_ckpt(rng) for _ in range(3)]
    pruned = byom.post_prune(base, tasks, 1.0)
    for t, task in enumerate(tasks):
        got = byom.materialize_task_model(pruned, t)
        for k in base.tensors:
            np.testing.assert_allclose(got.tensors[k], task.tensors[k], atol=1e-6)


def test_zero_task_vector_keeps_count_with_zeros(rng, make_ckpt):
    base = make_ckpt(rng)
    d = byom.post_prune(base, [base], 0.25).deltas[0]
    n = base.num_params()
    assert d.kept() == int(np.ceil(0.25 * n))
    assert all(np.all(v == 0) for v in d.values.values())
    assert byom.materialize_task_model(byom.post_prune(base, [base], 0.25), 0).tensors["w"].tobytes() == base.tensors["w"].tobytes()


def test_byom_fft_scalar_trace():
    out = byom.byom_fft(ck(w=[0]), [ck(w=[10]), ck(w=[-10])], 1.0, MergeSpec(lam=0.3))
    assert out.base.tensors["w"].tolist() == [0]
    assert [d.values["w"].tolist() for d in out.deltas] == [[10], [-10]]
    assert all(d.base_kind == "merged" for d in out.deltas)


def test_byom_fft_single_task_telescopes(rng, make_ckpt):
    base, task = make_ckpt(rng), make_ckpt(rng)
    out = byom.byom_fft(base, [task], 0.1, MergeSpec(lam=1.0))
    for k in base.tensors:
        np.testing.assert_allclose(out.base.tensors[k], task.tensors[k], atol=1e-6)
        np.testing.assert_allclose(byom.materialize_task_model(out, 0).tensors[k], task.tensors[k], atol=1e-6)


@pytest.mark.parametrize("method", ["task_arithmetic", "weighted_average", "ties"])
def test_byom_fft_keep_all_cancels_any_merge(method, rng, make_ckpt):
    base = make_ckpt(rng)
    tasks = [make_ckpt(rng) for _ in range(4)]
    spec = MergeSpec(method, weights=[0.25] * 4)
    out = byom.byom_fft(base, tasks, 1.0, spec)
    for t, task in enumerate(tasks):
        got = byom.materialize_task_model(out, t)
        for k in base.tensors:
            np.testing.assert_allclose(got.tensors[k], task.tensors[k], atol=1e-5)


def test_byom_fft_accepts_external_merged_base(rng, make_ckpt):
    base = make_ckpt(rng)
    tasks = [make_ckpt(rng) for _ in range(2)]
    merged = make_ckpt(rng)
    merged.metadata["merge_method"] = "regmean"
    out = byom.byom_fft(base, tasks, 0.5, merged)
    assert out.merge_provenance == "regmean" and out.deltas[0].base_fingerprint == fingerprint(merged)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_kept_count_is_ceil(seed, m):
    rng = np.random.default_rng(seed)
    shapes = {"a": (int(rng.integers(1, 9)), 3), "b": (int(rng.integers(1, 9)),)}
    base = Checkpoint({k: rng.standard_normal(s) for k, s in shapes.items()})
    task = Checkpoint({k: rng.standard_normal(s) for k, s in shapes.items()})
    d = byom.byom_fft(base, [task, base], m).deltas[0]
    n = base.num_params()
    assert d.kept() == byom.keep_count(m, n)
    assert d.kept() >= m * n - 1e-9


def test_per_tensor_scope_counts(rng, make_ckpt):
    base, task = make_ckpt(rng), make_ckpt(rng)
    d = byom.post_prune(base, [task], 0.5, scope="per_tensor").deltas[0]
    for k, t in base.tensors.items():
        assert d.indices[k].size == int(np.ceil(0.5 * t.size))


def test_bad_ratio_and_keys(rng, make_ckpt):
    base = make_ckpt(rng)
    with pytest.raises(RatioOutOfRange):
        byom.post_prune(base, [base], 0.0)
    with pytest.raises(KeyMismatch):
        byom.byom_fft(base, [ck(other=[1])], 0.1)


def test_materialize_single_scatter_and_empty():
    base = ck(w=[1, 1])
    fp = fingerprint(base)
    d = SparseDelta({"w": np.array([1], np.uint64)}, {"w": np.array([2], np.float32)}, {"w": (2,)}, 0.5, fp)
    assert byom.apply_sparse_delta(base, d).tensors["w"].tolist() == [1, 3]
    empty = SparseDelta({"w": np.array([], np.uint64)}, {"w": np.array([], np.float32)}, {"w": (2,)}, 0.5, fp)
    assert byom.apply_sparse_delta(base, empty).tensors["w"].tolist() == [1, 1]


def test_materialize_guards(rng, make_ckpt):
    base, other = make_ckpt(rng), make_ckpt(rng)
    pruned = byom.post_prune(base, [other], 0.2)
    with pytest.raises(FingerprintMismatch) as err:
        byom.apply_sparse_delta(other, pruned.deltas[0])
    assert fingerprint(base) in str(err.value) and fingerprint(other) in str(err.value)
    # a delta built against theta_0 must not apply to a merged base
    merged = byom.byom_fft(base, [other, base], 0.2).base
    with pytest.raises(FingerprintMismatch):
        byom.apply_sparse_delta(merged, pruned.deltas[0])
    bad = SparseDelta({"w": np.array([99], np.uint64)}, {"w": np.ones(1, np.float32)}, {"w": (2,)}, 0.5, fingerprint(ck(w=[0, 0])))
    with pytest.raises(IndexOutOfRange):
        byom.apply_sparse_delta(ck(w=[0, 0]), bad)


def test_ablation_prune_theta_examples():
    out = byom.ablation_prune_theta([ck(w=[5, 1])], 0.5)
    assert byom.materialize_task_model(out, 0).tensors["w"].tolist() == [5, 0]
    out = byom.ablation_prune_theta([ck(w=[2, -2, 2, -2])], 0.5)
    assert byom.materialize_task_model(out, 0).tensors["w"].tolist() == [2, -2, 0, 0]
    assert out.deltas[0].base_kind == "zero"
    with pytest.raises(RatioOutOfRange):
        byom.ablation_prune_theta([ck(w=[1])], 1.5)


def test_ablation_prune_theta_keep_all(rng, make_ckpt):
    task = make_ckpt(rng)
    got = byom.materialize_task_model(byom.ablation_prune_theta([task], 1.0), 0)
    assert all(got.tensors[k].tobytes() == task.tensors[k].tobytes() for k in task.tensors)


# --- LoRA ---


def test_byom_lora_full_rank_is_lossless(rng):
    base = ck(W=rng.standard_normal((8, 6)), b=rng.standard_normal(8))
    ad = lora(rng, base=base)
    comp = byom.byom_lora(base, [ad], 3)
    got = byom.materialize_lora_task_model(comp, 0)
    want = base.tensors["W"].astype(np.float64) + ad.update("W")
    assert np.linalg.norm(got.tensors["W"] - want) <= 1e-5 * np.linalg.norm(want)
    assert got.tensors["b"].tobytes() == base.tensors["b"].tobytes()
    assert comp.adapters[0].variant == "truncated"
    assert np.all(np.diff(comp.adapters[0].factors["W"][1]) <= 0)


def test_byom_lora_matches_materialized_oracle(rng):
    base = ck(W=np.zeros((8, 8)))
    ad = lora(rng, 8, 8, 3)
    err = byom.lora_reconstruction_error(ad, byom.byom_lora(base, [ad], 2).adapters[0])
    u, s, vt = np.linalg.svd(ad.update("W"))
    assert abs(err - np.linalg.norm(s[2:])) <= 1e-6


def test_byom_lora_hand_case():
    base = ck(W=[[1, 1], [1, 1]])
    ad = LoraFile({"W": (np.array([[1.0], [0.0]]), np.array([[2.0], [0.0]]))}, "factor", fingerprint(base))
    got = byom.materialize_lora_task_model(byom.byom_lora(base, [ad], 1), 0)
    np.testing.assert_allclose(got.tensors["W"], [[3, 1], [1, 1]], atol=1e-6)


def test_zero_singular_values_return_base():
    base = ck(W=np.ones((3, 2)))
    ad = LoraFile({"W": (np.eye(3, 1), np.zeros(1), np.eye(2, 1))}, "truncated", fingerprint(base))
    assert byom.apply_lora(base, ad).tensors["W"].tobytes() == base.tensors["W"].tobytes()


def test_byom_lora_errors(rng):
    base = ck(W=np.zeros((8, 6)))
    with pytest.raises(RankOutOfRange):
        byom.byom_lora(base, [lora(rng)], 4)
    with pytest.raises(RankOutOfRange):
        byom.byom_lora(base, [lora(rng)], 0)
    with pytest.raises(TargetMissing):
        byom.byom_lora(base, [lora(rng, names=("V",))], 1)
    bad = LoraFile({"W": (rng.standard_normal((8, 3)), rng.standard_normal((6, 2)))}, "factor")
    with pytest.raises(InnerDimMismatch):
        byom.byom_lora(base, [bad], 1)


def test_separate_factor_ablation(rng):
    ad = lora(rng, 10, 7, 4)
    full = byom.ablation_separate_factor_approx([ad], 4).adapters[0]
    assert np.linalg.norm(full.update("W") - ad.update("W")) <= 1e-5 * np.linalg.norm(ad.update("W"))
    for q in (1, 2, 3):
        svd = byom.lora_reconstruction_error(ad, byom.byom_lora(ck(W=np.zeros((10, 7))), [ad], q).adapters[0])
        sep = byom.lora_reconstruction_error(ad, byom.ablation_separate_factor_approx([ad], q).adapters[0])
        assert svd <= sep + 1e-9
    r1 = LoraFile({"W": (np.outer(np.arange(1.0, 5), [1, 2]), np.outer(np.ones(3), [3, 1]))})
    assert byom.lora_reconstruction_error(r1, byom.ablation_separate_factor_approx([r1], 1).adapters[0]) < 1e-9
    with pytest.raises(RankOutOfRange):
        byom.ablation_separate_factor_approx([ad], 5)


# --- accounting ---


def test_table_one_accounting():
    got = {m: byom.account_from_sizes(113_000_000, 113_500_000, 8, m).total_millions for m in (0.01, 0.05, 0.10)}
    assert abs(got[0.01] - 123) <= 1 and abs(got[0.05] - 159) <= 1 and abs(got[0.10] - 204) <= 1
    acc = byom.account_from_sizes(113_000_000, 113_500_000, 8, 0.10)
    assert acc.total == 113_000_000 + 8 * 11_350_000
    assert acc.on_disk == acc.total + 2 * 8 * 11_350_000


def test_lora_saving_ratio_is_about_eight():
    assert byom.lora_layer_params(768, 768, 16, truncated=True) == 24_592
    assert byom.lora_layer_params(768, 768, 128, truncated=False) == 196_608
    assert abs(byom.lora_saving_ratio(768, 768, 128, 16) - 8) < 0.01


def test_param_account_artifacts(rng, make_ckpt):
    base, task = make_ckpt(rng), make_ckpt(rng)
    acc = byom.param_account(byom.post_prune(base, [task], 1.0))
    assert acc.total == 2 * base.num_params() and acc.on_disk >= acc.total
    assert byom.param_account([base, task]).total == 2 * base.num_params()
    b = ck(W=np.zeros((8, 6)))
    comp = byom.byom_lora(b, [lora(rng), lora(rng)], 2)
    assert byom.param_account(comp).total == 48 + 2 * 2 * (8 + 6 + 1)
