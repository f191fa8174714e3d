"""Adapter zoo: deltas vs reconstruction oracles, parameter counts, masks, IO."""

import numpy as np
import pytest

from tucker_adapters.adapters import (
    SIGMA_EXPERT_INIT,
    AbcLoraAdapter,
    AdapterBase,
    LoraAdapter,
    Selection,
    SharedAMoeAdapter,
    Tucker3Adapter,
    Tucker5Adapter,
    TuckerAdapter,
    init_adapter,
)
from tucker_adapters.tensor_ops import tucker_reconstruct


def small_tucker(seed=0, a=6, b=5, ranks=(2, 3, 2, 2), m=4, n=3):
    return TuckerAdapter.init(a=a, b=b, ranks=ranks, n_scenes=m, n_envs=n,
                              rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Parameter counts pinned to the published closed-form values
# ---------------------------------------------------------------------------

def test_param_count_tucker_reference_config():
    ad = TuckerAdapter.init(a=1024, b=1024, ranks=(8, 8, 64, 64),
                            n_scenes=7, n_envs=4, rng=np.random.default_rng(0))
    assert ad.param_count() == 279_232


def test_param_count_per_task_lora():
    lora = LoraAdapter.init(a=1024, b=1024, rank=6, rng=np.random.default_rng(0))
    assert 24 * lora.param_count() == 294_912


def test_param_count_single_lora():
    lora = LoraAdapter.init(a=1024, b=1024, rank=128, rng=np.random.default_rng(0))
    assert lora.param_count() == 262_144


def test_param_count_shared_a_moe():
    moe = SharedAMoeAdapter.init(a=1024, b=1024, rank=12, n_experts=24,
                                 rng=np.random.default_rng(0))
    assert moe.param_count() == 307_200


def test_param_count_abc():
    abc = AbcLoraAdapter.init(a=1024, b=1024, rank_base=48, rank_mid=48,
                              n_scenes=5, n_envs=4, rng=np.random.default_rng(0))
    assert abc.param_count() == 257_280


def test_param_count_matches_mask_enumeration():
    ad = small_tucker()
    shared = sum(ad.blocks()[n].size for n in ad.shared_names)
    per_pair = {}
    expert_union = {n: np.zeros_like(ad.blocks()[n]) for n in ad.expert_axes}
    for s in range(ad.scene_experts.shape[0]):
        for e in range(ad.env_experts.shape[0]):
            masks = ad.trainable_mask(Selection(scene=s, env=e))
            for n in ad.expert_axes:
                expert_union[n] += masks[n]
    # every expert row is touched by some task selection, none twice per axis
    touched = sum(int(np.count_nonzero(v)) for v in expert_union.values())
    assert shared + touched == ad.param_count()


# ---------------------------------------------------------------------------
# Deltas vs full-reconstruction oracle
# ---------------------------------------------------------------------------

def test_tucker_delta_matches_reconstruct_slice():
    ad = small_tucker(seed=5)
    rec = tucker_reconstruct(
        ad.core, [ad.up, ad.down, ad.scene_experts, ad.env_experts])
    for s in range(4):
        for e in range(3):
            np.testing.assert_allclose(
                ad.delta(Selection(scene=s, env=e)), rec[:, :, s, e], atol=1e-10)


def test_tucker5_delta_matches_reconstruct_slice():
    ad = Tucker5Adapter.init(a=4, b=5, ranks=(2, 2, 2, 2, 2), n_scenes=3,
                             n_envs=2, n_instr=2, rng=np.random.default_rng(9))
    rec = tucker_reconstruct(
        ad.core, [ad.up, ad.down, ad.scene_experts, ad.env_experts,
                  ad.instr_experts])
    np.testing.assert_allclose(
        ad.delta(Selection(scene=1, env=0, instr=1)), rec[:, :, 1, 0, 1],
        atol=1e-10)


def test_tucker3_delta_matches_reconstruct_slice():
    ad = Tucker3Adapter.init(a=4, b=5, ranks=(2, 2, 3), n_scenes=2, n_envs=3,
                             rng=np.random.default_rng(13))
    rec = tucker_reconstruct(ad.core, [ad.up, ad.down, ad.pair_experts])
    for s in range(2):
        for e in range(3):
            np.testing.assert_allclose(
                ad.delta(Selection(scene=s, env=e)), rec[:, :, s * 3 + e],
                atol=1e-10)


def test_zeroed_expert_rows_give_zero_delta():
    ad = small_tucker(seed=2)
    ad.scene_experts[1] = 0.0
    assert np.array_equal(ad.delta(Selection(scene=1, env=0)),
                          np.zeros((6, 5)))


def test_delta_is_deterministic():
    ad = small_tucker(seed=3)
    sel = Selection(scene=2, env=1)
    assert np.array_equal(ad.delta(sel), ad.delta(sel))


def test_tucker_delta_bilinear_in_rows():
    ad = small_tucker(seed=4)
    base = ad.delta(Selection(scene=0, env=0))
    ad.scene_experts[0] *= 3.0
    np.testing.assert_allclose(ad.delta(Selection(scene=0, env=0)), 3.0 * base,
                               atol=1e-12)


def test_tucker5_linear_in_instruction_row():
    ad = Tucker5Adapter.init(a=3, b=3, ranks=(2, 2, 2, 2, 2), n_scenes=2,
                             n_envs=2, n_instr=2, rng=np.random.default_rng(21))
    base = ad.delta(Selection(scene=0, env=1, instr=0))
    ad.instr_experts[0] *= -2.0
    np.testing.assert_allclose(ad.delta(Selection(scene=0, env=1, instr=0)),
                               -2.0 * base, atol=1e-12)


def test_lora_zero_up_gives_zero_delta():
    lora = LoraAdapter.init(a=4, b=6, rank=2, rng=np.random.default_rng(1))
    assert np.array_equal(lora.delta(Selection()), np.zeros((4, 6)))


def test_moe_single_expert_reduces_to_lora():
    rng = np.random.default_rng(17)
    moe = SharedAMoeAdapter.init(a=4, b=5, rank=3, n_experts=1, rng=rng)
    moe.ups[0] = rng.standard_normal((4, 3))
    lora = LoraAdapter(down=moe.down.copy(), up=moe.ups[0].copy())
    np.testing.assert_allclose(moe.delta(Selection(task=0)),
                               lora.delta(Selection()), atol=1e-12)


def test_moe_delta_is_expert_superposition():
    rng = np.random.default_rng(19)
    moe = SharedAMoeAdapter.init(a=3, b=4, rank=2, n_experts=5, rng=rng)
    moe.ups[:] = rng.standard_normal(moe.ups.shape)
    total = sum(LoraAdapter(down=moe.down, up=moe.ups[k]).delta(Selection())
                for k in range(5))
    np.testing.assert_allclose(moe.delta(Selection(task=0)), total, atol=1e-12)


def test_abc_identity_top_reduces_to_mid_base():
    rng = np.random.default_rng(23)
    abc = AbcLoraAdapter.init(a=3, b=5, rank_base=3, rank_mid=3, n_scenes=2,
                              n_envs=2, rng=rng)
    abc.tops[1] = np.eye(3)
    np.testing.assert_allclose(abc.delta(Selection(scene=0, env=1)),
                               abc.mids[0] @ abc.base, atol=1e-12)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def test_same_seed_bitwise_identical():
    dims = dict(a=6, b=5, ranks=(2, 2, 2, 2), n_scenes=3, n_envs=2)
    a1 = init_adapter("tucker4", dims, seed=99)
    a2 = init_adapter("tucker4", dims, seed=99)
    for k in a1.blocks():
        assert np.array_equal(a1.blocks()[k], a2.blocks()[k])


def test_different_seeds_differ():
    dims = dict(a=6, b=5, ranks=(2, 2, 2, 2), n_scenes=3, n_envs=2)
    a1 = init_adapter("tucker4", dims, seed=1)
    a2 = init_adapter("tucker4", dims, seed=2)
    assert not np.array_equal(a1.core, a2.core)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown adapter kind"):
        init_adapter("nope", {}, seed=0)


def test_initial_delta_is_near_zero():
    ad = small_tucker(seed=11)
    delta = ad.delta(Selection(scene=0, env=0))
    u3, u4 = ad.scene_experts[0], ad.env_experts[0]
    # multilinear operator bound computed from factor norms
    bound = (np.linalg.norm(ad.up) * np.linalg.norm(ad.down)
             * np.linalg.norm(ad.core) * np.linalg.norm(u3) * np.linalg.norm(u4))
    assert np.linalg.norm(delta) <= bound
    # rows are O(sigma), so the update is O(sigma^2) times the shared norms
    shared = (np.linalg.norm(ad.up) * np.linalg.norm(ad.down)
              * np.linalg.norm(ad.core))
    assert np.linalg.norm(delta) <= 100 * SIGMA_EXPERT_INIT ** 2 * shared


# ---------------------------------------------------------------------------
# Masks and persistence
# ---------------------------------------------------------------------------

def test_mask_all_ones_when_single_expert():
    ad = TuckerAdapter.init(a=3, b=3, ranks=(2, 2, 2, 2), n_scenes=1, n_envs=1,
                            rng=np.random.default_rng(0))
    masks = ad.trainable_mask(Selection(scene=0, env=0))
    assert all(np.all(m == 1.0) for m in masks.values())


def test_mask_frozen_row_count():
    ad = TuckerAdapter.init(a=8, b=8, ranks=(2, 2, 3, 5), n_scenes=7, n_envs=4,
                            rng=np.random.default_rng(0))
    masks = ad.trainable_mask(Selection(scene=2, env=1))
    zeros = sum(int(np.sum(m == 0.0)) for m in masks.values())
    assert zeros == 3 * 6 + 5 * 3  # r3 * (M-1) + r4 * (N-1)


def test_mask_index_errors():
    ad = small_tucker()
    with pytest.raises(IndexError):
        ad.trainable_mask(Selection(scene=99, env=0))
    with pytest.raises(IndexError):
        ad.delta(Selection(scene=0, env=-1))


@pytest.mark.parametrize("make", [
    lambda rng: TuckerAdapter.init(4, 5, (2, 2, 2, 2), 3, 2, rng),
    lambda rng: Tucker3Adapter.init(4, 5, (2, 2, 3), 3, 2, rng),
    lambda rng: Tucker5Adapter.init(4, 5, (2, 2, 2, 2, 2), 3, 2, 2, rng),
    lambda rng: LoraAdapter.init(4, 5, 3, rng),
    lambda rng: SharedAMoeAdapter.init(4, 5, 3, 6, rng),
    lambda rng: AbcLoraAdapter.init(4, 5, 3, 3, 3, 2, rng),
])
def test_checkpoint_roundtrip_lossless(tmp_path, make):
    ad = make(np.random.default_rng(31))
    path = tmp_path / "adapter.npz"
    ad.save(path)
    back = AdapterBase.load(path)
    assert type(back) is type(ad)
    for k, v in ad.blocks().items():
        assert np.array_equal(back.blocks()[k], v)
    sel = Selection(scene=0, env=0, instr=0, task=0)
    np.testing.assert_array_equal(ad.delta(sel), back.delta(sel))
