import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dualgoal.binfmt import ChecksumError, MagicMismatchError, TruncatedFileError, VersionMismatchError
from dualgoal.data import (
    CUR,
    GEOM,
    RAND,
    TRAJ,
    RelabelRatios,
    TransitionDataset,
    collect_dataset,
    load_dataset,
    sample_batch,
    save_dataset,
)
from dualgoal.env import ContractError, ExBcmpSpec, PuzzleSpec, latent_of


@pytest.fixture(scope="module")
def small():
    return collect_dataset(PuzzleSpec(3, 3), 200, 12, 5)


def test_default_4x5_size():
    ds = collect_dataset(PuzzleSpec(4, 5), 40_000, 25, 0)
    assert ds.n_transitions == 1_000_000
    assert ds.states.shape == (40_000, 26)


def test_dynamics_invariant(small):
    masks = small.spec.masks
    assert np.array_equal(small.states[:, 1:], small.states[:, :-1] ^ masks[small.actions])


def test_noisy_dataset_latent_dynamics():
    ds = collect_dataset(PuzzleSpec(2, 3), 50, 10, 1, noise_bits=5)
    lat = ds.latent(ds.states)
    assert np.array_equal(lat[:, 1:], lat[:, :-1] ^ ds.spec.masks[ds.actions])
    assert ds.obs_width == 11
    assert (ds.states >> np.uint64(6)).max() > 0


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a.ds", tmp_path / "b.ds"
    save_dataset(collect_dataset(PuzzleSpec(3, 4), 300, 25, 9), a)
    save_dataset(collect_dataset(PuzzleSpec(3, 4), 300, 25, 9), b)
    assert a.read_bytes() == b.read_bytes()


def test_round_trip(tmp_path, small):
    path = tmp_path / "d.ds"
    save_dataset(small, path)
    assert path.read_bytes()[:8] == b"DGRD-DS\0"
    assert load_dataset(path) == small
    noisy = collect_dataset(PuzzleSpec(2, 2), 20, 5, 0, noise_bits=3)
    save_dataset(noisy, path)
    assert load_dataset(path) == noisy


def test_corruption_detected(tmp_path, small):
    path = tmp_path / "d.ds"
    save_dataset(small, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_dataset(path)


def test_wrong_magic_and_version(tmp_path, small):
    path = tmp_path / "d.ds"
    save_dataset(small, path)
    raw = path.read_bytes()
    path.write_bytes(b"DGRD-CK\0" + raw[8:])
    with pytest.raises(MagicMismatchError):
        load_dataset(path)
    path.write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(VersionMismatchError):
        load_dataset(path)


def test_truncation(tmp_path, small):
    path = tmp_path / "d.ds"
    save_dataset(small, path)
    raw = path.read_bytes()
    for cut in (4, 20, len(raw) - 50):
        path.write_bytes(raw[:cut])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)


def test_dataset_rejects_broken_dynamics(small):
    states = small.states.copy()
    states[0, 3] ^= np.uint64(1)
    with pytest.raises(ContractError):
        TransitionDataset(small.spec, states, small.actions)


def test_ratios_validation():
    with pytest.raises(ContractError):
        RelabelRatios(0.2, 0.2, 0.2, 0.3)
    with pytest.raises(ContractError):
        RelabelRatios(-0.1, 0.6, 0.2, 0.3)
    assert RelabelRatios.parse("0.2,0,0.5,0.3") == RelabelRatios(0.2, 0.0, 0.5, 0.3)


def test_cur_branch(small, rng):
    b = sample_batch(small, RelabelRatios(1, 0, 0, 0), 500, 0.95, rng)
    assert np.array_equal(b.g, b.s)
    assert np.all(b.reward == 0) and np.all(b.done_mask == 1)
    assert np.all(b.branch == CUR)


def test_traj_branch_last_step(rng):
    ds = collect_dataset(PuzzleSpec(3, 3), 1000, 1, 2)  # traj_len 1: t is always T-1
    b = sample_batch(ds, RelabelRatios(0, 0, 1, 0), 300, 0.95, rng)
    assert np.array_equal(b.g, b.s_next)
    # reward is keyed on the current state, which is one press from the goal
    assert np.all(b.reward == -1) and np.all(b.done_mask == 0)


def test_traj_goals_are_future_states(small, rng):
    b = sample_batch(small, RelabelRatios(0, 0, 1, 0), 2000, 0.95, rng)
    assert np.all(b.offset >= 1)
    assert np.all(b.branch == TRAJ)


def test_reward_matches_goal(small, rng):
    b = sample_batch(small, RelabelRatios(0.2, 0.3, 0.2, 0.3), 4000, 0.95, rng)
    hit = b.s == b.g
    assert np.array_equal(b.reward, np.where(hit, 0.0, -1.0))
    assert np.array_equal(b.done_mask, hit.astype(float))
    assert np.array_equal(b.s_next, b.s ^ small.spec.masks[b.a])
    assert small.contains(b.g).all()


def test_noise_aware_reward(rng):
    ds = collect_dataset(PuzzleSpec(2, 2), 200, 8, 4, noise_bits=6)
    b = sample_batch(ds, RelabelRatios(1, 0, 0, 0), 200, 0.95, rng)
    assert np.all(b.done_mask == 1)
    b = sample_batch(ds, RelabelRatios(0, 0, 0, 1), 2000, 0.95, rng)
    spec = ExBcmpSpec(ds.spec, 6)
    same = latent_of(spec, b.s) == latent_of(spec, b.g)
    assert np.array_equal(b.done_mask == 1, same)
    assert (same & (b.s != b.g)).any()


def test_branch_frequencies_within_3_sigma(small):
    p = np.array([0.2, 0.5, 0.1, 0.2])
    n = 40_000
    b = sample_batch(small, RelabelRatios(*p), n, 0.95, np.random.default_rng(11))
    counts = np.bincount(b.branch, minlength=4)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)
    assert np.all(b.offset[b.branch == RAND] == -1)


def test_geometric_offsets_match_pmf():
    gamma = 0.95
    spec = PuzzleSpec(2, 2)
    ds = collect_dataset(spec, 1, 200_000, 3)
    n = 100_000
    b = sample_batch(ds, RelabelRatios(0, 1, 0, 0), n, gamma, np.random.default_rng(8))
    assert np.all(b.branch == GEOM)
    off = b.offset
    for k in range(1, 31):
        p = (1 - gamma) * gamma ** (k - 1)
        count = np.sum(off == k)
        assert abs(count - n * p) < 3 * np.sqrt(n * p * (1 - p)), k


@given(st.integers(0, 2**31 - 1))
def test_sampling_is_seed_deterministic(seed):
    ds = collect_dataset(PuzzleSpec(2, 3), 30, 6, 0)
    r = RelabelRatios(0.2, 0.5, 0.0, 0.3)
    a = sample_batch(ds, r, 64, 0.95, np.random.default_rng(seed))
    b = sample_batch(ds, r, 64, 0.95, np.random.default_rng(seed))
    assert a.digest() == b.digest()
