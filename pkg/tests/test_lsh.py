import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covichain.lsh import (
    DEFAULT_SEED,
    LshParams,
    PackedHashes,
    ScanHash,
    derive_hyperplanes,
    find_candidates,
    hash_distance,
    max_differing_bits,
    simhash,
    simhash_batch,
)
from covichain.templates import FeatureVector, MaskVector, TemplateError

from oracles import hyperplane_signs, naive_candidates, simhash_bits


# Frozen from the pure-Python oracle (tests/oracles.py), default public seed.
# (rng seed, n, k) -> hex; templates drawn with numpy default_rng(rng seed), 10% occlusion.
GOLDEN_SIMHASH = {
    (1, 256, 64): "1cac7fe759248409000000000000000000000000000000000000000000000000",
    (2, 300, 128): "51627004e3ff655bf8945187bfa52fdb00000000000000000000000000000000",
    (3, 257, 256): "905e29ef736896d05dda2fea82379cfffb2a0ca0c63897e999cd5996ecda3a53",
}


def _template(seed, n, occlusion=0.1):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, n)
    mask = (rng.random(n) >= occlusion).astype(int)
    return FeatureVector(bits), MaskVector(mask)


def _pairs_at_distance(rng, count, d, n):
    """Random template pairs differing in exactly round(d * n) positions."""
    a = rng.integers(0, 2, (count, n), dtype=np.uint8)
    b = a.copy()
    flips = round(d * n)
    for row in b:
        row[rng.choice(n, flips, replace=False)] ^= 1
    return a, b


def _mean_hash_distance(a, b, params):
    full = np.ones_like(a)
    ha = simhash_batch(a, full, params)
    hb = simhash_batch(b, full, params)
    return np.unpackbits(ha ^ hb, axis=1)[:, : params.k].sum(axis=1).mean() / params.k


class TestHyperplanes:
    def test_golden_eight_signs(self):
        # SHA-256(32 zero bytes || be32(0) || be32(0)) starts with 0x2c = 00101100
        rows = derive_hyperplanes(LshParams(k=64, n=64, seed=bytes(32)))
        assert rows[0, :8].tolist() == [-1, -1, 1, -1, 1, 1, -1, -1]

    def test_matches_oracle(self):
        params = LshParams(k=64, n=600)
        rows = derive_hyperplanes(params)
        for i in (0, 1, 17, 63):
            assert rows[i].tolist() == hyperplane_signs(DEFAULT_SEED, i, 600)

    def test_deterministic(self):
        a = derive_hyperplanes(LshParams(k=64, n=512, seed=b"\x01" * 32))
        b = derive_hyperplanes(LshParams(k=64, n=512, seed=b"\x01" * 32))
        assert np.array_equal(a, b)

    def test_one_bit_seed_change_flips_half(self):
        seed = bytearray(DEFAULT_SEED)
        seed[5] ^= 0x10
        a = derive_hyperplanes(LshParams())
        b = derive_hyperplanes(LshParams(seed=bytes(seed)))
        assert np.mean(a != b) == pytest.approx(0.5, abs=0.02)

    def test_read_only(self):
        rows = derive_hyperplanes(LshParams(k=64, n=64))
        with pytest.raises(ValueError):
            rows[0, 0] = 0


class TestParams:
    @pytest.mark.parametrize(
        "kwargs", [dict(k=32), dict(k=512), dict(n=100), dict(seed=b"short"), dict(tie_bit=0)]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LshParams(**kwargs)


class TestSimhash:
    @pytest.mark.parametrize("key", sorted(GOLDEN_SIMHASH))
    def test_golden_vectors(self, key):
        seed, n, k = key
        fv, mask = _template(seed, n)
        assert simhash(fv, mask, LshParams(k=k, n=n)).hex() == GOLDEN_SIMHASH[key]

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(99)
        params = LshParams(k=64, n=128)
        for _ in range(10):
            bits = rng.integers(0, 2, 128)
            mask = (rng.random(128) > rng.random()).astype(int)
            mask[0] = 1
            expected = simhash_bits(bits.tolist(), mask.tolist(), DEFAULT_SEED, 64)
            got = simhash(FeatureVector(bits), MaskVector(mask), params)
            assert int.from_bytes(got.value[:8], "big") == expected

    def test_tie_emits_one(self):
        # two unmasked +1 values under opposite signs on row 0 project to exactly zero
        params = LshParams(k=64, n=64)
        rows = derive_hyperplanes(params)
        i = 0
        j = next(c for c in range(1, 64) if rows[i, c] != rows[i, 0])
        bits = np.zeros(64, dtype=int)
        bits[0] = bits[j] = 1
        mask = np.zeros(64, dtype=int)
        mask[0] = mask[j] = 1
        h = simhash(FeatureVector(bits), MaskVector(mask), params)
        assert h.bits()[i] == 1

    def test_deterministic(self):
        fv, mask = _template(5, 9600)
        assert simhash(fv, mask, LshParams()) == simhash(fv, mask, LshParams())

    def test_complement_odd_n(self):
        params = LshParams(n=9601)
        fv, _ = _template(11, 9601)
        full = MaskVector(np.ones(9601, dtype=int))
        comp = FeatureVector(1 - fv.bits)
        a, b = simhash(fv, full, params), simhash(comp, full, params)
        assert hash_distance(a, b, 256) == 1.0
        assert b == a.complement()

    def test_all_masked_rejected(self):
        params = LshParams(k=64, n=64)
        with pytest.raises(TemplateError):
            simhash(FeatureVector(np.ones(64, dtype=int)), MaskVector(np.zeros(64, dtype=int)), params)

    def test_wrong_length_rejected(self):
        fv, mask = _template(1, 100)
        with pytest.raises(TemplateError):
            simhash(fv, mask, LshParams(k=64, n=128))

    def test_masked_bits_ignored(self):
        params = LshParams(k=128, n=256)
        fv, mask = _template(3, 256, occlusion=0.3)
        flipped = fv.bits.copy()
        flipped[mask.bits == 0] ^= 1
        assert simhash(fv, mask, params) == simhash(FeatureVector(flipped), mask, params)

    def test_collision_law_point(self):
        rng = np.random.default_rng(2024)
        a, b = _pairs_at_distance(rng, 1000, 0.1, 9600)
        expected = math.acos(1 - 2 * 0.1) / math.pi
        assert expected == pytest.approx(0.2048, abs=5e-5)
        assert _mean_hash_distance(a, b, LshParams()) == pytest.approx(expected, abs=0.015)

    def test_locality_monotone(self):
        rng = np.random.default_rng(7)
        means = []
        for d in np.arange(0.05, 0.46, 0.05):
            a, b = _pairs_at_distance(rng, 1000, float(d), 9600)
            means.append(_mean_hash_distance(a, b, LshParams()))
        assert all(x < y for x, y in zip(means, means[1:]))


class TestHashDistance:
    def test_identity_and_complement(self):
        h = ScanHash(bytes(range(32)))
        assert hash_distance(h, h) == 0.0
        assert hash_distance(h, h.complement()) == 1.0

    def test_similarity_reading(self):
        # "92% similarity" is a distance of 0.08; 20 of 256 differing bits prints as 92%
        a = ScanHash(bytes(32))
        b = ScanHash(((1 << 20) - 1).to_bytes(32, "big"))
        d = hash_distance(a, b)
        assert d == 20 / 256
        assert round(100 * (1 - d)) == 92
        assert 1 - 0.92 == pytest.approx(0.08)

    def test_mismatched_k(self):
        with pytest.raises(ValueError):
            hash_distance(ScanHash(bytes(32), 64), ScanHash(bytes(32), 128))

    def test_padding_must_be_zero(self):
        with pytest.raises(ValueError):
            ScanHash(b"\x00" * 31 + b"\x01", 64)

    def test_hex_round_trip(self):
        h = ScanHash(bytes(range(32)))
        assert ScanHash.from_hex(h.hex()) == h
        assert len(h.hex()) == 64 and h.hex() == h.hex().lower()


class TestFindCandidates:
    def test_empty_store(self):
        assert len(find_candidates(ScanHash(bytes(32)), [])) == 0

    def test_self_included(self):
        q = ScanHash(bytes(range(32)))
        ms = find_candidates(q, [ScanHash(b"\xff" * 32), q])
        assert ms.entries == ((q, 0.0),)

    def test_half_distance_excluded_at_point_four(self):
        q = ScanHash(bytes(32))
        far = ScanHash(b"\xff" * 16 + bytes(16))
        assert hash_distance(q, far) == 0.5
        assert len(find_candidates(q, [far], 0.4)) == 0

    def test_boundary_bits(self):
        # 0.4 * 256 = 102.4: 102 differing bits match, 103 do not
        assert max_differing_bits(0.4, 256) == 102
        q = ScanHash(bytes(32))
        at = ScanHash(((1 << 102) - 1).to_bytes(32, "big"))
        past = ScanHash(((1 << 103) - 1).to_bytes(32, "big"))
        assert find_candidates(q, [at, past], 0.4).hashes() == [at]

    def test_ties_sorted_by_bytes(self):
        q = ScanHash(bytes(32))
        a = ScanHash(b"\x80" + bytes(31))
        b = ScanHash(bytes(31) + b"\x01")
        assert find_candidates(q, [a, b]).hashes() == [b, a]

    @pytest.mark.parametrize("t", [0, -0.1, 0.51, 1.0])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            find_candidates(ScanHash(bytes(32)), [], t)

    def test_packed_store(self):
        hashes = [ScanHash(bytes([i]) * 32) for i in range(10)]
        packed = PackedHashes.from_hashes(hashes)
        q = hashes[3]
        assert find_candidates(q, packed) == find_candidates(q, hashes)

    def test_mixed_k_rejected(self):
        with pytest.raises(ValueError):
            find_candidates(ScanHash(bytes(32), 64), [ScanHash(bytes(32), 128)])


hash_bytes = st.binary(min_size=32, max_size=32)
thresholds = st.fractions(min_value=Fraction(1, 256), max_value=Fraction(1, 2))


def _near(base: bytes, flips: list[int]) -> bytes:
    v = int.from_bytes(base, "big")
    for f in flips:
        v ^= 1 << f
    return v.to_bytes(32, "big")


@st.composite
def stores(draw):
    query = draw(hash_bytes)
    far = draw(st.lists(hash_bytes, max_size=20))
    near = draw(st.lists(st.lists(st.integers(0, 255), max_size=120), max_size=20))
    store = far + [_near(query, f) for f in near]
    store = draw(st.permutations(store))
    return query, store


@settings(max_examples=300, deadline=None)
@given(stores(), thresholds)
def test_matches_naive_oracle(qs, threshold):
    query, store = qs
    got = find_candidates(ScanHash(query), [ScanHash(h) for h in store], threshold)
    assert [(h.value, d) for h, d in got] == naive_candidates(query, store, threshold)
    assert all(d <= threshold for _, d in got)


@settings(max_examples=200, deadline=None)
@given(stores(), thresholds, thresholds)
def test_monotone_in_threshold(qs, t1, t2):
    lo, hi = sorted((t1, t2))
    query, store = qs
    hashes = [ScanHash(h) for h in store]
    small = {h.value for h in find_candidates(ScanHash(query), hashes, lo).hashes()}
    large = {h.value for h in find_candidates(ScanHash(query), hashes, hi).hashes()}
    assert small <= large
