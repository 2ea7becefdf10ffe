from aquaseg.prng import PrngState, fnv1a64, splitmix64

# published reference outputs of splitmix64 advancing from state 0
SPLITMIX_FROM_ZERO = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

# frozen regression anchors for the composed generator (computed once from
# this implementation; any drift means the stream changed)
XOSHIRO_SEED0 = [5987356902031041503, 7051070477665621255,
                 6633766593972829180, 211316841551650330]
XOSHIRO_SEED7 = [1021219803524665661, 3174977118032272916, 13236943193235544178]


def test_splitmix64_reference_vectors():
    state = 0
    outs = []
    for _ in range(3):
        state, v = splitmix64(state)
        outs.append(v)
    assert outs == SPLITMIX_FROM_ZERO


def test_fnv1a64_reference_vectors():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_stream_regression_anchors():
    r0 = PrngState(0)
    assert [r0.next_u64() for _ in range(4)] == XOSHIRO_SEED0
    r7 = PrngState(7)
    assert [r7.next_u64() for _ in range(3)] == XOSHIRO_SEED7


def test_same_seed_same_sequence():
    a = PrngState(123456789)
    b = PrngState(123456789)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]


def test_fill_matches_scalar_path():
    a = PrngState(99)
    b = PrngState(99)
    assert a.fill_u64(257).tolist() == [b.next_u64() for _ in range(257)]


def test_derive_is_position_independent():
    a = PrngState(5)
    a.next_u64()
    a.next_u64()
    b = PrngState(5)
    assert a.derive("unet1").next_u64() == b.derive("unet1").next_u64()
    assert a.derive("unet1").next_u64() != a.derive("unet2").next_u64()


def test_uniform_range_and_moments():
    u = PrngState(321).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 5e-3
    assert abs(u.var() - 1.0 / 12.0) < 5e-3


def test_normal_moments():
    z = PrngState(11).normal(200_001)
    assert abs(z.mean()) < 1e-2
    assert abs(z.var() - 1.0) < 2e-2


def test_shuffle_is_a_permutation_and_deterministic():
    items = list(range(50))
    a = items.copy()
    PrngState(77).shuffle(a)
    b = items.copy()
    PrngState(77).shuffle(b)
    assert a == b
    assert sorted(a) == items
    assert a != items  # astronomically unlikely to be identity


def test_randint_bounds():
    r = PrngState(2)
    draws = [r.randint(3, 5) for _ in range(200)]
    assert set(draws) == {3, 4, 5}
