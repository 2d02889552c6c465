from fedbary import seeding


def test_splitmix64_reference_values():
    # first outputs of the reference SplitMix64 generator started at state 0
    assert seeding.splitmix64(0) == 0xE220A8397B1DCDAF
    assert seeding.splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_derived_seeds_differ_by_tag_and_index():
    seeds = {seeding.derive_seed(1, tag, i) for tag in (seeding.TIES, seeding.BATCH) for i in range(4)}
    assert len(seeds) == 8
    assert seeding.derive_seed(1, seeding.TIES, 0) == seeding.derive_seed(1, seeding.TIES, 0)


def test_stream_reproducible():
    a = seeding.stream(3, seeding.DATA, 2).random(5)
    b = seeding.stream(3, seeding.DATA, 2).random(5)
    assert (a == b).all()
