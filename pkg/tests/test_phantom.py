from dataclasses import replace
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adunet.errors import ConfigError
from adunet.phantom import (MODALITIES, PhantomConfig, generate_case, generate_dataset,
                            split_dataset)


def rasterized_sphere_count(radius):
    """Integer lattice points within ``radius`` of a lattice point, by enumeration."""
    r = int(radius)
    return sum(
        1
        for a, b, c in itertools.product(range(-r, r + 1), repeat=3)
        if a * a + b * b + c * c <= radius * radius
    )


def test_healthy_case_has_empty_lesion_mask(healthy_case):
    assert healthy_case.healthy
    assert healthy_case.lesion_mask.data.sum() == 0


def test_generation_is_bit_identical(cfg, healthy_case):
    again = generate_case(7, cfg, diseased=False)
    assert again == healthy_case
    for m in MODALITIES:
        assert again.modalities[m].data.tobytes() == healthy_case.modalities[m].data.tobytes()


def test_single_lesion_voxel_count_matches_sphere(cfg):
    one = replace(cfg, lesion_count=(1, 1), lesion_radius=(4, 4))
    case = generate_case(3, one, diseased=True)
    count = int(case.lesion_mask.data.sum())
    assert count == rasterized_sphere_count(4)
    analytic = 4 / 3 * np.pi * 4**3
    assert abs(count - analytic) <= 0.1 * analytic


def test_geometry_shared_and_lesions_inside_prostate(diseased_case):
    vols = diseased_case.volumes()
    for v in vols[1:]:
        assert v.same_geometry(vols[0])
    les = diseased_case.lesion_mask.data > 0
    assert les.any()
    assert np.all(diseased_case.zone_mask.data[les] > 0)
    assert set(np.unique(diseased_case.zone_mask.data)) == {0.0, 1.0, 2.0}


def test_intensities_in_unit_range(diseased_case):
    for v in diseased_case.modalities.values():
        assert v.data.min() >= 0 and v.data.max() <= 1


def test_lesion_contrast_direction(cfg):
    # noise-free phantom: lesion voxels shift in the configured direction
    quiet = replace(cfg, noise_sigma={m: 0.0 for m in MODALITIES}, bias_amplitude=0.0)
    case = generate_case(11, quiet, diseased=True)
    ref = generate_case(11, quiet, diseased=False)
    les = case.lesion_mask.data > 0
    zones = case.zone_mask.data
    tissue = {m: float(np.median(case.modalities[m].data[(zones > 0) & ~les])) for m in MODALITIES}
    assert case.modalities["ADC"].data[les].mean() < tissue["ADC"]
    assert case.modalities["DWI"].data[les].mean() > tissue["DWI"]
    assert case.modalities["T2W"].data[les].mean() < case.modalities["T2W"].data[(zones > 0) & ~les].max()
    assert ref.lesion_mask.data.sum() == 0


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.booleans())
def test_invariants_property(seed, diseased):
    cfg = PhantomConfig(dims=(20, 64, 64), prostate_axial=(6.0, 7.0), prostate_inplane=(12.0, 14.0),
                        lesion_radius=(2, 4))
    case = generate_case(seed, cfg, diseased)
    vols = case.volumes()
    assert all(v.same_geometry(vols[0]) for v in vols)
    assert case.healthy == (case.lesion_mask.data.sum() == 0)
    assert np.all(case.zone_mask.data[case.lesion_mask.data > 0] > 0)


@pytest.mark.parametrize("bad", [
    dict(lesion_contrast={"T2W": -0.2, "ADC": -1.0, "DWI": 0.6}),
    dict(lesion_radius=(3, 30)),
    dict(lesion_count=(0, 2)),
    dict(dims=(8, 96, 96)),
])
def test_invalid_config_raises(cfg, bad):
    with pytest.raises(ConfigError):
        generate_case(0, replace(cfg, **bad), diseased=True)


def test_negative_seed_rejected(cfg):
    with pytest.raises(ConfigError):
        generate_case(-1, cfg, False)


@pytest.fixture(scope="module")
def dataset_80(cfg):
    return generate_dataset(60, 20, 42, cfg)


def test_dataset_counts(cfg):
    small = PhantomConfig(dims=(20, 64, 64), prostate_axial=(6.0, 7.0), prostate_inplane=(12.0, 14.0))
    h = generate_dataset(100, 0, 1, small)
    assert len(h) == 100 and all(c.healthy for c in h)
    d = generate_dataset(0, 5, 1, small)
    assert len(d) == 5 and all(c.lesion_mask.data.sum() > 0 for c in d)
    assert [c.seed for c in d] == [1, 2, 3, 4, 5]


def test_dataset_determinism(cfg, dataset_80):
    assert len(dataset_80) == 80
    assert len({c.case_id for c in dataset_80}) == 80
    again = generate_dataset(60, 20, 42, cfg)
    assert all(a == b for a, b in zip(dataset_80, again))


def test_empty_dataset_rejected(cfg):
    with pytest.raises(ConfigError):
        generate_dataset(0, 0, 1, cfg)


def test_split_sizes_and_determinism(dataset_80):
    ten = dataset_80[:8] + dataset_80[-2:]
    a = split_dataset(ten, (0.8, 0.1, 0.1), 0)
    assert [len(s) for s in a] == [8, 1, 1]
    b = split_dataset(ten, (0.8, 0.1, 0.1), 0)
    assert [[c.case_id for c in s] for s in a] == [[c.case_id for c in s] for s in b]


def test_split_is_stratified_partition(dataset_80):
    splits = split_dataset(dataset_80, (0.75, 0.125, 0.125), 5)
    ids = [c.case_id for s in splits for c in s]
    assert sorted(ids) == sorted(c.case_id for c in dataset_80)
    assert len(set(ids)) == len(ids)
    assert [len(s) for s in splits] == [60, 10, 10]
    for s in splits:
        n_dis = sum(not c.healthy for c in s)
        assert abs(n_dis - 0.25 * len(s)) <= 1


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.1), (0.0, 0.5, 0.5), (1.0, 0.0, 0.0)])
def test_split_rejects_bad_fractions(dataset_80, fractions):
    with pytest.raises(ConfigError):
        split_dataset(dataset_80, fractions, 0)


def test_split_rejects_empty():
    with pytest.raises(ConfigError):
        split_dataset([], (0.8, 0.1, 0.1), 0)
