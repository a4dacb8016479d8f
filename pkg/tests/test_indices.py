import pytest

from kamred.errors import SmallDivisorError
from kamred.indices import (Frequency, divisor_weight, enumerate_indices,
                            index_l1, index_weight, kam_weight, make_index)


def test_make_index_drops_zeros_and_sorts():
    assert make_index({3: 1, 1: -2, 2: 0}) == ((1, -2), (3, 1))
    assert make_index({}) == ()


def test_weighted_size_and_l1():
    mi = make_index({1: 2, 3: -1})
    assert index_weight(mi, 1.0) == 2 + 3
    assert index_weight(mi, 2.0) == 2 + 9
    assert index_l1(mi) == 3
    # ||l||_1 <= |l|_eta for eta >= 0 on sites >= 1
    assert index_l1(mi) <= index_weight(mi, 1.0)


def test_enumeration_single_site():
    # sites={1}, eta=1, L=2 -> {+-e1, +-2e1}
    got = enumerate_indices(2.0, [1], eta=1.0)
    assert set(got) == {((1, -2),), ((1, -1),), ((1, 1),), ((1, 2),)}


def test_enumeration_two_sites_hand_list():
    got = set(enumerate_indices(2.0, [1, 2], eta=1.0))
    expected = {((1, -2),), ((1, -1),), ((1, 1),), ((1, 2),),
                ((2, -1),), ((2, 1),)}
    assert got == expected


def test_enumeration_empty_below_min_weight():
    assert enumerate_indices(0.5, [1, 2], eta=1.0) == []


def test_enumeration_sorted_no_duplicates():
    got = enumerate_indices(4.0, [1, 2, 3], eta=1.0)
    assert got == sorted(set(got))


def test_divisor_weight_product():
    # d(e1) = 1 + 1 = 2 under <1> = 1
    assert kam_weight(make_index({1: 1})) == 2.0
    mi = make_index({1: 1, 2: -2})
    assert divisor_weight(mi, 2.0, 2.0) == (1 + 1) * (1 + 4 * 4)


def test_frequency_cube_bounds():
    with pytest.raises(ValueError):
        Frequency({1: 0.5})
    with pytest.raises(ValueError):
        Frequency({1: 2.5})


def test_frequency_pairing_exact():
    om = Frequency({1: 1.5, 2: 1.25})
    assert om.dot(make_index({1: 2, 2: -1})) == 2 * 1.5 - 1.25


def test_check_divisor_raises_with_offender():
    om = Frequency({1: 1.0, 2: 1.0}, gamma=0.5)
    mi = make_index({1: 1, 2: -1})
    with pytest.raises(SmallDivisorError) as ei:
        om.check_divisor(mi)
    assert ei.value.index == mi
