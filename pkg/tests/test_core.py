import numpy as np
import pytest

from apievade.core import ApiSequence, derive_seed, make_rng, stable_hash
from apievade.corpus import MOTIF_LEN, N_MOTIFS, build_vocabulary
from apievade.errors import ConfigError, VocabularyError


def test_vocabulary_ids_dense_from_one():
    v = build_vocabulary(300, seed=7)
    assert len(v) == 300
    assert v.ids == list(range(1, 301))


def test_vocabulary_deterministic():
    assert build_vocabulary(300, seed=7) == build_vocabulary(300, seed=7)
    assert build_vocabulary(300, seed=7).hash != build_vocabulary(300, seed=8).hash


def test_vocabulary_too_small():
    with pytest.raises(ConfigError):
        build_vocabulary(5, seed=1)


def test_vocabulary_attributes_and_safe_subset():
    v = build_vocabulary(120, seed=4)
    assert v.safe_ids()
    t = v.triples()
    assert t.shape == (121, 3) and (t[0] == 0).all()
    assert (t[1:, 0] < 12).all() and (t[1:, 1] < 20).all() and (t[1:, 2] < 25).all()
    assert len({e.name for e in v.entries}) == len(v)


def test_vocabulary_motifs_are_tracked_and_disjoint():
    v = build_vocabulary(300, seed=7)
    assert len(v.motifs) == N_MOTIFS
    assert all(len(m) == MOTIF_LEN for m in v.motifs)
    flat = [a for m in v.motifs for a in m]
    assert len(set(flat)) == len(flat)
    assert set(flat) <= v.tracked_ids()


def test_motif_apis_never_safe_to_inject():
    for seed in range(5):
        v = build_vocabulary(120, seed=seed)
        motif_apis = {a for m in v.motifs for a in m}
        assert not any(e.safe_to_inject for e in v.entries if e.id in motif_apis)
        assert any(e.safe_to_inject and e.tracked for e in v.entries)


def test_vocabulary_dict_round_trip():
    v = build_vocabulary(50, seed=2)
    assert type(v).from_dict(v.to_dict()) == v


def test_vocabulary_unknown_id():
    v = build_vocabulary(20, seed=0)
    with pytest.raises(VocabularyError):
        v[21]
    with pytest.raises(VocabularyError):
        v.validate_tokens([1, 0])
    v.validate_tokens([1, 0], allow_pad=True)


def test_sequence_rejects_padding_and_bad_provenance():
    with pytest.raises(ValueError):
        ApiSequence([1, 0, 2])
    with pytest.raises(ValueError):
        ApiSequence([1, 2], provenance=[1])


def test_sequence_record_round_trip():
    s = ApiSequence([3, 1, 2], 0, "observed", provenance=[5, 6, 7], injected=[False, True, False],
                    args=[1, 0, 2], program_id="p1")
    assert ApiSequence.from_record(s.to_record()) == s
    assert s.original_tokens() == [3, 2]


def test_derived_seeds_are_independent_and_stable():
    a = derive_seed(7, "attack", 0)
    assert a == derive_seed(7, "attack", 0)
    assert len({a, derive_seed(7, "attack", 1), derive_seed(7, "train", 0), derive_seed(8, "attack", 0)}) == 4
    assert make_rng(1, "misc").random() == make_rng(1, "misc").random()


def test_stable_hash_ignores_key_order():
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
    assert stable_hash([1, 2]) != stable_hash([2, 1])
    assert isinstance(np.int64(1).item(), int)
