import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bento_forge import captions as cap
from bento_forge.dataset import (
    CATEGORY_ID,
    AnnotationError,
    generate_dataset,
    generate_synthetic_scene,
    load_annotation,
    load_dataset,
    write_annotation,
)

# -- captions -------------------------------------------------------------


def test_tokenize_base_caption_known():
    ids = cap.tokenize("Place fried chicken on rice")
    assert len(ids) == 5 and cap.UNK not in ids


def test_tokenize_empty_and_unknown():
    assert cap.tokenize("") == []
    ids = cap.tokenize("place sushi on rice")
    assert ids[1] == cap.UNK and ids.count(cap.UNK) == 1


def test_tokenize_strips_punctuation_and_case():
    assert cap.tokenize("PLACE, rice!") == cap.tokenize("place rice")


@pytest.mark.parametrize("type_id", [1, 2, 3])
def test_expand_25_distinct_preserving_categories(type_id):
    base = cap.BASE_CAPTIONS[type_id]
    out = cap.expand_captions(base, 25, seed=3)
    assert len(out) == 25 and len(set(out)) == 25
    assert base not in out
    want = cap.category_tokens(type_id)
    for s in out:
        assert want <= set(cap.normalize(s))
        assert cap.caption_type(s) == type_id
        assert cap.UNK not in cap.tokenize(s)


def test_expand_zero_and_determinism():
    base = cap.BASE_CAPTIONS[2]
    assert cap.expand_captions(base, 0, 1) == []
    assert cap.expand_captions(base, 10, 7) == cap.expand_captions(base, 10, 7)
    assert cap.expand_captions(base, 10, 7) != cap.expand_captions(base, 10, 8)


def test_expand_rejects_unparseable():
    with pytest.raises(cap.CaptionError):
        cap.expand_captions("Serve soup in a bowl", 3, 0)


def test_expand_rejects_more_than_pool():
    with pytest.raises(cap.CaptionError):
        cap.expand_captions(cap.BASE_CAPTIONS[1], 10_000, 0)


def test_select_captions():
    pool = [f"s{i}" for i in range(25)]
    pick = cap.select_captions(pool, 8, seed=4)
    assert len(pick) == 8 == len(set(pick)) and set(pick) <= set(pool)
    assert pick == cap.select_captions(pool, 8, seed=4)
    assert sorted(cap.select_captions(pool, 25, seed=1)) == sorted(pool)
    with pytest.raises(cap.CaptionError):
        cap.select_captions(pool, 26, seed=0)


def test_load_paraphrases(tmp_path):
    f = tmp_path / "p.txt"
    f.write_text("Put rice\n\n  Lay rice \n", encoding="utf-8")
    assert cap.load_paraphrases(f) == ["Put rice", "Lay rice"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(0, 25))
def test_expand_property(seed, type_id, n):
    out = cap.expand_captions(cap.BASE_CAPTIONS[type_id], n, seed)
    assert len(out) == len(set(out)) == n


# -- synthetic scenes -----------------------------------------------------


def test_invalid_type():
    with pytest.raises(ValueError):
        generate_synthetic_scene(4, 0)


def test_same_seed_identical():
    a, b = generate_synthetic_scene(3, 11), generate_synthetic_scene(3, 11)
    assert a == b
    assert a.image().tobytes() == b.image().tobytes()
    assert generate_synthetic_scene(3, 12) != a


def test_five_hundred_scenes_validate():
    scenes = generate_dataset(500, [1, 2, 3], seed=0)
    for sc in scenes:
        sc.validate()
        assert len(sc.captions) == 9
        assert cap.caption_type(sc.captions[0]) == sc.type_id
        assert all(0 <= v <= 1 for it in sc.items for v in it.bbox.as_tuple())
    assert [sc.type_id for sc in scenes[:6]] == [1, 2, 3, 1, 2, 3]


def test_type3_shrimp_overlaps_croquette():
    sc = generate_synthetic_scene(3, 5)
    cro = next(it for it in sc.items if it.category == "croquette")
    shr = next(it for it in sc.items if it.category == "fried_shrimp")
    overlap = cro.amodal_mask & shr.amodal_mask
    assert overlap.any() and shr.z > cro.z
    assert not (overlap & cro.visible_mask).any()


def test_visible_partition():
    # each pixel is visible for at most one item
    sc = generate_synthetic_scene(2, 9)
    stack = np.stack([it.visible_mask for it in sc.items]).sum(axis=0)
    assert stack.max() == 1


def test_rendered_image_range():
    img = generate_synthetic_scene(1, 3).image()
    assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1


# -- annotation files -----------------------------------------------------


def test_round_trip(tmp_path):
    for t in (1, 2, 3):
        sc = generate_synthetic_scene(t, 21 + t)
        loaded = load_annotation(write_annotation(sc, tmp_path))
        assert loaded == sc


def test_load_dataset_sorted(tmp_path):
    scenes = generate_dataset(4, [1, 2, 3], seed=2)
    for sc in scenes:
        write_annotation(sc, tmp_path, write_image=False)
    assert load_dataset(tmp_path) == scenes


def _written(tmp_path, seed=1):
    sc = generate_synthetic_scene(3, seed)
    path = write_annotation(sc, tmp_path, write_image=False)
    return sc, path, json.loads(path.read_text())


def test_reject_missing_captions(tmp_path):
    _, path, doc = _written(tmp_path)
    del doc["captions"]
    path.write_text(json.dumps(doc))
    with pytest.raises(AnnotationError, match="captions"):
        load_annotation(path)


def test_reject_visible_not_subset(tmp_path):
    from bento_forge.dataset import save_png

    sc, path, doc = _written(tmp_path)
    it = sc.items[2]
    bad = it.visible_mask.copy()
    bad[~it.amodal_mask] = True
    save_png(tmp_path / doc["items"][2]["visible_mask"], bad)
    with pytest.raises(AnnotationError, match=f"item {it.item_id}"):
        load_annotation(path)


def test_reject_duplicate_z(tmp_path):
    _, path, doc = _written(tmp_path)
    doc["items"][1]["z"] = doc["items"][0]["z"]
    path.write_text(json.dumps(doc))
    with pytest.raises(AnnotationError, match="duplicate z"):
        load_annotation(path)


def test_reject_type_category_mismatch(tmp_path):
    _, path, doc = _written(tmp_path)
    doc["type"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(AnnotationError, match=str(path.name)):
        load_annotation(path)


def test_reject_bbox_out_of_range(tmp_path):
    _, path, doc = _written(tmp_path)
    doc["items"][0]["bbox"] = [0.5, 0.5, 1.5, 0.2]
    path.write_text(json.dumps(doc))
    with pytest.raises(AnnotationError, match="schema"):
        load_annotation(path)


def test_categories_known():
    assert set(CATEGORY_ID) == {"rice", "fried_chicken", "salmon", "tamagoyaki", "croquette", "fried_shrimp"}
