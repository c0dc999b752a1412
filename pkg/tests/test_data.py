from collections import Counter

import numpy as np
import pytest

from seqground.data import (COLORS, DataError, GroundingSample, SceneConfig, Shape, WordVocab, generate_dataset,
                            generate_sample,
                            load_polygon_annotations, query_matches, render_shape, split_dataset,
                            write_annotations)
from seqground.geometry import bounding_box_of


def make_shape(kind, color, cx, cy, r=6.0, size="small"):
    mask = render_shape(kind, cx, cy, r, 64)
    return Shape(kind, color, size, cx, cy, r, False, mask)


def test_unique_color_kind_query():
    shapes = [make_shape("circle", "red", 15, 15), make_shape("square", "blue", 45, 45)]
    assert query_matches(shapes, "red circle") == [0]
    assert query_matches(shapes, "blue square") == [1]


def test_left_square_picks_smaller_x_centroid():
    shapes = [make_shape("square", "red", 45, 20), make_shape("square", "blue", 15, 40)]
    assert query_matches(shapes, "left square") == [1]
    assert query_matches(shapes, "right square") == [0]
    assert query_matches(shapes, "top square") == [0]


def test_color_distractor_flag():
    shapes = [make_shape("circle", "red", 15, 15), make_shape("square", "red", 45, 45),
              make_shape("square", "blue", 15, 45)]

    def sample(target):
        m = shapes[target].mask
        return GroundingSample(np.zeros((64, 64, 4)), "", np.array([1]), bounding_box_of(m), m,
                               shapes=shapes, target=target)

    assert sample(0).color_distractor and sample(1).color_distractor
    assert not sample(2).color_distractor
    assert not GroundingSample(np.zeros((64, 64, 4)), "", np.array([1]), None, shapes[0].mask).color_distractor


def test_generated_samples_satisfy_invariants(scenes):
    for s in scenes:
        assert s.gt_mask.any()
        assert s.gt_box == bounding_box_of(s.gt_mask)
        assert query_matches(s.shapes, s.query) == [s.target]
        assert s.raster.shape == (64, 64, len(COLORS))
        assert np.array_equal(s.gt_mask, s.shapes[s.target].mask)


def test_shapes_do_not_overlap(scenes):
    for s in scenes:
        total = sum(sh.mask.astype(int) for sh in s.shapes)
        assert total.max() <= 1


def test_generation_is_deterministic():
    a = generate_dataset(5, seed=3)
    b = generate_dataset(5, seed=3)
    for x, y in zip(a, b):
        assert x.query == y.query and np.array_equal(x.raster, y.raster) and x.gt_box == y.gt_box


def test_templates_all_appear():
    data = generate_dataset(200, seed=0)
    kinds = Counter(len(s.query.split()) + (s.query.split()[0] in ("left", "right", "top", "bottom"))
                    for s in data)
    assert set(kinds) == {2, 3}
    assert any(s.query.split()[0] in ("left", "right", "top", "bottom") for s in data)


def test_unsatisfiable_config_raises():
    cfg = SceneConfig(size=8, small_radius=(20, 21), large_radius=(20, 21), max_retries=3)
    with pytest.raises(DataError):
        generate_sample(np.random.default_rng(0), cfg)


def test_word_vocab_round_trip(tmp_path):
    v = WordVocab.default()
    assert v.encode("red circle").tolist() == [v.index["red"], v.index["circle"]]
    assert v.encode("purple circle")[0] == 1
    v.save(tmp_path / "vocab.txt")
    assert WordVocab.load(tmp_path / "vocab.txt").tokens == v.tokens


def test_split_dataset():
    items = list(range(10))
    train, val = split_dataset(items, (1.0, 0.0), seed=1)
    assert sorted(train) == items and val == []
    a = split_dataset(items, (0.7, 0.3), seed=5)
    b = split_dataset(items, (0.7, 0.3), seed=5)
    assert a == b and len(a[0]) == 7 and len(a[1]) == 3
    with pytest.raises(DataError):
        split_dataset(items, (0.5, 0.4), seed=0)


def write_fixture(path, records, vocab="vocab.txt"):
    WordVocab.default().save(path.parent / vocab)
    path.write_text(f"# seqground-annotations v1 vocab={vocab}\n" + "\n".join(records) + "\n")


def test_load_three_records(tmp_path):
    write_fixture(tmp_path / "a.txt", [
        '16 16 "red circle" 2 2 6 6 2 2 6 2 6 6 2 6',
        '16 16 "left square" 0 0 4 8 0 0 4 0 4 8 0 8',
        '# comment line',
        '20 10 "blue thing" 0 0 20 10 0 0 20 0 20 10 0 10',
    ])
    stats = Counter()
    samples = load_polygon_annotations(tmp_path / "a.txt", stats=stats)
    assert len(samples) == 3 and stats["loaded"] == 3
    assert samples[0].gt_mask.sum() == 16
    assert samples[2].gt_mask.all() and samples[2].gt_mask.shape == (10, 20)
    assert samples[2].query_ids[1] == 1  # "thing" is out of vocabulary


def test_malformed_records_skipped_and_counted(tmp_path):
    write_fixture(tmp_path / "a.txt", [
        '16 16 "red circle" 2 2 6 6 2 2 6 2 6 6 2 6',
        '16 16 "no polygon" 2 2 6 6',
        '16 sixteen "bad dims" 2 2 6 6 2 2 6 2 6 6 2 6',
        '16 16 "unterminated 2 2 6 6 2 2 6 2 6 6 2 6',
    ])
    stats = Counter()
    samples = load_polygon_annotations(tmp_path / "a.txt", stats=stats)
    assert len(samples) == 1 and stats["skipped"] == 3


def test_box_mismatch_counter(tmp_path):
    write_fixture(tmp_path / "a.txt", [
        '16 16 "red circle" 2 2 6 6 2 2 6 2 6 6 2 6',
        '16 16 "red circle" 2 2 9 6 2 2 6 2 6 6 2 6',   # x2 off by 3 px
        '16 16 "red circle" 2 2 8 6 2 2 6 2 6 6 2 6',   # off by exactly 2 px: tolerated
    ])
    stats = Counter()
    load_polygon_annotations(tmp_path / "a.txt", stats=stats)
    assert stats["box_mismatch"] == 1


def test_missing_header_rejected(tmp_path):
    (tmp_path / "a.txt").write_text('16 16 "red circle" 2 2 6 6 2 2 6 2 6 6 2 6\n')
    with pytest.raises(DataError):
        load_polygon_annotations(tmp_path / "a.txt")


def test_write_then_load_round_trip(tmp_path, scenes):
    write_annotations(tmp_path / "ann.txt", scenes[:8])
    WordVocab.default().save(tmp_path / "vocab.txt")
    stats = Counter()
    back = load_polygon_annotations(tmp_path / "ann.txt", stats=stats)
    assert stats["skipped"] == 0 and stats["box_mismatch"] == 0
    for a, b in zip(scenes[:8], back):
        assert a.query == b.query and a.gt_box == b.gt_box
        assert np.array_equal(a.gt_mask, b.gt_mask)
        assert b.gt_mask.any()
