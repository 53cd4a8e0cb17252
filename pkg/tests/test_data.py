import json
import math

import numpy as np
import pytest

from sirilab import data as D
from sirilab.data import (VOCAB, DatasetFormatError, GenerationError, ResolveError, SceneSpec, ShapeInstance,
                          build_corpus, build_split, check_scene, generate_scene, load_dataset, realize_expression,
                          render, resolve_expression, save_dataset)


def shape(kind, color, x, y, size="small", r=0.08):
    return ShapeInstance(kind, color, size, (x, y), r)


@pytest.fixture(scope="module")
def corpus():
    return build_split(0, 600)


def test_scene_determinism():
    assert generate_scene(7) == generate_scene(7)
    assert json.dumps(generate_scene(7).to_json()) == json.dumps(generate_scene(7).to_json())


def test_scene_invariants_over_1000_seeds():
    bad = 0
    for seed in range(1000):
        scene = generate_scene(seed)
        objs = scene.objects
        kinds = [o.kind for o in objs]
        assert len(set(kinds)) < len(kinds)
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                d = math.dist(objs[i].center, objs[j].center)
                bad += d < 1.5 * max(objs[i].radius, objs[j].radius)
        for o in objs:
            assert 0 <= o.center[0] - o.radius and o.center[0] + o.radius <= 1
            assert 0 <= o.center[1] - o.radius and o.center[1] + o.radius <= 1
    assert bad == 0


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        generate_scene(-1)


def test_placement_failure_names_seed():
    with pytest.raises(GenerationError, match="seed 5"):
        generate_scene(5, max_tries=0)


def test_attribute_expression():
    scene = SceneSpec((shape("circle", "red", 0.2, 0.2), shape("circle", "blue", 0.6, 0.6),
                       shape("square", "green", 0.2, 0.8)), 0, 1)
    words = VOCAB.decode(realize_expression(scene, relation_ratio=0.0))
    assert words == ["the", "red", "circle"]


def test_spatial_expression_for_identical_twins():
    scene = SceneSpec((shape("circle", "red", 0.7, 0.5), shape("circle", "red", 0.2, 0.5),
                       shape("square", "green", 0.5, 0.2)), 1, 3)
    expr = realize_expression(scene)
    words = VOCAB.decode(expr)
    assert set(words) & set(D.BINARY_RELATIONS + D.SUPERLATIVES)
    assert resolve_expression(scene, expr) == {1}


def test_unique_description_impossible():
    # identical twins stacked on a diagonal are separable; perfect duplicates at one x and y are not
    twins = SceneSpec((shape("circle", "red", 0.3, 0.3), shape("circle", "red", 0.3, 0.3),
                       shape("square", "blue", 0.8, 0.8)), 0, 9)
    with pytest.raises(GenerationError):
        realize_expression(twins)


def test_resolver_examples():
    scene = SceneSpec((shape("circle", "red", 0.7, 0.5), shape("circle", "blue", 0.2, 0.5),
                       shape("square", "green", 0.5, 0.2)), 0, 0)
    assert resolve_expression(scene, ["circle"]) == {0, 1}
    assert resolve_expression(scene, ["leftmost", "circle"]) == {1}
    assert resolve_expression(scene, []) == {0, 1, 2}
    assert resolve_expression(scene, ["the", "circle", "right-of", "the", "blue", "circle"]) == {0}
    assert resolve_expression(scene, ["circle", "below", "square"]) == {0, 1}
    assert resolve_expression(scene, VOCAB.encode(["the", "square"])) == {2}


@pytest.mark.parametrize("words", [["circle", "circle"], ["left-of"], ["circle", "of"], ["circle", "above"]])
def test_resolver_rejects_garbage(words):
    scene = generate_scene(0)
    with pytest.raises(ResolveError):
        resolve_expression(scene, words)


def test_referent_uniqueness(corpus):
    for s in corpus:
        assert resolve_expression(s.scene, s.expression) == {s.scene.target_index}
        assert len(s.expression) <= D.MAX_EXPR_LEN


def test_corpus_statistics(corpus):
    assert corpus.confusable_fraction() >= 0.5
    n_spatial = sum(bool(set(VOCAB.decode(s.expression)) & set(D.BINARY_RELATIONS + D.SUPERLATIVES))
                    for s in corpus)
    assert 0.25 < n_spatial / len(corpus) < 0.85


def test_box_validity(corpus):
    for s in corpus:
        x1, y1, x2, y2 = s.target_box
        assert 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1
        ref = np.asarray(s.scene.objects[s.scene.target_index].box, dtype=np.float32)
        np.testing.assert_array_equal(np.asarray(s.target_box, dtype=np.float32), ref)
        check_scene(s.scene)


def test_render_center_pixels():
    scene = generate_scene(11)
    img = render(scene, 64, 64)
    assert img.shape == (64, 64, 3)
    assert np.array_equal(img, render(scene, 64, 64))
    for o in scene.objects:
        row, col = int(o.center[1] * 64), int(o.center[0] * 64)
        np.testing.assert_allclose(img[row, col], D.COLOR_RGB[o.color], atol=1e-7)
    corner = img[0, 0] if all(o.center[0] > 0.1 or o.center[1] > 0.1 for o in scene.objects) else None
    if corner is not None:
        np.testing.assert_array_equal(corner, [0.5, 0.5, 0.5])


def test_render_rejects_small_canvas():
    with pytest.raises(ValueError):
        render(generate_scene(0), 16, 16)


def test_split_determinism_and_disjoint_ranges():
    assert build_split(0, 30) == build_split(0, 30)
    splits = build_corpus(0, 20, 10, 10)
    ranges = [set(s.seeds) for s in splits.values()]
    assert not ranges[0] & ranges[1] and not ranges[0] & ranges[2] and not ranges[1] & ranges[2]


def test_fraction_prefix():
    ds = build_split(0, 2000)
    quarter = ds.fraction(0.25)
    assert len(quarter) == 500
    assert quarter.seeds == list(range(500))


def test_save_load_roundtrip(tmp_path, corpus):
    ds = corpus[:50]
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back == ds
    for a, b in zip(ds, back):
        assert a.expression == b.expression and a.target_box == b.target_box and a.scene == b.scene
        np.testing.assert_array_equal(a.image, b.image)


def test_load_rejects_wrong_version(tmp_path, corpus):
    save_dataset(corpus[:3], tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    m["version"] = 99
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(tmp_path / "d")


def test_load_rejects_truncated_records(tmp_path, corpus):
    save_dataset(corpus[:3], tmp_path / "d")
    p = tmp_path / "d" / "records.bin"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "d")


def test_2000_sample_container(tmp_path):
    ds = build_split(0, 2000)
    save_dataset(ds, tmp_path / "train")
    m = json.loads((tmp_path / "train" / "manifest.json").read_text())
    assert m["count"] == 2000
    assert (tmp_path / "train" / "records.bin").stat().st_size == 2000 * (16 * 2 + 4 * 4)
    assert m["vocabulary"]["tokens"][0] == "<pad>"
