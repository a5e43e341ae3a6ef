import json
import math

import numpy as np
import pytest
import torch

from rankcount.datasets import (
    AugmentationConfig,
    DatasetManifest,
    ManifestRecord,
    SplitConfig,
    augment,
    augment_batch,
    draw_augmentation,
    load_images,
    load_manifest,
    load_point_annotations,
    read_image,
    resize,
    split,
    write_image,
    write_noisy_manifest,
    write_point_annotations,
    write_ranking_manifest,
)
from rankcount.exceptions import DataValidationError
from rankcount.synth import (
    RenderedImage,
    make_noisy_count_dataset,
    make_ranking_dataset,
    sample_source_scenes,
)


@pytest.fixture(scope="module")
def pairs():
    sources = sample_source_scenes(10, rng_seed=0, max_count=30, width=32, height=32)
    return make_ranking_dataset(sources, variants_per_source=3, rng_seed=0)


@pytest.fixture
def ranking_dir(tmp_path, pairs):
    write_ranking_manifest(pairs, tmp_path)
    return tmp_path


def _lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


def _rewrite(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


# ---------------------------------------------------------------------------
# records and round trips


def test_record_json_key_order():
    r = ManifestRecord("a", "noisy", "images/a.png", 3, prompt_count=5)
    assert list(json.loads(r.to_json())) == ["id", "role", "image_path", "prompt_count", "hidden_count"]
    r = ManifestRecord("b", "rank_syn", "images/b.png", None, pair_id="s")
    assert json.loads(r.to_json())["hidden_count"] is None


def test_ranking_manifest_round_trip(ranking_dir, pairs):
    m = load_manifest(ranking_dir / "manifest.jsonl")
    assert len(m) == 10 + 30
    assert len(m.pairs()) == 30
    for (real, syn), p in zip(m.pairs(), pairs):
        assert real.pair_id == syn.pair_id == p.source_id
        assert real.hidden_count == p.hidden_real_count
        assert syn.hidden_count == p.hidden_syn_count
        # PNG storage is lossless for rendered images
        assert np.array_equal(read_image(m.path_of(syn)).pixels, p.synthetic.pixels)
        assert np.array_equal(read_image(m.path_of(real)).pixels, p.real.pixels)


def test_noisy_manifest_round_trip(tmp_path):
    ex = make_noisy_count_dataset(counts=(2, 4), per_count=2, empty_scenes=1, rng_seed=0,
                                  width=24, height=24)
    write_noisy_manifest(ex, tmp_path)
    m = load_manifest(tmp_path / "manifest.jsonl")
    assert [r.prompt_count for r in m.records] == [2, 2, 4, 4, 0]
    assert [r.hidden_count for r in m.records] == [e.hidden_true_count for e in ex]
    x = load_images(m, m.records)
    assert x.shape == (5, 3, 24, 24)
    assert torch.equal(x[0], torch.from_numpy(ex[0].image.pixels).permute(2, 0, 1))


def test_load_images_resizes(ranking_dir):
    m = load_manifest(ranking_dir / "manifest.jsonl")
    assert load_images(m, m.records[:3], (16, 20)).shape == (3, 3, 16, 20)


# ---------------------------------------------------------------------------
# validation errors


def test_missing_manifest(tmp_path):
    with pytest.raises(DataValidationError, match="not found"):
        load_manifest(tmp_path / "nope.jsonl")
    assert DataValidationError.exit_code == 2


@pytest.mark.parametrize("mutate,message", [
    (lambda o: o[1].pop("role"), "record 1: missing field 'role'"),
    (lambda o: o[1].update(role="other"), "record 1: unknown role"),
    (lambda o: o[2].update(hidden_count=-1), "record 2: hidden_count must be a non-negative"),
    (lambda o: o[2].update(extra=1), "record 2: unknown fields"),
    (lambda o: o[1].pop("pair_id"), "record 1: ranking records need a pair_id"),
    (lambda o: o[3].update(id=o[2]["id"]), "record 3: duplicate id"),
    (lambda o: o[1].update(pair_id="ghost"), "record 1: pair_id 'ghost' references no real image"),
])
def test_manifest_errors_name_the_record(ranking_dir, mutate, message):
    path = ranking_dir / "manifest.jsonl"
    objs = _lines(path)
    mutate(objs)
    _rewrite(path, objs)
    with pytest.raises(DataValidationError, match=message.replace("(", r"\(")):
        load_manifest(path)


def test_real_without_synthetic_is_rejected(ranking_dir):
    path = ranking_dir / "manifest.jsonl"
    objs = [o for o in _lines(path) if not (o["pair_id"] == "src00001" and o["role"] == "rank_syn")]
    _rewrite(path, objs)
    with pytest.raises(DataValidationError, match="has no synthetic image"):
        load_manifest(path)


def test_malformed_json_line(ranking_dir):
    path = ranking_dir / "manifest.jsonl"
    text = path.read_text().splitlines()
    text[4] = "{not json"
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(DataValidationError, match="record 4: malformed JSON"):
        load_manifest(path)


def test_noisy_record_needs_prompt_count(tmp_path):
    write_image(np.zeros((4, 4, 3)), tmp_path / "a.png")
    _rewrite(tmp_path / "m.jsonl", [{"id": "a", "role": "noisy", "image_path": "a.png", "hidden_count": 0}])
    with pytest.raises(DataValidationError, match="record 0: noisy records need a prompt_count"):
        load_manifest(tmp_path / "m.jsonl")


def test_missing_and_corrupt_images(ranking_dir):
    path = ranking_dir / "manifest.jsonl"
    objs = _lines(path)
    (ranking_dir / objs[5]["image_path"]).unlink()
    with pytest.raises(DataValidationError, match="record 5: missing image file"):
        load_manifest(path)
    load_manifest(path, check_files=False)
    (ranking_dir / objs[5]["image_path"]).write_bytes(b"not a png")
    with pytest.raises(DataValidationError, match="record 5: cannot decode"):
        load_manifest(path)


# ---------------------------------------------------------------------------
# splitting


def test_split_groups_by_source(ranking_dir):
    m = load_manifest(ranking_dir / "manifest.jsonl")
    train, val = split(m, SplitConfig(0.25, seed=3))
    g_train, g_val = set(train.groups()), set(val.groups())
    assert not g_train & g_val
    assert g_train | g_val == set(m.groups())
    assert len(g_val) == math.floor(0.25 * 10 + 0.5)
    assert len(train) + len(val) == len(m)
    # deterministic in the seed
    again, _ = split(m, SplitConfig(0.25, seed=3))
    assert again.records == train.records


def test_split_config_validation():
    with pytest.raises(ValueError):
        SplitConfig(1.0)
    with pytest.raises(ValueError):
        split(DatasetManifest(()), SplitConfig())


# ---------------------------------------------------------------------------
# augmentation


def test_augment_applies_identical_transform_to_both_sides(pairs):
    p = pairs[4]
    cfg = AugmentationConfig(horizontal_flip_prob=1.0, brightness_jitter=0.0, resize_to=(32, 32))
    out = augment(p, cfg, rng_seed=0)
    assert np.array_equal(out.real.pixels, p.real.pixels[:, ::-1])
    assert np.array_equal(out.synthetic.pixels, p.synthetic.pixels[:, ::-1])
    assert out.hidden_real_count == p.hidden_real_count


def test_augment_brightness_shared(pairs):
    p = pairs[0]
    cfg = AugmentationConfig(horizontal_flip_prob=0.0, brightness_jitter=0.2, resize_to=(32, 32))
    out = augment(p, cfg, rng_seed=5)
    _, factors = draw_augmentation(np.random.default_rng(5), 1, cfg)
    k = np.float32(factors[0])
    assert np.allclose(out.real.pixels, np.clip(p.real.pixels * k, 0, 1), atol=1e-6)
    assert np.allclose(out.synthetic.pixels, np.clip(p.synthetic.pixels * k, 0, 1), atol=1e-6)


def test_augment_resizes_to_configured_size(pairs):
    out = augment(pairs[0], AugmentationConfig(resize_to=(40, 52)), rng_seed=1)
    assert out.real.shape == (40, 52, 3) and out.synthetic.shape == (40, 52, 3)


def test_augment_batch_per_pair_flags():
    x = torch.rand(3, 3, 4, 5)
    y = torch.rand(3, 3, 4, 5)
    a, b = augment_batch(x, y, [True, False, True], [1.0, 0.5, 1.0])
    assert torch.equal(a[0], x[0].flip(-1)) and torch.equal(b[2], y[2].flip(-1))
    assert torch.allclose(a[1], x[1] * 0.5)


def test_draw_augmentation_ranges():
    flips, factors = draw_augmentation(np.random.default_rng(0), 5000, AugmentationConfig())
    assert 0.45 < flips.mean() < 0.55
    assert factors.min() >= 0.8 and factors.max() <= 1.2


def test_resize_helper():
    im = RenderedImage(np.random.default_rng(0).random((10, 12, 3)).astype(np.float32), "x")
    out = resize(im, (5, 6))
    assert out.shape == (5, 6, 3) and out.source_id == "x"
    assert np.array_equal(resize(im, (10, 12)).pixels, im.pixels)


# ---------------------------------------------------------------------------
# point annotations


def test_point_annotations_round_trip(tmp_path):
    path = write_point_annotations([("images/a.png", [(1, 2), (3.5, 4)]), ("/abs/b.png", [])],
                                   tmp_path / "ann.json")
    out = load_point_annotations(path)
    assert out == [(str(tmp_path / "images/a.png"), 2), ("/abs/b.png", 0)]


@pytest.mark.parametrize("payload,message", [
    ("[{\"image_path\": \"a.png\"}]", "entry 0"),
    ("[{\"image_path\": \"a.png\", \"points\": [[1, -2]]}]", "negative point"),
    ("[{\"image_path\": \"a.png\", \"points\": [[1, 2, 3]]}]", "number pairs"),
    ("{\"foo\": 1}", "expected a list"),
    ("[{", "malformed"),
])
def test_point_annotation_errors(tmp_path, payload, message):
    p = tmp_path / "ann.json"
    p.write_text(payload)
    with pytest.raises(DataValidationError, match=message):
        load_point_annotations(p)


def test_point_annotations_accept_wrapped_dict(tmp_path):
    p = tmp_path / "ann.json"
    p.write_text(json.dumps({"images": [{"image_path": "x.png", "points": [[0, 0]]}]}))
    assert load_point_annotations(p) == [(str(tmp_path / "x.png"), 1)]
