import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from compression import CompressOptions
from restoration.dataset import (MANIFEST_NAME, condition_for, iter_epoch, load_manifest, sample_batch,
                                 stack_batch, synthesize_dataset, verify_manifest)
from splatrestore.errors import FormatError, InputError, ShapeError
from splatrestore.image_io import read_f32img, read_image, read_png, to_uint8, write_f32img, write_png
from splatrestore.raster import render
from splatrestore.scene import synth_scene


def _scenes(count=3):
    scenes = []
    for i in range(count):
        bundle = synth_scene(seed=40 + i, n_primitives=32, n_train_views=2, n_test_views=1, image_size=16)
        bundle.metadata["scene_id"] = i
        scenes.append(bundle)
    return scenes


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    scenes = _scenes()
    manifest = synthesize_dataset(scenes, levels=[0, 2], out_dir=root, c_min=8, n_levels=3,
                                  options=CompressOptions(finetune_iters=1), seed=5)
    return scenes, manifest


def test_condition_is_stable_and_in_range():
    assert condition_for(3) == condition_for(3)
    assert all(0 <= condition_for(i, 16) < 16 for i in range(50))
    assert len({condition_for(i, 16) for i in range(50)}) > 1
    with pytest.raises(InputError):
        condition_for(1, 0)


def test_manifest_counts_pairs_and_coded_scenes(dataset):
    _, manifest = dataset
    assert manifest.scene_ids == [0, 1, 2]
    assert len(manifest) == 3 * 2 * 2
    assert len(manifest.coded) == 3 * 2
    assert manifest.levels == [0, 2]
    assert all(record["condition"] == condition_for(record["scene"]) for record in manifest.pairs)
    assert verify_manifest(manifest) == 2 * len(manifest) + len(manifest.coded)


def test_clean_pair_matches_direct_render(dataset):
    scenes, manifest = dataset
    record = manifest.pairs_for(1)[0]
    pair = manifest.load_pair(record)
    bundle = scenes[1]
    expected = render(bundle.gaussians, bundle.train_views[record["view"]], bundle.background).image
    torch.testing.assert_close(pair.clean, expected.to(torch.float32))
    assert pair.degraded.shape == pair.clean.shape == (16, 16, 3)


def test_load_manifest_roundtrip(dataset):
    _, manifest = dataset
    loaded = load_manifest(manifest.root)
    assert loaded.to_dict() == manifest.to_dict()
    assert loaded.generation["c_min"] == 8


def test_manifest_rejects_bad_json_and_schema(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(FormatError):
        load_manifest(tmp_path)
    (tmp_path / MANIFEST_NAME).write_text(json.dumps({"version": 1, "pairs": []}))
    with pytest.raises(FormatError):
        load_manifest(tmp_path)
    with pytest.raises(InputError):
        load_manifest(tmp_path / "elsewhere")


def test_verify_detects_tampering(tmp_path):
    manifest = synthesize_dataset(_scenes(1), levels=[2], out_dir=tmp_path, c_min=8, n_levels=3,
                                  options=CompressOptions(finetune_iters=0))
    target = tmp_path / manifest.pairs[0]["degraded"]
    data = bytearray(target.read_bytes())
    data[-1] ^= 0xFF
    target.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        verify_manifest(manifest)
    target.unlink()
    with pytest.raises(FormatError):
        verify_manifest(manifest)


def test_refuses_to_overwrite_a_dataset(dataset):
    scenes, manifest = dataset
    with pytest.raises(InputError):
        synthesize_dataset(scenes, levels=[0], out_dir=manifest.root, c_min=8, n_levels=3)


def test_level_out_of_range(tmp_path):
    with pytest.raises(InputError):
        synthesize_dataset(_scenes(1), levels=[3], out_dir=tmp_path, c_min=8, n_levels=3)


def test_failed_synthesis_removes_partial_output(tmp_path):
    scenes = _scenes(2)
    scenes[1] = replace(scenes[1], train_views=())
    with pytest.raises(InputError):
        synthesize_dataset(scenes, levels=[2], out_dir=tmp_path, c_min=8, n_levels=3,
                           options=CompressOptions(finetune_iters=0))
    assert not (tmp_path / "scene_0").exists()
    assert not (tmp_path / MANIFEST_NAME).exists()


def test_sample_batch_draws_distinct_scenes(dataset):
    _, manifest = dataset
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = sample_batch(manifest, 3, rng)
        assert sorted(pair.scene_id for pair in batch) == [0, 1, 2]
    with pytest.raises(InputError):
        sample_batch(manifest, 4, rng)
    with pytest.raises(InputError):
        sample_batch(manifest, 0, rng)


def test_sampling_is_reproducible(dataset):
    _, manifest = dataset
    a = sample_batch(manifest, 2, np.random.default_rng(9))
    b = sample_batch(manifest, 2, np.random.default_rng(9))
    assert [(p.scene_id, p.view_id, p.level) for p in a] == [(p.scene_id, p.view_id, p.level) for p in b]


def test_iter_epoch_visits_each_scene_once(dataset):
    _, manifest = dataset
    batches = list(iter_epoch(manifest, 2, np.random.default_rng(1)))
    assert [len(batch) for batch in batches] == [2, 1]
    assert sorted(pair.scene_id for batch in batches for pair in batch) == [0, 1, 2]


def test_stack_batch_makes_channel_first_latents(dataset):
    _, manifest = dataset
    degraded, clean, conditions = stack_batch(sample_batch(manifest, 2, np.random.default_rng(2)))
    assert degraded.shape == clean.shape == (2, 3, 16, 16)
    assert conditions.dtype == torch.long and conditions.shape == (2,)
    with pytest.raises(InputError):
        stack_batch([])


def test_f32img_is_lossless_and_checked(tmp_path):
    image = torch.rand(5, 7, 3)
    path = tmp_path / "x.f32img"
    assert write_f32img(image, path) == 16 + 5 * 7 * 3 * 4
    assert torch.equal(read_image(path), image)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_f32img(path)
    with pytest.raises(ShapeError):
        write_f32img(torch.rand(5, 7), path)


def test_png_quantizes_half_up(tmp_path):
    image = torch.tensor([[[0.0, 0.5, 1.0], [-1.0, 2.0, 0.25]]])
    np.testing.assert_array_equal(to_uint8(image), [[[0, 128, 255], [0, 255, 64]]])
    path = tmp_path / "x.png"
    write_png(image, path)
    torch.testing.assert_close(read_png(path), torch.from_numpy(to_uint8(image) / 255.0).float())
    with pytest.raises(FormatError):
        read_image(tmp_path / "x.jpg")
