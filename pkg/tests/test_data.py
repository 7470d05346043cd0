import numpy as np
import pytest

from mixunmix.data import CLASS_NAMES, generate_dataset, generate_scenes, render_scene, stack_images


def test_empty_labeled_split():
    lab, unl = generate_dataset(0, 0, 5)
    assert lab == [] and len(unl) == 5


def test_same_seed_same_bytes():
    a, _ = generate_dataset(7, 4, 2)
    b, _ = generate_dataset(7, 4, 2)
    assert stack_images(a).tobytes() == stack_images(b).tobytes()
    c, _ = generate_dataset(8, 4, 2)
    assert stack_images(a).tobytes() != stack_images(c).tobytes()


def test_class_frequencies_uniform():
    scenes = generate_scenes(3, 1000)
    classes = np.concatenate([s.classes for s in scenes])
    freq = np.bincount(classes, minlength=3) / classes.size
    assert len(CLASS_NAMES) == 3
    assert np.all(np.abs(freq - 1 / 3) <= 0.05)


def test_objects_inside_image_and_large_enough():
    for s in generate_scenes(4, 200):
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert len(s.boxes) >= 1
        b = s.boxes
        assert np.all(b[:, :2] >= 0) and np.all(b[:, 2:] <= 64)
        assert np.all(b[:, 2:] - b[:, :2] >= 8)


def test_unlabeled_targets_are_hidden():
    _, unl = generate_dataset(1, 0, 1)
    with pytest.raises(PermissionError):
        unl[0].targets()
    assert len(unl[0].targets(reveal=True)) == len(unl[0].boxes)


def test_odd_image_size_renders():
    s = render_scene(np.random.default_rng(0), size=60)
    assert s.image.shape == (3, 60, 60)


def test_negative_split_rejected():
    with pytest.raises(ValueError):
        generate_dataset(0, -1, 2)
