import json

import numpy as np
import pytest

from deskedit.app.services.dataset_service import (
    MANIFEST, SHAPE_CLASSES, blob_centroid, blob_mask, blob_position_prior, generate_blobs, load_dataset, render_blob,
    write_dataset,
)
from deskedit.app.utils.exceptions import ConfigurationError, DatasetError


def test_render_blob_peaks_at_center():
    image = render_blob(16, (6, 9), 2.0)
    assert image.shape == (16, 16)
    assert np.unravel_index(image.argmax(), image.shape) == (6, 9)
    assert image.max() == pytest.approx(1.0)
    assert image.min() > -1.0 - 1e-12
    assert image[0, 0] == pytest.approx(-1.0, abs=1e-3)


@pytest.mark.parametrize("label", range(len(SHAPE_CLASSES)))
def test_every_shape_class_renders(label):
    image = render_blob(16, (8, 8), 2.0, label=label)
    assert blob_centroid(image) == pytest.approx((8.0, 8.0), abs=1e-9)


def test_wide_blob_extends_along_x():
    mask = blob_mask(render_blob(32, (16, 16), 2.0, label=SHAPE_CLASSES.index("wide")))
    rows, cols = np.nonzero(mask)
    assert np.ptp(cols) > np.ptp(rows)


def test_unknown_shape_class_raises():
    with pytest.raises(ConfigurationError):
        render_blob(16, (8, 8), 2.0, label=len(SHAPE_CLASSES))


def test_generation_is_seeded():
    a, b = generate_blobs(6, image_size=16, seed=4), generate_blobs(6, image_size=16, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, generate_blobs(6, image_size=16, seed=5).images)
    assert a.images.shape == (6, 16, 16)
    assert np.all((a.centers >= 6.0) & (a.centers <= 9.0))


def test_generation_rejects_bad_geometry():
    with pytest.raises(ConfigurationError):
        generate_blobs(-1)
    with pytest.raises(ConfigurationError):
        generate_blobs(2, image_size=4)
    assert len(generate_blobs(0, image_size=16)) == 0


@pytest.mark.parametrize("image_size", [8, 10, 12])
def test_small_images_reject_blobs_that_cannot_fit(image_size):
    with pytest.raises(ConfigurationError, match="no room"):
        generate_blobs(2, image_size=image_size)


def test_smallest_image_fits_small_blobs():
    data = generate_blobs(4, image_size=8, seed=0, scale_range=(1.0, 1.5))
    assert data.images.shape == (4, 8, 8)
    assert np.all((data.centers >= 3.0) & (data.centers <= 4.0))


def test_empty_dataset_keeps_requested_size(tmp_path):
    empty = generate_blobs(0, image_size=16)
    assert empty.image_size == 16
    manifest = json.loads(write_dataset(tmp_path, empty).read_text())
    assert manifest["image_size"] == 16 and manifest["count"] == 0
    assert load_dataset(tmp_path).image_size == 16



def test_dataset_write_is_byte_identical_and_reloads(tmp_path):
    data = generate_blobs(4, image_size=16, seed=1)
    first = write_dataset(tmp_path / "a", data)
    second = write_dataset(tmp_path / "b", generate_blobs(4, image_size=16, seed=1))
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "a" / "blob_00003.tnsr").read_bytes() == (tmp_path / "b" / "blob_00003.tnsr").read_bytes()

    loaded = load_dataset(tmp_path / "a")
    np.testing.assert_array_equal(loaded.images, data.images)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    np.testing.assert_array_equal(loaded.centers, data.centers)
    assert loaded.image_size == 16


def test_loading_a_corrupt_dataset_raises(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    write_dataset(tmp_path, generate_blobs(1, image_size=16))
    (tmp_path / MANIFEST).write_text("{not json")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_split_keeps_the_trailing_fraction():
    data = generate_blobs(10, image_size=16, seed=2)
    train, held = data.split(0.2)
    assert len(train) == 8 and len(held) == 2
    np.testing.assert_array_equal(held.images, data.images[8:])


def test_position_prior_grid():
    prior = blob_position_prior(16, scale=2.0, std=0.1)
    assert len(prior.weights) == 36
    assert prior.shape == (16, 16)
    np.testing.assert_array_equal(prior.means[0], render_blob(16, (5, 5), 2.0))
    explicit = blob_position_prior(16, positions=[(4, 4), (8, 8)])
    np.testing.assert_allclose(explicit.weights, [0.5, 0.5])
    with pytest.raises(ConfigurationError):
        blob_position_prior(16, positions=[])


def test_centroid_and_mask_of_background():
    background = np.full((8, 8), -1.0)
    assert np.isnan(blob_centroid(background)[0])
    assert not blob_mask(background).any()
    mask = blob_mask(render_blob(16, (8, 8), 2.0))
    assert mask[8, 8] == 1.0 and mask[0, 0] == 0.0
