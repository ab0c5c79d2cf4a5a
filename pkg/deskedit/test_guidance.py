import numpy as np
import pytest

from deskedit.app.services.guidance_service import (
    EditSpec, energy_content, energy_edit, guided_eps, identity_spec, regional_gradient, window_indices,
)
from deskedit.app.services.sampler_service import BankRecord, MemoryBank
from deskedit.app.utils.exceptions import BankError, ConfigurationError, DimensionError
from deskedit.app.utils.tensor import Tensor


def square_mask(size: int = 8) -> np.ndarray:
    mask = np.zeros((size, size))
    mask[2:6, 2:6] = 1.0
    return mask


def bank_for(latent: np.ndarray, t: int = 1, reference: np.ndarray = None) -> MemoryBank:
    bank = MemoryBank(latent.shape)
    bank.put(BankRecord(t, latent, z_ref=reference))
    return bank


@pytest.mark.parametrize("task, mask, rmap, reference_id", [
    ("teleport", square_mask(), [], None),
    ("move", square_mask() * 2.0, [], None),
    ("move", square_mask(), [[0, 0, 0, 0]], None),
    ("move", square_mask(), [[0, 0, 3, 3], [1, 1, 3, 3]], None),
    ("move", square_mask(), [[0, 9, 3, 3]], None),
    ("paste", square_mask(), [[0, 0, 3, 3]], None),
])
def test_invalid_edit_specs_raise(task, mask, rmap, reference_id):
    with pytest.raises(ConfigurationError):
        EditSpec(task, mask, np.array(rmap, dtype=np.int64), reference_id)


def test_mask_must_be_two_dimensional():
    with pytest.raises(DimensionError):
        EditSpec("move", np.zeros((2, 4, 4)))


def test_identity_spec():
    spec = identity_spec((8, 8))
    assert spec.is_identity
    assert not EditSpec("move", square_mask(), np.array([[2, 2, 3, 3]])).is_identity
    assert identity_spec((8, 8), "paste").reference_id is not None


def test_spec_file_roundtrip(tmp_path):
    spec = EditSpec("paste", square_mask(), np.array([[0, 0, 3, 3], [0, 1, 3, 4]]), "reference")
    loaded = EditSpec.from_file(spec.to_file(tmp_path / "spec.mask.tnsr"))
    np.testing.assert_array_equal(loaded.mask, spec.mask)
    np.testing.assert_array_equal(loaded.region_map, spec.region_map)
    assert loaded.reference_id == "reference"
    assert loaded.destination_centroid() == (3.0, 3.5)


def test_windows_are_clipped_into_the_grid():
    idx = window_indices(np.array([[0, 0], [7, 7]]), (8, 8))
    assert sorted(idx[0]) == [0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27]
    assert idx[1].max() == 63 and idx[1].min() == 4 * 8 + 4
    with pytest.raises(ConfigurationError):
        window_indices(np.array([[0, 0]]), (3, 3))


def test_energies_vanish_at_the_memory_bank_latent(rng):
    latent = rng.standard_normal((8, 8))
    spec = EditSpec("move", square_mask(), np.array([[3, 3, 3, 3], [4, 4, 4, 4]]))
    bank = bank_for(latent)
    assert energy_edit(Tensor(latent), bank, spec, 1).item() == pytest.approx(0.0, abs=1e-12)
    assert energy_content(Tensor(latent), bank, spec, 1).item() == pytest.approx(0.0, abs=1e-12)


def test_edit_energy_uses_reference_latent_for_paste(rng):
    latent, reference = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    spec = EditSpec("paste", square_mask(), np.array([[3, 3, 3, 3]]), "reference")
    assert energy_edit(Tensor(reference), bank_for(latent, reference=reference), spec, 1).item() == \
        pytest.approx(0.0, abs=1e-12)
    with pytest.raises(BankError):
        energy_edit(Tensor(reference), bank_for(latent), spec, 1)


def test_missing_bank_timestep_raises(rng):
    spec = EditSpec("move", square_mask(), np.array([[3, 3, 4, 4]]))
    with pytest.raises(BankError):
        energy_edit(Tensor(rng.standard_normal((8, 8))), bank_for(rng.standard_normal((8, 8)), t=5), spec, 1)


def test_content_energy_needs_patch_divisible_latent(rng):
    spec = EditSpec("move", np.zeros((6, 6)), np.zeros((0, 4)))
    with pytest.raises(ConfigurationError):
        energy_content(Tensor(rng.standard_normal((6, 6))), bank_for(rng.standard_normal((6, 6))), spec, 1)


def test_full_mask_has_zero_content_energy(rng):
    spec = EditSpec("move", np.ones((8, 8)), np.array([[1, 1, 2, 2]]))
    assert energy_content(Tensor(rng.standard_normal((8, 8))), bank_for(rng.standard_normal((8, 8))), spec, 1).item() == 0.0


def test_regional_gradient_blends_by_mask(rng):
    spec = EditSpec("move", square_mask(), np.array([[1, 1, 3, 3], [1, 2, 3, 4], [2, 1, 4, 3]]))
    bank = bank_for(rng.standard_normal((8, 8)))
    z = Tensor(rng.standard_normal((8, 8)))
    report = regional_gradient(z, bank, spec, 1)
    n_edit = report.edit_grad.data / (np.abs(report.edit_grad.data).max() + 1e-8)
    n_content = report.content_grad.data / (np.abs(report.content_grad.data).max() + 1e-8)
    inside, outside = spec.mask > 0, spec.mask == 0
    np.testing.assert_array_equal(report.grad.data[inside], n_edit[inside])
    np.testing.assert_array_equal(report.grad.data[outside], n_content[outside])
    assert np.abs(report.grad.data).max() <= 1.0 + 1e-12
    assert report.e_edit > 0.0 and report.e_content > 0.0

    global_sum = regional_gradient(z, bank, spec, 1, regional=False).grad.data
    np.testing.assert_allclose(global_sum, n_edit + n_content, rtol=1e-12)

    edit_only = regional_gradient(z, bank, spec, 1, content=False)
    assert edit_only.e_content == 0.0
    assert not np.any(edit_only.grad.data[outside])


def test_descending_the_edit_gradient_lowers_the_energy(rng):
    spec = EditSpec("move", square_mask(), np.array([[1, 1, 3, 3], [1, 2, 3, 4]]))
    bank = bank_for(rng.standard_normal((8, 8)))
    z = Tensor(rng.standard_normal((8, 8)))
    report = regional_gradient(z, bank, spec, 1, content=False)
    stepped = Tensor(z.data - 1e-3 * report.edit_grad.data)
    assert energy_edit(stepped, bank, spec, 1).item() < energy_edit(z, bank, spec, 1).item()


def test_guided_eps_adds_scaled_gradient(rng):
    spec = EditSpec("move", square_mask(), np.array([[1, 1, 3, 3]]))
    report = regional_gradient(Tensor(rng.standard_normal((8, 8))), bank_for(rng.standard_normal((8, 8))), spec, 1)
    eps = Tensor(rng.standard_normal((8, 8)))
    np.testing.assert_allclose(guided_eps(eps, report, 0.25).data, eps.data + 0.25 * report.grad.data, rtol=1e-12)
    with pytest.raises(DimensionError):
        guided_eps(Tensor(np.zeros((4, 4))), report, 0.1)


def test_edit_energy_of_orthogonal_and_opposite_windows():
    latent = np.ones((8, 8))
    spec = EditSpec("move", square_mask(), np.array([[3, 3, 3, 3]]))
    # window rows 1..4 alternate sign, so every window is orthogonal to all-ones
    alternating = np.where(np.arange(8)[:, None] % 2 == 0, 1.0, -1.0) * np.ones((1, 8))
    assert energy_edit(Tensor(alternating), bank_for(latent), spec, 1).item() == pytest.approx(1.0, abs=1e-12)
    assert energy_edit(Tensor(-latent), bank_for(latent), spec, 1).item() == pytest.approx(2.0, abs=1e-12)


def test_full_mask_gradient_is_the_normalized_edit_gradient(rng):
    spec = EditSpec("move", np.ones((8, 8)), np.array([[2, 2, 5, 5], [3, 2, 6, 5]]))
    report = regional_gradient(Tensor(rng.standard_normal((8, 8))), bank_for(rng.standard_normal((8, 8))), spec, 1)
    edit = report.edit_grad.data
    assert np.abs(edit).max() > 0.0
    np.testing.assert_array_equal(report.grad.data, edit / (np.abs(edit).max() + 1e-8))
    assert report.e_content == 0.0
