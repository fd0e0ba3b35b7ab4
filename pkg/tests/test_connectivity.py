"""Tests for component labeling against a flood-fill oracle, and the density penalty."""

import numpy as np
import pytest
from scipy.ndimage import maximum_filter

from topostyle import connectivity as C


def flood_fill_components(mask):
    """Independent oracle: explicit stack-based 8-connected flood fill."""
    h, w = mask.shape
    comp = np.zeros((h, w), dtype=np.int64)
    next_id = 0
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and comp[si, sj] == 0:
                next_id += 1
                comp[si, sj] = next_id
                stack = [(si, sj)]
                while stack:
                    a, b = stack.pop()
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            na, nb = a + da, b + db
                            if 0 <= na < h and 0 <= nb < w \
                                    and mask[na, nb] and comp[na, nb] == 0:
                                comp[na, nb] = next_id
                                stack.append((na, nb))
    return comp


def canonical_partition(labels):
    """Relabel components by first appearance so partitions compare exactly."""
    flat = labels.ravel()
    out = np.zeros_like(flat)
    seen = {}
    for idx in np.flatnonzero(flat):
        out[idx] = seen.setdefault(flat[idx], len(seen) + 1)
    return out.reshape(labels.shape)


# ---------------------------------------------------------------- binarize

def test_binarize_basics():
    assert not C.binarize(np.zeros((3, 3)), 0.1).any()
    assert C.binarize(np.ones((3, 3)), 0.1).all()
    got = C.binarize(np.array([[0.05, 0.1, 0.95]]), 0.1)
    assert got.tolist() == [[False, True, True]]  # threshold is inclusive


def test_binarize_rejects_bad_threshold():
    for t in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            C.binarize(np.zeros((2, 2)), t)


# ---------------------------------------------------------------- labeling

def test_full_mask_single_component_labeled_hw():
    labels = C.ccl_labels(np.ones((5, 4), dtype=bool))
    assert labels.converged
    assert np.all(labels.q == 20)  # max row-major index propagates everywhere
    assert labels.counts == {20: 20}


def test_empty_mask_no_components():
    labels = C.ccl_labels(np.zeros((4, 4), dtype=bool))
    assert np.all(labels.q == 0)
    assert labels.counts == {}


def test_two_blobs_match_flood_fill():
    mask = np.zeros((6, 6), dtype=bool)
    mask[0:2, 0:2] = True
    mask[4:6, 3:6] = True  # separated by more than one diagonal step
    labels = C.ccl_labels(mask)
    oracle = flood_fill_components(mask)
    assert len(labels.counts) == 2
    assert np.array_equal(canonical_partition(labels.q), canonical_partition(oracle))


def test_diagonal_touch_is_connected():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True  # 8-connectivity chains diagonals
    labels = C.ccl_labels(mask)
    assert len(labels.counts) == 1


def test_random_masks_match_flood_fill_exactly():
    rng = np.random.default_rng(7)
    for trial in range(25):
        mask = rng.uniform(size=(32, 32)) < rng.uniform(0.2, 0.8)
        labels = C.ccl_labels(mask)
        oracle = flood_fill_components(mask)
        assert labels.converged
        assert np.array_equal(canonical_partition(labels.q),
                              canonical_partition(oracle)), f"trial {trial}"
        assert labels.iterations < 0.5 * 32 * 32
        # labels only inside the mask
        assert not labels.q[~mask].any()
        assert (labels.q[mask] > 0).all()


def test_fixed_point_is_idempotent():
    rng = np.random.default_rng(8)
    mask = rng.uniform(size=(16, 16)) < 0.5
    labels = C.ccl_labels(mask)
    once_more = maximum_filter(labels.q, size=3, mode="constant", cval=0)
    once_more[~mask] = 0
    assert np.array_equal(once_more, labels.q)


def test_iteration_cap_warns_but_returns():
    mask = np.ones((1, 8), dtype=bool)  # needs 7 steps to propagate the max
    with pytest.warns(UserWarning):
        labels = C.ccl_labels(mask, max_iters=2)
    assert not labels.converged
    assert labels.iterations == 2
    with pytest.raises(ValueError):
        C.ccl_labels(mask, max_iters=0)


# ---------------------------------------------------------------- penalty

def test_conn_loss_fully_connected_is_zero():
    rho = np.full((8, 8), 0.8)
    labels = C.ccl_labels(C.binarize(rho, 0.1))
    loss, grad = C.conn_loss(rho, labels, delta=0.3)
    assert loss == 0.0
    assert not grad.any()
    assert not labels.disconnected.any()


def test_conn_loss_reference_value():
    # one 2000-cell blob (largest, kept) plus one 50-cell blob at density 0.9:
    # 50 < 0.3*64*64 so the small blob is flagged and L = 50 * 0.9 = 45.0
    rho = np.zeros((64, 64))
    rho[0:40, 0:50] = 0.8  # 2000 cells
    rho[50:55, 54:64] = 0.9  # 50 cells, well separated
    assert (rho >= 0.1).sum() == 2050
    labels = C.ccl_labels(C.binarize(rho, 0.1))
    assert sorted(labels.counts.values()) == [50, 2000]
    loss, grad = C.conn_loss(rho, labels, delta=0.3)
    assert loss == pytest.approx(45.0, abs=1e-12)
    assert grad.sum() == 50
    oracle = flood_fill_components(rho >= 0.1)
    assert np.array_equal(canonical_partition(labels.q), canonical_partition(oracle))


def test_conn_loss_all_background():
    rho = np.zeros((8, 8))
    labels = C.ccl_labels(C.binarize(rho, 0.1))
    loss, grad = C.conn_loss(rho, labels, delta=0.3)
    assert loss == 0.0
    assert not grad.any()


def test_largest_component_always_kept():
    # both blobs are under the cutoff; only the smaller one gets flagged
    rho = np.zeros((16, 16))
    rho[0:2, 0:2] = 0.5  # 4 cells
    rho[10:13, 10:13] = 0.5  # 9 cells -> largest
    labels = C.ccl_labels(C.binarize(rho, 0.1))
    loss, grad = C.conn_loss(rho, labels, delta=0.9)
    assert loss == pytest.approx(4 * 0.5)
    assert grad.sum() == 4
    assert labels.disconnected.sum() == 4


def test_conn_loss_gradient_is_flag_indicator():
    rng = np.random.default_rng(9)
    rho = (rng.uniform(size=(20, 20)) < 0.4) * rng.uniform(0.2, 1.0, size=(20, 20))
    labels = C.ccl_labels(C.binarize(rho, 0.1))
    loss, grad = C.conn_loss(rho, labels, delta=0.2)
    assert np.array_equal(grad, labels.disconnected.astype(float))
    assert loss == pytest.approx(rho[labels.disconnected].sum())
    assert (loss == 0.0) == (not labels.disconnected.any())
    # flagged cells all lie inside the mask
    assert not (labels.disconnected & ~C.binarize(rho, 0.1)).any()


def test_conn_loss_shape_mismatch():
    labels = C.ccl_labels(np.ones((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        C.conn_loss(np.zeros((5, 5)), labels, 0.3)


def test_labels_png_dump(tmp_path):
    from PIL import Image

    rho = np.zeros((10, 10))
    rho[0:3, 0:3] = 1.0
    rho[6:9, 6:9] = 1.0
    labels = C.ccl_labels(C.binarize(rho, 0.1))
    path = tmp_path / "labels.png"
    C.labels_to_png(labels, path)
    img = np.asarray(Image.open(path))
    assert img.shape == (10, 10, 3)
    assert not img[0, 9].any()  # background stays black
    assert img[1, 1].any() and img[7, 7].any()
    assert tuple(img[1, 1]) != tuple(img[7, 7])  # distinct component colors
