import json
import struct
from itertools import permutations

import numpy as np
import pytest

from hemis import layers
from hemis.gradcheck import grad_check
from hemis.model import (HMZ_MAGIC, FusionMoments, HemisConfig, ModalityMask, all_subsets,
                         backend_forward, frontend_forward, fuse, fuse_backward, init_params,
                         load_model, model_backward, model_bytes, model_forward,
                         predict_segmentation, save_model, segment)
from hemis.tensor import (BadMagicError, MissingEntryError, TruncatedFileError, VersionError, htf_bytes,
                          make_rng)
from oracles import numeric_grad, two_pass_moments

TINY = HemisConfig(n_modalities=4, f1=4, f2=4, f3=8, kernel_size=3, n_classes=3)


def tiny_problem(seed=0, size=8, dtype=np.float64, config=TINY):
    rng = make_rng(seed)
    params = init_params(config, rng, dtype)
    images = rng.standard_normal((config.n_modalities, size, size))
    labels = rng.integers(config.n_classes, size=(size, size))
    return params, images, labels


def loss_fn(params, images, labels, mask):
    def fn(tensors):
        p = type(params)(params.config, tensors)
        probs, tape = model_forward(images, mask, p, return_tape=True)
        loss, g = layers.cross_entropy_loss(probs, labels)
        return loss, model_backward(g, tape, p)
    return fn


# --- masks ------------------------------------------------------------------

def test_mask_constructors():
    assert ModalityMask.full(3).key == "111"
    m = ModalityMask.from_indices([0, 2], 4)
    assert m.key == "1010" and m.indices == (0, 2) and len(m) == 2
    assert ModalityMask.from_names(["T1c", "F"], ("F", "T1", "T1c", "T2")) == m
    with pytest.raises(ValueError):
        ModalityMask((False, False))
    with pytest.raises(ValueError):
        ModalityMask.from_names(["X"], ("F", "T1"))
    with pytest.raises(ValueError):
        ModalityMask.from_indices([4], 4)


def test_all_subsets_table_layout():
    keys = [m.key for m in all_subsets(4)]
    assert keys == ["0001", "0010", "0100", "1000", "0011", "0110", "1100", "0101",
                    "1001", "1010", "1110", "1101", "1011", "0111", "1111"]
    assert len(set(keys)) == 15
    for n in (1, 2, 3, 5):
        subsets = all_subsets(n)
        assert len(subsets) == 2 ** n - 1 == len({m.key for m in subsets})


def test_param_shapes_invariants():
    shapes = TINY.param_shapes()
    assert shapes["C4.kernels"][0] == TINY.n_classes
    assert shapes["C3.kernels"][1] == 2 * TINY.f2
    assert sum(1 for k in shapes if k.startswith("C1_")) == 2 * TINY.n_modalities


# --- back end -----------------------------------------------------------------

def test_backend_only_available_modalities():
    params, images, _ = tiny_problem()
    stacks = backend_forward(images, ModalityMask.from_indices([2], 4), params)
    assert list(stacks) == [2]
    assert stacks[2].shape == (1, TINY.f2, 8, 8)


def test_backend_identical_inputs_and_weights_give_identical_stacks():
    params, images, _ = tiny_problem()
    t = params.tensors
    for part in ("kernels", "bias"):
        for layer in ("C1", "C2"):
            t[f"{layer}_1.{part}"] = t[f"{layer}_0.{part}"].copy()
    images[1] = images[0]
    stacks = backend_forward(images, ModalityMask.from_indices([0, 1], 4), params)
    assert np.array_equal(stacks[0], stacks[1])


def test_backend_equals_manual_composition():
    params, images, _ = tiny_problem(1)
    stacks = backend_forward(images, ModalityMask.full(4), params)
    for k in range(4):
        x = images[None, k:k + 1]
        a, _ = layers.relu_forward(layers.conv2d_forward(x, params.layer(f"C1_{k}"))[0])
        a, _ = layers.relu_forward(layers.conv2d_forward(a, params.layer(f"C2_{k}"))[0])
        expected, _ = layers.maxpool2d_s1_forward(a)
        assert np.array_equal(stacks[k], expected)


def test_backend_accepts_per_modality_list_with_holes():
    params, images, _ = tiny_problem()
    mask = ModalityMask.from_indices([1, 3], 4)
    from_list = backend_forward([None, images[1], None, images[3]], mask, params)
    from_array = backend_forward(images, mask, params)
    for k in (1, 3):
        assert np.array_equal(from_list[k], from_array[k])


def test_backend_rejects_inconsistent_sizes():
    params, images, _ = tiny_problem()
    with pytest.raises(ValueError):
        backend_forward([images[0], np.zeros((6, 6)), None, None], ModalityMask.from_indices([0, 1], 4), params)
    with pytest.raises(ValueError):
        backend_forward([images[0], None, None, None], ModalityMask.from_indices([0, 1], 4), params)


# --- fusion -----------------------------------------------------------------

def test_fuse_single_stack():
    s = make_rng(2).standard_normal((3, 5, 5))
    m = fuse([s])
    assert np.array_equal(m.mean, s)
    assert not m.var.any()


def test_fuse_two_constants_by_hand():
    m = fuse([np.ones((2, 2)), np.full((2, 2), 3.0)])
    assert np.array_equal(m.mean, np.full((2, 2), 2.0))
    assert np.array_equal(m.var, np.full((2, 2), 2.0))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_fuse_matches_two_pass_oracle(n):
    stacks = [make_rng(10 + i).standard_normal((4, 6, 6)).astype(np.float32) for i in range(n)]
    m = fuse(stacks)
    mean, var = two_pass_moments(stacks)
    assert np.max(np.abs(m.mean - mean)) < 1e-6
    assert np.max(np.abs(m.var - var)) < 1e-6
    assert (m.var >= 0).all()


def test_fuse_is_set_invariant_bitwise():
    rng = make_rng(3)
    stacks = {k: rng.standard_normal((4, 5, 5)).astype(np.float32) for k in (0, 2, 3)}
    ref = fuse(stacks)
    for order in permutations(stacks):
        m = fuse({k: stacks[k] for k in order})
        assert np.array_equal(m.mean, ref.mean) and np.array_equal(m.var, ref.var)


def test_fuse_errors():
    with pytest.raises(ValueError):
        fuse([])
    with pytest.raises(ValueError):
        fuse([np.zeros((2, 2)), np.zeros((3, 3))])


def test_fuse_backward_cases():
    rng = make_rng(4)
    s = [rng.standard_normal((2, 3, 3)) for _ in range(3)]
    gm = rng.standard_normal((2, 3, 3))
    for g in fuse_backward(gm, np.zeros_like(gm), s):
        assert np.allclose(g, gm / 3)
    (g1,) = fuse_backward(gm, rng.standard_normal((2, 3, 3)), s[:1])
    assert np.array_equal(g1, gm)


def test_fuse_backward_finite_differences():
    rng = make_rng(5)
    s = [rng.standard_normal((2, 3, 3)) for _ in range(3)]
    gm, gv = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    grads = fuse_backward(gm, gv, s)

    def f():
        m = fuse(s)
        return float(np.sum(m.mean * gm) + np.sum(m.var * gv))

    for k in range(3):
        assert np.allclose(grads[k], numeric_grad(f, s[k]), rtol=1e-6, atol=1e-8)


# --- front end and whole model ----------------------------------------------

def test_frontend_zero_weights_give_uniform_posterior():
    params, _, _ = tiny_problem()
    for name in ("C3", "C4"):
        params.tensors[f"{name}.kernels"][:] = 0
        params.tensors[f"{name}.bias"][:] = 0
    m = FusionMoments(np.ones((1, 4, 5, 5)), np.ones((1, 4, 5, 5)))
    assert np.allclose(frontend_forward(m, params), 1 / 3)


def test_frontend_equals_manual_composition():
    params, images, _ = tiny_problem(6)
    moments = fuse(backend_forward(images, ModalityMask.full(4), params))
    probs = frontend_forward(moments, params)
    x = np.concatenate([moments.mean, moments.var], axis=1)
    a, _ = layers.relu_forward(layers.conv2d_forward(x, params.layer("C3"))[0])
    expected = layers.pixel_softmax(layers.conv2d_forward(a, params.layer("C4"))[0])
    assert np.array_equal(probs, expected)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("mask", all_subsets(4), ids=lambda m: m.key)
def test_forward_is_total_over_subsets(mask):
    params, images, _ = tiny_problem(7, dtype=np.float32)
    probs = model_forward(images.astype(np.float32), mask, params)
    assert probs.shape == (3, 8, 8)
    assert np.isfinite(probs).all() and (probs >= 0).all()
    assert np.allclose(probs.sum(axis=0), 1.0, atol=1e-6)


def test_absent_modality_is_never_read():
    params, images, _ = tiny_problem(8)
    mask = ModalityMask.from_indices([0, 3], 4)
    before = model_forward(images, mask, params)
    images[1] = 1e6
    images[2] = np.nan
    assert np.array_equal(model_forward(images, mask, params), before)


def test_absent_modality_weights_get_zero_gradient():
    params, images, labels = tiny_problem(9)
    mask = ModalityMask.from_indices([1, 2], 4)
    _, grads = loss_fn(params, images, labels, mask)(params.tensors)
    for k in (0, 3):
        for layer in ("C1", "C2"):
            assert not grads[f"{layer}_{k}.kernels"].any() and not grads[f"{layer}_{k}.bias"].any()
    assert grads["C1_1.kernels"].any()


def test_batched_forward_matches_single():
    params, _, _ = tiny_problem(10)
    imgs = make_rng(11).standard_normal((3, 4, 8, 8))
    mask = ModalityMask.from_indices([0, 1, 3], 4)
    batched = model_forward(imgs, mask, params)
    for b in range(3):
        assert np.allclose(batched[b], model_forward(imgs[b], mask, params), atol=1e-12)


@pytest.mark.parametrize("key", ["0001", "0110", "1111"])
def test_gradients_agree_with_finite_differences(key):
    params, images, labels = tiny_problem(12)
    mask = ModalityMask(tuple(c == "1" for c in key))
    report = grad_check(loss_fn(params, images, labels, mask), params.tensors,
                        max_per_param=6, rng=make_rng(0))
    assert report.fraction_ok >= 0.99
    assert report.max_rel_error < 1e-3


def test_backward_restricted_to_final_layer():
    params, images, labels = tiny_problem(13)
    mask = ModalityMask.full(4)
    probs, tape = model_forward(images, mask, params, return_tape=True)
    _, g = layers.cross_entropy_loss(probs, labels)
    full = model_backward(g, tape, params)
    only = model_backward(g, tape, params, only=("C4",))
    assert set(only) == {"C4.kernels", "C4.bias"}
    assert np.array_equal(only["C4.kernels"], full["C4.kernels"])
    with pytest.raises(ValueError):
        model_backward(g, None, params)


def test_predict_segmentation():
    labels = make_rng(14).integers(4, size=(5, 6))
    onehot = np.moveaxis(np.eye(4)[labels], -1, 0)
    assert np.array_equal(predict_segmentation(onehot), labels)
    assert not predict_segmentation(np.full((4, 3, 3), 0.25)).any()
    post = make_rng(15).random((4, 5, 6))
    scan = np.zeros((5, 6), dtype=int)
    for i in range(5):
        for j in range(6):
            best = 0
            for c in range(1, 4):
                if post[c, i, j] > post[best, i, j]:
                    best = c
            scan[i, j] = best
    assert np.array_equal(predict_segmentation(post), scan)


def test_segment_shape_and_range():
    params, images, _ = tiny_problem(16)
    seg = segment(images, ModalityMask.from_indices([2], 4), params)
    assert seg.shape == (8, 8) and seg.min() >= 0 and seg.max() < 3


# --- HMZ1 -------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_model_roundtrip_bitwise(tmp_path, dtype):
    params, _, _ = tiny_problem(17, dtype=dtype)
    path = tmp_path / "m.hmz"
    save_model(params, path)
    back = load_model(path)
    assert back.config == params.config
    for name, t in params.tensors.items():
        assert back.tensors[name].dtype == t.dtype
        assert back.tensors[name].tobytes() == t.tobytes()
    assert model_bytes(back) == path.read_bytes()


def test_model_bad_magic(tmp_path):
    params, _, _ = tiny_problem()
    path = tmp_path / "m.hmz"
    path.write_bytes(b"NOPE" + model_bytes(params)[4:])
    with pytest.raises(BadMagicError):
        load_model(path)


def test_model_truncation(tmp_path):
    blob = model_bytes(tiny_problem()[0])
    path = tmp_path / "m.hmz"
    for cut in (2, 6, 20, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(TruncatedFileError):
            load_model(path)


def _rewrite(params, skip=(), version=None):
    blob = model_bytes(params)
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    if version is not None:
        header["format_version"] = version
    raw = json.dumps(header).encode()
    out = [HMZ_MAGIC, struct.pack("<I", len(raw)), raw]
    for name, t in params.tensors.items():
        if name in skip:
            continue
        out += [struct.pack("<I", len(name)), name.encode(), htf_bytes(t)]
    return b"".join(out)


def test_model_missing_entry_and_version(tmp_path):
    params, _, _ = tiny_problem()
    path = tmp_path / "m.hmz"
    path.write_bytes(_rewrite(params, skip=("C4.kernels",)))
    with pytest.raises(MissingEntryError):
        load_model(path)
    path.write_bytes(_rewrite(params, version=99))
    with pytest.raises(VersionError):
        load_model(path)
