import math

import numpy as np
import pytest

from enact_heart import models
from enact_heart import nn_core as nn
from enact_heart.errors import EmptySplit, ShapeMismatch
from enact_heart.manifest import Label, Manifest, ManifestRecord, Split
from oracles import central_difference, rel_error

RNG = np.random.default_rng(0)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 64, 64)).astype(np.float32)


@pytest.fixture(scope="module")
def cnn():
    return models.CNN(seed=0)


@pytest.fixture(scope="module")
def vit():
    return models.ViT(seed=0)


@pytest.fixture(autouse=True)
def _fresh_tape():
    # forward calls outside no_grad record onto the thread's tape
    nn.current_tape().clear()
    yield
    nn.current_tape().clear()


@pytest.fixture(scope="module")
def corpus_images():
    """Rendered images of a few synthetic recordings of each class."""
    from enact_heart import synth
    from enact_heart.config import RunConfig
    from enact_heart.pipeline import clip_images

    spec_imgs, cent_imgs, labels = [], [], []
    for name, spec in synth.corpus_specs(7, seed=11):
        s_img, c_img = clip_images(synth.generate(spec).samples, RunConfig())
        spec_imgs.append(s_img.pixels)
        cent_imgs.append(c_img.pixels)
        labels.append(int(spec.label))
    return np.stack(spec_imgs), np.stack(cent_imgs), np.array(labels)


def test_shapes(cnn, vit):
    assert cnn.forward(images(4)).shape == (4, 5)
    assert vit.forward(images(2)).shape == (2, 5)
    assert models.CnnConfig().feature_side() == 6
    assert cnn.params["head.weight"].shape == (1152, 5)
    assert models.patchify(images(1), 8).shape == (1, 64, 64)


def test_patch_order():
    img = np.arange(64 * 64, dtype=np.float64).reshape(1, 64, 64)
    p = models.patchify(img, 8)
    np.testing.assert_array_equal(p[0, 0], img[0, :8, :8].ravel())
    np.testing.assert_array_equal(p[0, 9], img[0, 8:16, 8:16].ravel())


def test_bad_shape(cnn, vit):
    for m in (cnn, vit):
        with pytest.raises(ShapeMismatch):
            m.forward(np.zeros((2, 32, 32)))


def test_identical_rows(cnn, vit):
    x = images(1)
    batch = np.concatenate([x, x])
    for m in (cnn, vit):
        out = m.forward(batch).data
        np.testing.assert_array_equal(out[0], out[1])


def test_zero_image_gives_head_bias(cnn):
    out = cnn.forward(np.zeros((1, 64, 64), np.float32)).data
    np.testing.assert_array_equal(out[0], cnn.params["head.bias"].data)
    assert not out.any()


def test_attention_rows(vit):
    vit.record_attention = True
    try:
        vit.forward(images(2))
        assert len(vit.attention_maps) == 4
        for a in vit.attention_maps:
            assert a.shape == (2, 4, 65, 65)
            assert np.max(np.abs(a.sum(axis=-1) - 1)) < 1e-6
    finally:
        vit.record_attention = False


def test_patch_permutation_invariance(vit):
    m = vit.astype(np.float64)
    patches = models.patchify(images(1).astype(np.float64), 8)
    pos = m.params["pos_embed"].data
    i, j = 5, 42
    perm = np.arange(64)
    perm[[i, j]] = perm[[j, i]]
    pos_perm = pos.copy()
    pos_perm[0, [i + 1, j + 1]] = pos[0, [j + 1, i + 1]]
    with nn.no_grad():
        a = m.tokens(patches).data[:, 0]
        b = m.tokens(patches[:, perm], nn.Tensor(pos_perm)).data[:, 0]
    assert np.max(np.abs(a - b)) < 1e-5


def test_class_token_shortcut_matches_full_encoder(vit):
    x = images(3, 5)
    patches = models.patchify(x, 8)
    full = vit.tokens(patches).data[:, 0]
    short = vit.tokens(patches, cls_only=True).data[:, 0]
    np.testing.assert_allclose(short, full, rtol=1e-5, atol=1e-5)
    vit.record_attention = True
    try:
        logits_full = vit.forward(x).data
    finally:
        vit.record_attention = False
    np.testing.assert_allclose(vit.forward(x).data, logits_full, rtol=1e-5, atol=1e-5)


def test_initial_loss_near_ln5(cnn, vit, corpus_images):
    spec_imgs, cent_imgs, y = corpus_images
    first = np.random.default_rng(0).permutation(len(y))[:32]
    for m, x in ((cnn, cent_imgs), (vit, spec_imgs)):
        loss = nn.cross_entropy(m.forward(x[first]), y[first]).item()
        assert abs(loss - math.log(5)) < 0.2


def test_predict_proba(cnn, vit):
    for m in (cnn, vit):
        p = models.predict_proba(m, images(6))
        assert p.shape == (6, 5) and p.dtype == np.float64
        assert np.all(p >= 0) and np.max(np.abs(p.sum(axis=1) - 1)) < 1e-9
        np.testing.assert_array_equal(p, models.predict_proba(m, images(6)))
        single = models.predict_proba(m, images(1)[0])
        assert single.shape == (5,)
        np.testing.assert_array_equal(single, models.predict_proba(m, images(1)[0]))
        np.testing.assert_allclose(single, p[0], atol=1e-6)  # float32 GEMM varies with batch size


def test_zero_head_is_uniform(vit):
    m = vit.astype(np.float32)
    m.params["head.weight"].data[:] = 0
    np.testing.assert_allclose(models.predict_proba(m, images(3)), 0.2, atol=1e-12)


def test_predict_proba_does_not_touch_tape(cnn):
    models.predict_proba(cnn, images(2))
    assert len(nn.current_tape()) == 0


def test_checkpoint_roundtrip(tmp_path, vit):
    path = tmp_path / "vit.eht"
    vit.save(path)
    clone = models.ViT(seed=99)
    clone.load(path)
    x = images(3)
    np.testing.assert_array_equal(models.predict_proba(vit, x), models.predict_proba(clone, x))
    assert path.read_bytes()[:4] == b"EHT1"


def test_checkpoint_mismatch(tmp_path, cnn):
    cnn.save(tmp_path / "cnn.eht")
    with pytest.raises(Exception):
        models.ViT().load(tmp_path / "cnn.eht")


class KinkTracer:
    """Records relu sign patterns and maxpool winners during a forward pass."""

    def __init__(self, monkeypatch):
        self.trace = []
        relu, pool = nn.relu, nn.maxpool2d

        def traced_relu(x):
            self.trace.append(x.data > 0)
            return relu(x)

        def traced_pool(x, size=2):
            b, c, h, w = x.shape
            win = x.data[:, :, : h // size * size, : w // size * size]
            win = win.reshape(b, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
            self.trace.append(win.reshape(*win.shape[:4], -1).argmax(axis=-1))
            return pool(x, size)

        monkeypatch.setattr(nn, "relu", traced_relu)
        monkeypatch.setattr(nn, "maxpool2d", traced_pool)

    def pattern(self, f):
        self.trace = []
        value = f()
        return value, self.trace


def check_model_gradients(model, seed, tracer=None, fraction=0.05):
    """Relative error of tape gradients against central differences (h=1e-4).

    A random ``fraction`` of every parameter tensor is checked. With a tracer
    (piecewise-linear models), coordinates whose +-h interval crosses a relu
    or maxpool switch are redrawn: the difference quotient is not a gradient
    estimate there.
    """
    m = model.astype(np.float64)
    x = images(1, seed).astype(np.float64)
    y = np.array([2])
    h = 1e-4
    nn.backward(nn.cross_entropy(m.forward(x), y))

    def f():
        with nn.no_grad():
            return nn.cross_entropy(m.forward(x), y).item()

    base = tracer.pattern(f)[1] if tracer else None
    rng = np.random.default_rng(seed)
    analytic, numeric, redrawn = [], [], 0
    for name, p in m.params.items():
        flat = p.data.reshape(-1)
        k = max(1, int(round(fraction * flat.size)))
        candidates = iter(rng.permutation(flat.size))
        got = 0
        while got < k:
            i = next(candidates)
            old = flat[i]
            flat[i] = old + h
            fp, pat_p = tracer.pattern(f) if tracer else (f(), None)
            flat[i] = old - h
            fm, pat_m = tracer.pattern(f) if tracer else (f(), None)
            flat[i] = old
            if tracer and not all(
                np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, pat_p, pat_m)
            ):
                redrawn += 1
                continue
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
            got += 1
    return rel_error(analytic, numeric), redrawn


def test_cnn_end_to_end_gradient(cnn, monkeypatch):
    err, redrawn = check_model_gradients(cnn, 1, KinkTracer(monkeypatch))
    assert err < 1e-3
    assert redrawn < 20


def test_vit_end_to_end_gradient_small():
    small = models.ViT(models.VitConfig(dim=16, depth=2, heads=2, mlp_dim=32), seed=4)
    err, _ = check_model_gradients(small, 2)
    assert err < 1e-3


def toy_problem():
    x = np.zeros((2, 64, 64), np.float32)
    x[1, :, 32:] = 1.0
    return x, np.array([0, 1])


@pytest.mark.parametrize("kind", ["cnn", "vit"])
def test_training_reduces_loss(kind):
    x, y = toy_problem()
    m = models.build_model(kind, vit_cfg=models.VitConfig(dim=16, depth=1, heads=2, mlp_dim=16))
    cfg = models.TrainConfig(batch_size=2, epochs=50, seed=0)
    res = models.train_arrays(m, x, y, x, y, cfg)
    assert res.history[-1].train_loss < res.history[0].train_loss
    assert res.best_val_accuracy == 1.0
    assert len(res.history) == 50


def test_best_epoch_restored():
    x, y = toy_problem()
    m = models.CNN(seed=1)
    res = models.train_arrays(m, x, y, x, y, models.TrainConfig(batch_size=1, epochs=5, seed=0))
    best = res.history[res.best_epoch - 1]
    assert best.val_accuracy == max(r.val_accuracy for r in res.history)
    assert res.best_epoch == min(r.epoch for r in res.history if r.val_accuracy == best.val_accuracy)
    assert models.accuracy(m, x, y) == best.val_accuracy
    for name, arr in res.best_state.items():
        np.testing.assert_array_equal(m.params[name].data, arr)


def test_training_deterministic():
    x = images(12, seed=5)
    y = np.arange(12) % 5
    cfg = models.TrainConfig(batch_size=4, epochs=3, seed=7)
    runs = []
    for _ in range(2):
        m = models.CNN(seed=7)
        res = models.train_arrays(m, x, y, x[:5], y[:5], cfg)
        runs.append((res.history_csv(), m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])
    assert runs[0][0].splitlines()[0] == "epoch,train_loss,val_accuracy"


def test_train_from_manifest_and_empty_split():
    recs = [
        ManifestRecord(f"c{i}", f"s{i}", Label(i % 5), Split.TRAIN if i < 8 else Split.VALIDATION)
        for i in range(10)
    ]
    x = images(10)
    res = models.train(models.CNN(), x, Manifest(recs), models.TrainConfig(epochs=1))
    assert len(res.history) == 1
    only_train = Manifest([ManifestRecord(r.clip_id, r.source_path, r.label) for r in recs])
    with pytest.raises(EmptySplit):
        models.train(models.CNN(), x, only_train, models.TrainConfig(epochs=1))
    with pytest.raises(ShapeMismatch):
        models.train(models.CNN(), x[:3], Manifest(recs), models.TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        models.VitConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        models.VitConfig(patch=7)
    with pytest.raises(ValueError):
        models.TrainConfig(batch_size=0)
