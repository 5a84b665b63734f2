import numpy as np
import pytest

import dnet


def test_receptive_field_examples():
    assert dnet.rf_single(3, 4) == 9
    assert dnet.dilated_kernel_extent(3, 2) == 5
    rep = dnet.rf_stack([("conv", 5, 1, 1), ("conv", 9, 1, 1)])
    assert rep["rf"] == 13
    assert rep["csv"].startswith("layer,k_eff,jump,rf\n")
    assert dnet.coverage_map([1, 2, 3])["dense"]
    sparse = dnet.coverage_map([2, 2, 2])
    assert not sparse["dense"] and sparse["holes"]
    assert sparse["line"].startswith("coverage=holes:")


def test_conv2d_dilation_matches_zero_inserted_kernel():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (1, 6, 6, 3))
    w = rng.uniform(-1, 1, (3, 3, 3, 2))
    dense = np.zeros((5, 5, 3, 2))
    dense[::2, ::2] = w
    a = dnet.conv2d(x, w, dilation=2)
    b = dnet.conv2d(x, dense)
    assert a.shape == (1, 6, 6, 2)
    assert np.array_equal(a, b)


def test_conv2d_against_numpy():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (2, 5, 4, 2))
    w = rng.uniform(-1, 1, (3, 3, 2, 3))
    b = rng.uniform(-1, 1, 3)
    out = dnet.conv2d(x, w, b, padding="valid")
    ref = np.zeros((2, 3, 2, 3))
    for i in range(3):
        for j in range(2):
            ref[:, i, j] = np.einsum("nabm,abmc->nc", x[:, i:i + 3, j:j + 3], w) + b
    assert np.allclose(out, ref, atol=1e-12)


def test_metrics_and_curves():
    m = dnet.metrics(tp=2, tn=6, fp=1, fn=1)
    assert m["precision"] == pytest.approx(2 / 3, abs=1e-12)
    assert m["accuracy"] == pytest.approx(0.8, abs=1e-12)
    assert m["specificity"] == pytest.approx(6 / 7, abs=1e-12)
    c = dnet.roc_pr(np.array([0.9, 0.8, 0.3, 0.1]), np.array([1, 1, 0, 0]))
    assert c["auc_roc"] == 1.0
    assert c["roc"].shape[1] == 3
    assert tuple(c["pr"][0, 1:]) == (0.0, 1.0)


def test_poly_lr():
    assert dnet.poly_lr(0) == 1e-4
    assert dnet.poly_lr(1000) == 0.0
    assert dnet.poly_lr(500) == pytest.approx(5.3589e-5, abs=1e-9)


def test_model_forward_and_checkpoint(tmp_path):
    model = dnet.Model(width_divisor=8, seed=3)
    (image, mask), = dnet.synth_vessels(1, 1, 32, 32)
    assert image.shape == (1, 32, 32, 3) and mask.shape == (1, 32, 32, 1)
    p = model.forward(image)
    assert p.shape == (1, 32, 32, 1)
    assert np.all((p > 0) & (p < 1))
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = dnet.Model.load(path)
    assert loaded.to_bytes() == model.to_bytes()
    assert np.array_equal(loaded.forward(image), p)
    assert loaded.config["width_divisor"] == 8
    assert model.receptive_field()["rf"] > 100


def test_training_is_reproducible():
    data = dnet.synth_vessels(2, 2, 32, 32)
    images = np.concatenate([d[0] for d in data])
    masks = np.concatenate([d[1] for d in data])
    cfg = dnet.TrainConfig()
    cfg.max_iter = 3
    cfg.batch = 2
    cfg.seed = 4
    runs = []
    for _ in range(2):
        model = dnet.Model(width_divisor=8, seed=1)
        runs.append((model.train(images, masks, cfg), model.to_bytes()))
    assert len(runs[0][0]) == 3
    assert runs[0] == runs[1]


def test_pnm_round_trip(tmp_path):
    mask = (np.random.default_rng(5).uniform(size=(1, 7, 9, 1)) > 0.5).astype(np.float32)
    dnet.write_pnm(tmp_path / "m.pgm", mask)
    assert np.array_equal(dnet.read_pnm(tmp_path / "m.pgm"), mask)


def test_errors_raise():
    with pytest.raises(dnet.Error):
        dnet.Model(dilations=(4, 2, 1))
    with pytest.raises(dnet.Error, match="unknown key"):
        dnet.parse_run_config("depth = 3")
    cfg = dnet.parse_run_config("channels_scale = 1/8\nlr = 0.001")
    assert cfg["width_divisor"] == 8 and cfg["train"].lr == 0.001
    with pytest.raises(dnet.Error):
        dnet.conv2d(np.zeros((4, 4)), np.zeros((3, 3, 1, 1)))
