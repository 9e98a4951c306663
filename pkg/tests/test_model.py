import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from promptadapt.adapt import train_supervised
from promptadapt.data import Sample
from promptadapt.errors import ConfigurationError
from promptadapt.evaluate import evaluate
from promptadapt.model import (
    BackendConfig,
    binarize,
    build_model,
    build_toy_model,
    decode_masks,
    encode_image,
    load_backend_config,
    parameter_checksum,
    sigmoid_normalize,
)
from promptadapt.prompts import BoxPrompt, PointPrompt, mask_iou, polygon_coarsen


def blob_image(size=64):
    img = torch.full((3, size, size), 0.1)
    yy, xx = np.mgrid[0:size, 0:size]
    disc = (yy - 30) ** 2 + (xx - 28) ** 2 <= 10**2
    img[:, torch.from_numpy(disc)] = 0.9
    return img, disc


def test_zero_image_feature_shape(toy_model):
    feat = encode_image(toy_model, torch.zeros(3, 64, 64))
    assert feat.shape == (16, 4, 4) and torch.isfinite(feat).all()


def test_frozen_model_is_deterministic(toy_model):
    img, disc = blob_image()
    toy_model.eval()
    box = [BoxPrompt(18, 20, 38, 40)]
    a = toy_model(img, box)
    b = toy_model(img, box)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_one_pixel_changes_features(toy_model):
    img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
    other = img.clone()
    other[1, 40, 17] += 0.2
    assert not torch.equal(encode_image(toy_model, img), encode_image(toy_model, other))


def test_wrong_channel_count_is_a_configuration_error(toy_model):
    with pytest.raises(ConfigurationError):
        encode_image(toy_model, torch.zeros(1, 64, 64))


def test_one_map_per_prompt_and_order(toy_model):
    img, disc = blob_image()
    feat = encode_image(toy_model, img)
    prompts = [BoxPrompt(18, 20, 38, 40), PointPrompt(((28, 30),), ((2, 2),)), polygon_coarsen(disc), BoxPrompt(0, 0, 10, 10)]
    out = decode_masks(toy_model, feat, prompts)
    assert out.shape == (4, 64, 64)
    perm = [2, 0, 3, 1]
    swapped = decode_masks(toy_model, feat, [prompts[i] for i in perm])
    assert torch.allclose(swapped, out[perm], atol=1e-6)


def test_three_boxes_give_three_maps(toy_model):
    feat = encode_image(toy_model, torch.rand(3, 64, 64))
    boxes = [BoxPrompt(0, 0, 9, 9), BoxPrompt(5, 5, 30, 40), BoxPrompt(40, 10, 63, 63)]
    assert decode_masks(toy_model, feat, boxes).shape[0] == 3


def test_decode_rejects_empty_and_out_of_bounds(toy_model):
    feat = encode_image(toy_model, torch.zeros(3, 64, 64))
    with pytest.raises(ValueError):
        decode_masks(toy_model, feat, [])
    with pytest.raises(ValueError):
        decode_masks(toy_model, feat, [BoxPrompt(0, 0, 64, 10)])
    with pytest.raises(ValueError):
        decode_masks(toy_model, feat, [PointPrompt(((-1, 3),))])


def test_untrained_box_prompt_gates_its_interior():
    img, disc = blob_image()
    model = build_toy_model(seed=0)
    with torch.no_grad():
        logits, _ = model(img, [BoxPrompt(18, 20, 38, 40)])
    pred = binarize(sigmoid_normalize(logits))[0].numpy().astype(bool)
    assert mask_iou(pred, disc) >= 0.5


def test_non_native_size_round_trips(toy_model):
    img = torch.rand(3, 48, 32)
    logits, feat = toy_model(img, [BoxPrompt(3, 4, 20, 30)])
    assert logits.shape == (1, 48, 32) and feat.shape == (16, 4, 4)


def test_sigmoid_and_binarize_edges():
    assert float(sigmoid_normalize(torch.tensor(0.0))) == 0.5
    assert float(sigmoid_normalize(torch.tensor(50.0, dtype=torch.float64))) == pytest.approx(1.0, abs=1e-9)
    assert int(binarize(torch.tensor(0.5))) == 0
    assert binarize(torch.full((3, 3), 0.9)).all()
    with pytest.raises(ValueError):
        binarize(torch.zeros(2), threshold=1.0)


# float32 sigmoid rounds to exactly 0.5 for |y| below ~3e-8, so the law is
# checked on logits outside that band
@given(st.lists(st.floats(1e-6, 80) | st.floats(-80, -1e-6) | st.just(0.0), min_size=1, max_size=32))
def test_binarize_of_sigmoid_is_sign_test(values):
    y = torch.tensor(values, dtype=torch.float32)
    assert torch.equal(binarize(sigmoid_normalize(y)).bool(), y > 0)


def test_seeded_build_is_reproducible():
    assert parameter_checksum(build_toy_model(0)) == parameter_checksum(build_toy_model(0))
    assert parameter_checksum(build_toy_model(0)) != parameter_checksum(build_toy_model(1))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    build_toy_model(3)
    assert torch.equal(torch.rand(3), expected)


def test_forward_backward_gradients_finite(toy_model):
    img, disc = blob_image()
    logits, feat = toy_model(img, [BoxPrompt(18, 20, 38, 40), PointPrompt(((28, 30),))])
    (logits.sigmoid().mean() + feat.pow(2).mean()).backward()
    grads = [p.grad for p in toy_model.parameters() if p.grad is not None]
    assert grads and all(torch.isfinite(g).all() for g in grads)


def test_supervised_steps_beat_untrained_model():
    rng = np.random.default_rng(4)
    yy, xx = np.mgrid[0:64, 0:64]
    a = (yy - 20) ** 2 + (xx - 20) ** 2 <= 9**2
    b = (np.abs(yy - 44) <= 8) & (np.abs(xx - 42) <= 12)
    img = np.full((3, 64, 64), 0.15) + rng.normal(0, 0.02, size=(3, 64, 64))
    img[:, a] = [[0.9], [0.3], [0.3]]
    img[:, b] = [[0.2], [0.8], [0.5]]
    sample = Sample("two-blobs", [a, b], _image=torch.from_numpy(img.clip(0, 1).astype(np.float32)))
    model = build_toy_model(seed=0)
    before = evaluate(model, [sample], "box").miou
    train_supervised(model, [sample], 200, lr=1e-3, batch_size=1)
    after = evaluate(model, [sample], "box").miou
    assert after > before


def test_backend_config_file(tmp_path):
    path = tmp_path / "backend.txt"
    path.write_text("# toy backend\nbackend = toy\nfeature_dim = 8\nmean = 0.4, 0.4, 0.4\nstd = 0.2,0.2,0.2\n")
    cfg = load_backend_config(path)
    assert cfg == BackendConfig(backend="toy", feature_dim=8, mean=(0.4,) * 3, std=(0.2,) * 3)
    model = build_model(cfg)
    assert model.backend == "toy" and torch.allclose(model.pixel_mean, torch.full((3, 1, 1), 0.4))


def test_backend_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        BackendConfig(backend="other")
    with pytest.raises(ConfigurationError):
        BackendConfig(feature_dim=2)
    with pytest.raises(FileNotFoundError):
        build_model(BackendConfig(pretrained_weights_path=str(tmp_path / "missing.pt")))
