import struct
from types import SimpleNamespace

import numpy as np
import pytest

from attcdcnet.autograd import GradTape, Tensor, backward
from attcdcnet.checkpoint import (
    Checkpoint,
    decode,
    encode,
    load_checkpoint,
    load_model_state,
    model_state,
    save_checkpoint,
)
from attcdcnet.data import ImageSource, batch_slices, generate_synthetic, preset_spec, split_dataset
from attcdcnet.errors import (
    CheckpointFormatError,
    CheckpointMismatchError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    NumericalError,
)
from attcdcnet.losses import make_loss
from attcdcnet.metrics import compute_metrics
from attcdcnet.model import build_model
from attcdcnet.training import (
    METRICS_HEADER,
    Adam,
    AdamMoments,
    CsvMetricsSink,
    EpochRecord,
    TrainConfig,
    adam_step,
    evaluate,
    fit,
    make_checkpoint,
)

from conftest import tiny_config


def moments_like(params):
    return AdamMoments([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_oracle(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook Adam."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    manifest = generate_synthetic(preset_spec("easy", seed=3, counts=(8, 8, 8, 8), image_size=32), root)
    split = split_dataset(manifest, seed=3)
    return manifest, split


def sources(tiny_data):
    manifest, split = tiny_data
    return tuple(ImageSource(manifest, split.indices(s), 32) for s in ("train", "val", "test"))


def test_adam_first_step_example():
    w = [np.array([1.0])]
    adam_step(w, [np.array([1.0])], moments_like(w), 1, TrainConfig())
    assert w[0][0] == pytest.approx(0.999, abs=1e-9)


def test_adam_matches_scalar_oracle(rng):
    grads = rng.standard_normal(25)
    w = [np.array([0.3])]
    mom = moments_like(w)
    for t, g in enumerate(grads, start=1):
        adam_step(w, [np.array([g])], mom, t, TrainConfig(learning_rate=0.01))
    assert w[0][0] == pytest.approx(adam_oracle(0.3, grads, lr=0.01), rel=1e-12)


def test_adam_zero_gradient_and_zero_lr_leave_params(rng):
    w = [rng.standard_normal((3, 2))]
    before = w[0].copy()
    mom = moments_like(w)
    for t in range(1, 6):
        adam_step(w, [np.zeros((3, 2))], mom, t, TrainConfig())
    np.testing.assert_array_equal(w[0], before)
    # TrainConfig rejects lr=0, so the update rule is exercised with a bare namespace
    zero_lr = SimpleNamespace(beta1=0.9, beta2=0.999, eps=1e-8, learning_rate=0.0)
    for t in range(1, 6):
        adam_step(w, [rng.standard_normal((3, 2))], mom, t, zero_lr)
    np.testing.assert_array_equal(w[0], before)


def test_adam_same_history_same_update(rng):
    grads = [rng.standard_normal(4) for _ in range(7)]
    finals = []
    for _ in range(2):
        w = [np.ones(4)]
        mom = moments_like(w)
        for t, g in enumerate(grads, start=1):
            adam_step(w, [g.copy()], mom, t, TrainConfig())
        finals.append(w[0].tobytes())
    assert finals[0] == finals[1]


def test_adam_contract_errors():
    w = [np.ones(3)]
    with pytest.raises(ContractError):
        adam_step(w, [np.ones(4)], moments_like(w), 1, TrainConfig())
    with pytest.raises(ContractError):
        adam_step(w, [np.ones(3)], moments_like(w), 0, TrainConfig())
    with pytest.raises(ContractError):
        adam_step(w, [], moments_like(w), 1, TrainConfig())
    before = w[0].copy()
    adam_step(w, [None], moments_like(w), 1, TrainConfig())
    np.testing.assert_array_equal(w[0], before)


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(loss="hinge"),
                dict(optimizer="sgd"), dict(focal_alpha="uniform")):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert TrainConfig.experiment(2).batch_size == 128 and TrainConfig.experiment(2).epochs == 100


def test_one_batch_descent(rng):
    model = build_model(tiny_config(attention=True, conv_mode="depthwise_separable"), seed=0)
    x = Tensor(rng.standard_normal((8, 3, 32, 32)))
    y = np.arange(8) % 4
    loss_fn = make_loss("cross_entropy")
    opt = Adam(model.parameters(), TrainConfig(learning_rate=1e-3))
    model.train()
    with GradTape() as tape:
        loss = loss_fn(model(x), y)
    backward(tape, loss)
    opt.step()
    model.zero_grad()
    after = loss_fn(model(x), y).item()
    assert after < loss.item()


def test_nan_loss_names_batch(tiny_data):
    train, val, _ = sources(tiny_data)
    model = build_model(tiny_config(), seed=0)
    model.classifier.weight.data[...] = np.nan
    with pytest.raises(NumericalError, match="batch index 0"):
        fit(model, train, val, TrainConfig(batch_size=8, epochs=1))


def test_evaluate_is_pure_and_matches_metrics(tiny_data):
    _, val, test = sources(tiny_data)
    model = build_model(tiny_config(attention=True), seed=1)
    state = {k: v.copy() for k, v in model_state(model).items()}
    rec, report = evaluate(model, test, batch_size=4, split="test")
    after = model_state(model)
    assert all(np.array_equal(state[k], after[k]) for k in state)
    logits = np.concatenate([model(Tensor(test.get([i])[0])).data for i in range(len(test))])
    again = compute_metrics(logits.argmax(axis=1), test.labels, 4)
    np.testing.assert_array_equal(report.confusion, again.confusion)
    assert rec.accuracy == report.accuracy and rec.split == "test"
    with pytest.raises(ContractError):
        evaluate(model, ImageSource(test.manifest, [], 32))


def test_untrained_model_near_chance(tiny_data):
    manifest, _ = tiny_data
    everything = ImageSource(manifest, np.arange(len(manifest)), 32)
    accs = [evaluate(build_model(tiny_config(), seed=s), everything)[0].accuracy for s in range(3)]
    assert 0.0 <= np.mean(accs) <= 0.6


def test_fit_writes_checkpoints_and_csv(tiny_data, tmp_path):
    train, val, _ = sources(tiny_data)
    model = build_model(tiny_config(), seed=2)
    with CsvMetricsSink(tmp_path / "metrics.csv") as sink:
        result = fit(model, train, val, TrainConfig(batch_size=8, epochs=2, seed=2), sinks=[sink],
                     checkpoint_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) and len(lines) == 5
    assert [(r.epoch, r.split) for r in result.records] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
    ckpt = load_checkpoint(tmp_path / "last.ckpt")
    assert ckpt.epoch == 2 and ckpt.meta["adam_step"] == result.optimizer.t == 2 * len(batch_slices(len(train), 8))
    assert (tmp_path / "best.ckpt").exists()


def test_csv_sink_append(tmp_path):
    with CsvMetricsSink(tmp_path / "m.csv") as sink:
        sink(EpochRecord(1, "train", 0.5, 0.25, 0.25, 0.25))
    with CsvMetricsSink(tmp_path / "m.csv", append=True) as sink:
        sink(EpochRecord(2, "train", 0.5, 0.25, 0.25, 0.25))
    assert (tmp_path / "m.csv").read_text().splitlines()[1:] == [
        "1,train,0.5,0.25,0.25,0.25,0.0", "2,train,0.5,0.25,0.25,0.25,0.0"]


# ---------------------------------------------------------------- checkpoints


@pytest.fixture
def ckpt_blob():
    model = build_model(tiny_config(attention=True), seed=4)
    ckpt = make_checkpoint(model, Adam(model.parameters(), TrainConfig()), 1, [], TrainConfig())
    return model, encode(ckpt)


def test_checkpoint_roundtrip_bytes(ckpt_blob, tmp_path):
    model, blob = ckpt_blob
    back = decode(blob)
    assert encode(back) == blob
    save_checkpoint(tmp_path / "x.ckpt", back)
    assert (tmp_path / "x.ckpt").read_bytes() == blob
    fresh = build_model(tiny_config(attention=True), seed=99)
    load_model_state(fresh, back.tensors)
    for (_, p), (_, q) in zip(fresh.named_parameters(), model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_checkpoint_format_errors(ckpt_blob, tmp_path):
    _, blob = ckpt_blob
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="CRC"):
        decode(blob[:-10] + blob[-4:])
    flipped = bytearray(blob)
    flipped[40] ^= 0xFF
    with pytest.raises(CheckpointFormatError):
        decode(bytes(flipped))
    with pytest.raises(CheckpointVersionError):
        decode(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_mismatch_leaves_model_untouched(ckpt_blob):
    _, blob = ckpt_blob
    tensors = dict(decode(blob).tensors)
    other = build_model(tiny_config(), seed=5)
    before = {k: v.copy() for k, v in model_state(other).items()}
    with pytest.raises(CheckpointMismatchError):
        load_model_state(other, tensors)
    key = next(k for k in tensors if k.startswith("param/"))
    same = build_model(tiny_config(attention=True), seed=5)
    tensors[key] = np.zeros((1, 1), np.float32)
    with pytest.raises(CheckpointMismatchError):
        load_model_state(same, tensors)
    assert all(np.array_equal(before[k], v) for k, v in model_state(other).items())


def test_checkpoint_keeps_meta():
    ckpt = Checkpoint({"param/w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"epoch": 3, "names": ["a"]})
    back = decode(encode(ckpt))
    assert back.epoch == 3 and back.meta["names"] == ["a"]
    np.testing.assert_array_equal(back.tensors["param/w"], ckpt.tensors["param/w"])
