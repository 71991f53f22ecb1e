import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import exact_size, jaw_cloud
from toothseg.augment import AugmentConfig
from toothseg.errors import ConfigError, TrainingDiverged, ValidationError
from toothseg.mesh import Representation, select_representation
from toothseg.training import (
    Ablation,
    Checkpoint,
    ModelConfig,
    TrainConfig,
    _crop,
    _stack,
    build_model,
    evaluate_model,
    predict,
    train,
)

N = 128


@pytest.fixture(scope="module")
def clouds():
    return [exact_size(jaw_cloud(s, N), N) for s in range(3)]


def _cfg(**kw):
    base = dict(epochs=2, batch_size=2, lr=0.001)
    base.update(kw)
    return TrainConfig(**base)


# --- ablation matrix --------------------------------------------------------


def test_ablation_matrix_dims():
    ours = ModelConfig.create("ours", 1024)
    assert ours.representation is Representation.B_N and ours.geometry.in_dim == 6
    assert ours.head.in_dim_a == ours.geometry.out_dim and ours.head.in_dim_b == ours.curve.out_dim
    a1 = ModelConfig.create("ablation1", 1024)
    assert a1.geometry.in_dim == 24 and a1.curve is None and a1.head.in_dim_b == 0
    assert ModelConfig.create("ablation2", 1024).geometry.in_dim == 6
    assert ModelConfig.create("ablation3", 1024).geometry.in_dim == 3
    a4 = ModelConfig.create("ablation4", 1024)
    assert a4.geometry is None and a4.curve is not None and a4.representation.dim == 3
    with pytest.raises(ConfigError):
        ModelConfig.create("ablation5")
    with pytest.raises(ConfigError):
        ModelConfig.create("ours", preset="huge")


def test_model_config_round_trip():
    for a in Ablation:
        cfg = ModelConfig.create(a, 256)
        back = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("ablation", [a.value for a in Ablation])
def test_one_step_each_ablation(ablation, clouds):
    torch.manual_seed(0)
    model = build_model(ablation, N)
    f, p, y = _stack(clouds[:2], model.representation)
    logits = model(f, p)
    assert logits.shape == (2, N, 8)
    loss = F.cross_entropy(logits.reshape(-1, 8), y.reshape(-1))
    loss.backward()
    assert torch.isfinite(loss)
    assert all(torch.isfinite(q.grad).all() for q in model.parameters() if q.grad is not None)


def test_full_preset_builds():
    model = build_model("ours", 1024, preset="full")
    assert model.head.cfg.hidden == 256


# --- training loop ------------------------------------------------------------


def test_zero_lr_leaves_parameters(clouds):
    ck0 = train(_cfg(lr=0.0, epochs=1), clouds[:2], clouds[2:], ModelConfig.create("ours", N, dropout=0.0))
    ck1 = train(_cfg(lr=0.0, epochs=3), clouds[:2], clouds[2:], ModelConfig.create("ours", N, dropout=0.0))
    torch.manual_seed(0)
    fresh = build_model(config=ModelConfig.create("ours", N, dropout=0.0))
    params = dict(fresh.named_parameters())
    # BN running statistics move in train mode, so compare learnable parameters only
    for name, q in params.items():
        assert torch.equal(ck1.state[name], q.detach()), name
        assert torch.equal(ck0.state[name], q.detach()), name
    losses = [h["loss"] for h in ck1.history]
    assert max(losses) - min(losses) < 1e-6


def test_best_epoch_is_argmax_of_history(clouds):
    ck = train(_cfg(epochs=4), clouds[:2], clouds[2:])
    dscs = [h["val_dsc"] for h in ck.history]
    assert ck.epoch == int(np.argmax(dscs)) + 1
    assert ck.val_dsc == max(dscs)
    # the kept weights are the ones that scored that DSC
    assert evaluate_model(ck.build(), clouds[2:]).dsc == pytest.approx(ck.val_dsc, abs=0)


def test_deterministic_loss_history(clouds):
    a = train(_cfg(epochs=2, seed=3), clouds[:2], clouds[2:])
    b = train(_cfg(epochs=2, seed=3), clouds[:2], clouds[2:])
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    for k in a.state:
        assert torch.equal(a.state[k], b.state[k])


def test_checkpoint_round_trip(tmp_path, clouds):
    ck = train(_cfg(epochs=2), clouds[:2], clouds[2:])
    path = ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(path)
    assert back.epoch == ck.epoch and back.val_dsc == ck.val_dsc and back.history == ck.history
    assert evaluate_model(back.build(), clouds[2:]).dsc == ck.val_dsc
    for k in ck.state:
        assert torch.equal(back.state[k], ck.state[k])


def test_checkpoint_rejects_other_zip(tmp_path):
    import zipfile

    p = tmp_path / "x.zip"
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("meta.json", json.dumps({"format": "other"}))
    with pytest.raises(ValidationError):
        Checkpoint.load(p)


def test_nan_loss_raises_with_diagnostics(tmp_path, clouds):
    cfg = _cfg(class_weights=[float("nan")] * 8, log_path=str(tmp_path / "log.jsonl"))
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg, clouds[:2], clouds[2:])
    assert exc.value.diagnostics["epoch"] == 1 and "grad_norms" in exc.value.diagnostics
    diag = json.loads((tmp_path / "log.nan.json").read_text())
    assert diag["batch"] == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_over_ten_steps(seed, clouds):
    torch.manual_seed(seed)
    model = build_model("ours", N)
    opt = torch.optim.Adam(model.parameters(), lr=0.001)
    f, p, y = _stack(clouds[:1], model.representation)
    losses = []
    for _ in range(10):
        loss = F.cross_entropy(model(f, p).reshape(-1, 8), y.reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < losses[0]


def test_log_file_and_callback(tmp_path, clouds):
    seen = []
    train(_cfg(log_path=str(tmp_path / "log.jsonl")), clouds[:2], clouds[2:], on_epoch=seen.append)
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert rows == seen and [r["epoch"] for r in rows] == [1, 2]
    assert {"loss", "val_dsc", "val_oa", "val_sen", "val_ppv", "seconds"} <= set(rows[0])


def test_stop_at_dsc(clouds):
    ck = train(_cfg(epochs=5, stop_at_dsc=0.0), clouds[:2], clouds[2:])
    assert len(ck.history) == 1


def test_online_augmentation_runs(clouds):
    a = train(_cfg(augment=AugmentConfig(count=1)), clouds[:2], clouds[2:])
    b = train(_cfg(), clouds[:2], clouds[2:])
    assert a.history[0]["loss"] != b.history[0]["loss"]


def test_unequal_train_sizes_are_cropped():
    small = [exact_size(jaw_cloud(0, N), N), exact_size(jaw_cloud(1, N), N - 7)]
    ck = train(_cfg(epochs=1, batch_size=2), small, small[1:], ModelConfig.create("ours", N - 7))
    assert len(ck.history) == 1


def test_crop_keeps_rows_aligned(clouds):
    big = select_representation(clouds[0], "B_N")
    short = exact_size(big, 100)
    out = _crop([big, short], np.random.default_rng(0))
    assert len(out[0]) == 100 and out[1] is short
    # each kept row is an original row with its own label
    rows = {tuple(r): lab for r, lab in zip(big.features, big.labels)}
    for r, lab in zip(out[0].features, out[0].labels):
        assert rows[tuple(r)] == lab


def test_predict_unequal_sizes(clouds):
    model = build_model("ablation3", N)
    bigger = exact_size(jaw_cloud(5, N + 10), N + 10)
    mixed = [clouds[0], bigger, clouds[2]]
    preds = predict(model, mixed, batch_size=4)
    assert [len(p) for p in preds] == [N, N + 10, N]
    with pytest.raises(ConfigError):
        predict(model, [exact_size(clouds[0], N - 10)])
    assert all(p.min() >= 0 and p.max() < 8 for p in preds)


# --- validation -----------------------------------------------------------------


def test_config_errors(clouds):
    for bad in (dict(lr=-1.0), dict(epochs=0), dict(batch_size=0), dict(optimizer="sgd"), dict(ablation="x")):
        with pytest.raises(ConfigError):
            _cfg(**bad).check()
    with pytest.raises(ConfigError):
        train(_cfg(class_weights=[1.0] * 3), clouds[:2], clouds[2:])
    with pytest.raises(ConfigError):
        train(_cfg(ablation="ours"), clouds[:2], clouds[2:], ModelConfig.create("ablation3", N))


def test_data_errors(clouds):
    with pytest.raises(ValidationError):
        train(_cfg(), [], clouds)
    with pytest.raises(ValidationError):
        train(_cfg(), [clouds[0].replace(labels=None)], clouds)
    with pytest.raises(ValidationError):
        train(_cfg(), [clouds[0].replace(labels=np.full(N, 9))], clouds)


def test_inverse_frequency_weights(clouds):
    ck = train(_cfg(epochs=1, class_weights="inverse_freq"), clouds[:2], clouds[2:])
    assert np.isfinite(ck.history[0]["loss"])
