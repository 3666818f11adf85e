import json

import numpy as np
import pytest
from PIL import Image

from rawadapter import numerics as nm
from rawadapter.harness import commands as C
from rawadapter.harness import gradchecks
from rawadapter.harness import trainer as T
from rawadapter.harness.checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointNotFoundError,
    load_checkpoint,
    save_checkpoint,
)
from rawadapter.harness.config import RunConfig, load_config, save_config
from rawadapter.harness.optim import SGD, Adam
from rawadapter.numerics.ops import as_tensor, record
from rawadapter.rawio import BayerImage, CfaPattern, write_rawdesk

TINY = dict(n_scenes=10, batch_size=4, epochs=1, lut_dim=8, pretrain_epochs=1)


def tiny(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.toggles == {"use_pk": True, "use_pm": True, "use_lut": True, "use_m": True}
    assert (cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps) == ("adam", 1e-3, 0.9, 0.999, 1e-8)
    with pytest.raises(ValueError):
        RunConfig(mode="dusk")
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    assert RunConfig.from_dict({"use_pk": "false", "epochs": "3"}).use_pk is False


def test_config_toml_round_trip(tmp_path):
    cfg = tiny(mode="overexp", use_lut=False, lr=3e-4, optimizer="sgd")
    save_config(cfg, tmp_path / "run.toml")
    assert load_config(tmp_path / "run.toml") == cfg


def test_optimizers_match_hand_updates():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    sgd = SGD(0.1, momentum=0.9)
    sgd.step(p, g)
    sgd.step(p, g)
    assert np.allclose(p["w"], np.array([1.0, -2.0]) - 0.1 * (g["w"] + 1.9 * g["w"]), atol=1e-15)
    p = {"w": np.array([1.0, -2.0])}
    adam = Adam(0.01)
    adam.step(p, g)
    # first bias-corrected step moves each coordinate by lr * sign(g)
    assert np.allclose(p["w"], np.array([0.99, -2.01]), atol=1e-7)


def test_checkpoint_round_trip_bit_identical(tmp_path, rng):
    w = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(rng.normal(size=5))}
    ckpt = Checkpoint(w, {"lr": 0.1}, [{"epoch": 0, "loss": None}], {"t": 3}, {"m/a.w": np.ones((3, 4), np.float32)},
                      {"kind": "train"})
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert all(back.weights[k].tobytes() == w[k].tobytes() for k in w)
    assert (back.config, back.history, back.optimizer, back.meta) == (ckpt.config, ckpt.history, {"t": 3}, ckpt.meta)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes()[:4] == b"RACK"


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_lr_zero_leaves_weights_unchanged():
    cfg = tiny(lr=0.0)
    ckpt = T.train(cfg)
    init = T.init_weights(cfg)
    assert all(np.array_equal(ckpt.weights[k], init[k]) for k in init)


def test_training_leaves_pretrained_weights_untouched():
    cfg = tiny()
    pre = T.pretrain_backbone(cfg).weights
    snapshot = {k: v.copy() for k, v in pre.items()}
    first = T.train(cfg, pretrained=pre)
    assert all(np.array_equal(pre[k], snapshot[k]) for k in pre)
    assert T.train(cfg, pretrained=pre).history == first.history


def test_frozen_backbone_keeps_backbone(rng):
    cfg = tiny(freeze_backbone=True)
    ckpt = T.train(cfg)
    init = T.init_weights(cfg)
    assert all(np.array_equal(ckpt.weights[k], init[k]) for k in init if k.startswith("bb."))
    assert any(not np.array_equal(ckpt.weights[k], init[k]) for k in init if k.startswith("isp."))


def test_toggles_off_is_plain_backbone(rng):
    cfg = tiny(use_pk=False, use_pm=False, use_lut=False, use_m=False)
    w = T.init_weights(cfg)
    w["head.proj1.w"] = rng.normal(size=w["head.proj1.w"].shape).astype(np.float32)
    x = rng.uniform(size=(2, 3, 64, 64)).astype(np.float32)
    a = T.model_forward(w, x, cfg).data
    b = T.model_forward(w, x, cfg, plain=True).data
    assert np.array_equal(a, b)
    assert T.trainable_names(w, cfg) == sorted(k for k in w if k.startswith(("bb.", "head.")))


def test_two_runs_identical_logs(tmp_path):
    cfg = tiny(epochs=2)
    T.train(cfg, out=tmp_path / "a.ckpt", log_path=tmp_path / "a.jsonl")
    T.train(cfg, out=tmp_path / "b.ckpt", log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    recs = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1, 2] and {"loss", "miou", "val_loss"} <= set(recs[1])


def test_resume_continues_identically(tmp_path):
    full = T.train(tiny(epochs=2))
    half = T.train(tiny(epochs=1), out=tmp_path / "half.ckpt")
    resumed = T.train(tiny(epochs=2), resume=load_checkpoint(tmp_path / "half.ckpt"))
    assert resumed.history == full.history
    assert all(np.array_equal(resumed.weights[k], full.weights[k]) for k in full.weights)
    assert half.history == full.history[:2]


def test_non_finite_loss_reports_step():
    cfg = tiny()
    weights = T.init_weights(cfg)
    weights["head.proj4.b"][0] = np.nan
    with pytest.raises(T.NonFiniteLossError) as exc:
        T.fit(weights, T.raw_task_data(cfg), cfg, T.trainable_names(weights, cfg), history=[{"epoch": 0}])
    assert exc.value.step == 0 and "step 0" in str(exc.value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_aborts_with_step():
    with pytest.raises(T.NonFiniteLossError) as exc:
        T.train(tiny(optimizer="sgd", lr=1e30, momentum=0.0, epochs=3))
    assert exc.value.step >= 1


def test_step_lr_decay():
    cfg = tiny(lr=1.0, lr_step=2, lr_gamma=0.5)
    assert [T._lr_at(cfg, e) for e in (1, 2, 3, 4, 5)] == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_ablation_table_shape_and_protocol():
    seen = []

    def runner(cfg, pw):
        seen.append(cfg)
        return 0.1 * sum(cfg.toggles.values()) + 0.01 * cfg.seed

    table = C.cmd_ablate(tiny(), seeds=(0, 1, 2), pretrain=False, runner=runner)
    assert table.rows == ["base", "+PK", "+PM", "+LUT", "+M"] and table.modes == ["normal", "dark", "overexp"]
    assert len(table.runs) == 45
    lines = table.format().splitlines()
    assert len(lines) == 6 and lines[0].split()[1:] == ["normal", "dark", "overexp"]
    assert abs(table.delta("+PK", "dark") - 0.1) < 1e-12 and table.median("base", "dark") == 0.01
    for mode in table.modes:
        for seed in (0, 1, 2):
            cfgs = [c for c in seen if c.mode == mode and c.seed == seed]
            strip = [{k: v for k, v in c.to_dict().items() if not k.startswith("use_")} for c in cfgs]
            assert len(cfgs) == 5 and all(s == strip[0] for s in strip)


def test_ablation_row_reproducible():
    cfg = tiny(mode="dark", use_pm=False, use_lut=False, use_m=False)
    assert T.final_miou(T.train(cfg)) == T.final_miou(T.train(cfg))


def test_param_report():
    counts = C.cmd_param_report()
    assert counts["lut_sweep"] == {16: 931, 32: 3395, 64: 12931, 128: 50435}
    assert counts["adapters_total"] < counts["backbone"]
    assert counts["input_adapters"] == counts["PK"] + counts["PM"] + counts["LUT"]
    text = C.format_param_report(counts)
    assert "0.93K" in text and "50.44K" in text


def _gray_rawdesk(path, level=1200):
    write_rawdesk(BayerImage(32, 32, CfaPattern.RGGB, 12, 64, 4095, np.full((32, 32), level)), path)
    return path


def test_render_stages_identity_at_init(tmp_path):
    cfg = RunConfig(mode="normal")
    save_checkpoint(Checkpoint(T.init_weights(cfg), cfg.to_dict()), tmp_path / "zero.ckpt")
    out = C.cmd_render_stages(_gray_rawdesk(tmp_path / "g.rawdesk"), tmp_path / "zero.ckpt", tmp_path / "out")
    i1 = np.asarray(Image.open(out["paths"]["I1"]))
    i5 = np.asarray(Image.open(out["paths"]["I5"]))
    assert np.array_equal(i1, i5)
    assert np.asarray(Image.open(out["paths"]["montage"])).shape == (32, 5 * 32 + 8, 3)
    assert json.loads((tmp_path / "out" / "params.json").read_text())["mode"] == "normal"


def test_render_stages_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointNotFoundError):
        C.cmd_render_stages(_gray_rawdesk(tmp_path / "g.rawdesk"), tmp_path / "none.ckpt", tmp_path / "out")


def test_render_stages_dark_brightens(tmp_path):
    T.train(tiny(mode="dark"), out=tmp_path / "dark.ckpt")
    out = C.cmd_render_stages(_gray_rawdesk(tmp_path / "g.rawdesk", 120), tmp_path / "dark.ckpt", tmp_path / "out")
    means = out["params"]["means"]
    assert means[4] > means[0]


def test_gradcheck_report_values():
    results = gradchecks.run_all(2, 0, ["relu", "conv2d", "sog_white_balance"])
    assert all(r.passed for r in results)
    report = gradchecks.format_report(results)
    assert all(r.name in report and f"max_rel_err={r.max_error:.3e}" in report for r in results)


def test_corrupted_backward_names_primitive(monkeypatch):
    def bad_sigmoid(x):
        x = as_tensor(x)
        out = 1.0 / (1.0 + np.exp(-x.data))
        return record("sigmoid", (x,), out, lambda g: (g * out,))

    monkeypatch.setattr(nm, "sigmoid", bad_sigmoid)
    results = gradchecks.run_all(2, 0, ["sigmoid", "tanh"])
    failed = [r.name for r in results if not r.passed]
    assert failed == ["sigmoid"]
    lines = gradchecks.format_report(results).splitlines()
    assert [line for line in lines if line.startswith("FAIL")] == [line for line in lines if "sigmoid" in line]
