import json
import statistics

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featsketch.errors import ConfigError, IntegrityError, TrainingAborted, ValidationError
from featsketch.generator_tap import FeatureSchedule, InverterConfig, LatentCode, build_toy_generator, toy_schedule
from featsketch.losses import LossWeights
from featsketch.trainer import (
    STAGE1_WEIGHTS,
    STAGE2_WEIGHTS,
    Adapters,
    TrainConfig,
    TrainData,
    Trainer,
    checkpoint_digest,
    checkpoint_load,
    checkpoint_save,
    config_hash,
    load_sketch_generator,
    prepare_latents,
    stage_weights,
    toy_model_config,
    toy_train_config,
    train,
)


def test_default_training_profile():
    cfg = TrainConfig().validate()
    assert (cfg.total_iters, cfg.stage1_iters) == (7200, 1600)
    assert cfg.lr == 0.00014
    assert cfg.betas == (0.0, 0.99)
    assert cfg.weights_stage1 == LossWeights(200, 1.2, 120, 1)
    assert cfg.weights_stage2 == LossWeights(0, 1.2, 120, 1)


def test_stage_boundaries():
    cfg = TrainConfig()
    assert stage_weights(0, cfg).lambda_recon == 200
    assert stage_weights(1599, cfg) == STAGE1_WEIGHTS
    assert stage_weights(1600, cfg) == STAGE2_WEIGHTS
    assert stage_weights(1600, cfg).lambda_recon == 0
    with pytest.raises(ValueError):
        stage_weights(7200, cfg)


def test_degenerate_stage_one():
    cfg = TrainConfig(stage1_iters=0)
    assert stage_weights(0, cfg) == STAGE2_WEIGHTS


@settings(max_examples=50, deadline=None)
@given(total=st.integers(1, 10_000), data=st.data())
def test_stage_step_function_property(total, data):
    s1 = data.draw(st.integers(0, total))
    cfg = TrainConfig(total_iters=total, stage1_iters=s1)
    it = data.draw(st.integers(0, total - 1))
    assert stage_weights(it, cfg) == (STAGE1_WEIGHTS if it < s1 else STAGE2_WEIGHTS)


def test_validation_names_fields():
    with pytest.raises(ValidationError) as info:
        TrainConfig(total_iters=10, stage1_iters=20).validate()
    assert set(info.value.fields) == {"stage1_iters", "total_iters"}
    with pytest.raises(ValidationError) as info:
        TrainConfig(lr=-1e-4).validate()
    assert tuple(info.value.fields) == ("lr",)


def test_config_hash_ignores_cadence(schedule):
    m = toy_model_config()
    a = config_hash(toy_train_config(), m, "fgbg", (), schedule)
    assert a == config_hash(toy_train_config(checkpoint_every=7), m, "fgbg", (), schedule)
    assert a != config_hash(toy_train_config(lr=1e-3), m, "fgbg", (), schedule)


def test_toy_run_contract(toy_run):
    lines = toy_run.log_path.read_text().splitlines()
    assert len(lines) == 300
    records = [json.loads(line) for line in lines]
    assert [r["iteration"] for r in records] == list(range(300))
    assert set(records[0]) == {"iteration", "stage", "recon", "perc", "clip", "adv_g", "adv_d", "total"}
    assert {r["stage"] for r in records[:67]} == {1} and {r["stage"] for r in records[67:]} == {2}
    assert [p.name for p in toy_run.checkpoints] == ["ckpt_000100.ckpt", "ckpt_000200.ckpt", "ckpt_000300.ckpt"]
    final = checkpoint_load(toy_run.checkpoints[-1])
    assert final.iteration == 300
    assert checkpoint_digest(final) == checkpoint_digest(toy_run.final)


def test_toy_run_recon_decreases(toy_run):
    recon = [json.loads(line)["recon"] for line in toy_run.log_path.read_text().splitlines()]
    assert statistics.median(recon[-50:]) < statistics.median(recon[:50])


def test_stage_two_drops_recon_weight(toy_run):
    records = [json.loads(line) for line in toy_run.log_path.read_text().splitlines()]
    r = records[150]
    expected = 1.2 * r["perc"] + 120 * r["clip"] + r["adv_g"]
    assert abs(r["total"] - expected) <= 1e-4 * abs(expected)


def test_checkpoint_roundtrip(tmp_path, handle, toy_data):
    tr = Trainer(toy_train_config(), toy_data, handle, model=toy_model_config())
    tr.run(stop_at=3)
    ckpt = tr.checkpoint()
    back = checkpoint_load(checkpoint_save(ckpt, tmp_path / "a.ckpt"))
    assert back.generator_params.keys() == ckpt.generator_params.keys()
    assert all(torch.equal(back.generator_params[k], v) for k, v in ckpt.generator_params.items())
    assert checkpoint_digest(back) == checkpoint_digest(ckpt)
    net = load_sketch_generator(tmp_path / "a.ckpt", handle.schedule)
    feats = [f[:1] for f in tr.features]
    with torch.no_grad():
        assert torch.equal(net(feats), tr.sketch_gen.eval()(feats))


def test_checkpoint_integrity(tmp_path, handle, toy_data):
    tr = Trainer(toy_train_config(), toy_data, handle, model=toy_model_config())
    path = checkpoint_save(tr.checkpoint(), tmp_path / "a.ckpt")
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[: len(raw) // 2])
    (tmp_path / "tiny.ckpt").write_bytes(raw[:10])
    flipped = bytearray(raw)
    flipped[-5] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    (tmp_path / "magic.ckpt").write_bytes(b"X" * 8 + raw[8:])
    for name in ("short", "tiny", "flip", "magic"):
        with pytest.raises(IntegrityError):
            checkpoint_load(tmp_path / f"{name}.ckpt")


def test_resume_with_changed_schedule_refused(handle, toy_data):
    ckpt = Trainer(toy_train_config(), toy_data, handle, model=toy_model_config()).checkpoint()
    entries = list(toy_schedule().entries)
    entries[-2] = (64, 4)
    other = build_toy_generator(FeatureSchedule(tuple(entries), 4, 64), seed=0)
    with pytest.raises(ConfigError):
        Trainer(toy_train_config(), toy_data, other, model=toy_model_config()).restore(ckpt)
    with pytest.raises(ConfigError):
        Trainer(toy_train_config(lr=1e-3), toy_data, handle, model=toy_model_config()).restore(ckpt)


def test_short_resume_equivalence(tmp_path, handle, toy_data):
    cfg = toy_train_config(aug_p=1.0)
    straight = Trainer(cfg, toy_data, handle, model=toy_model_config())
    straight.run(stop_at=6)
    first = Trainer(cfg, toy_data, handle, model=toy_model_config())
    first.run(stop_at=3)
    path = checkpoint_save(first.checkpoint(), tmp_path / "mid.ckpt")
    second = Trainer(cfg, toy_data, handle, model=toy_model_config())
    second.restore(checkpoint_load(path))
    second.run(stop_at=6)
    assert checkpoint_digest(second.checkpoint()) == checkpoint_digest(straight.checkpoint())


@pytest.mark.parametrize("lambda_adv", [0.0, 1.0])
def test_generator_step_leaves_bank_untouched(handle, toy_data, lambda_adv):
    w = LossWeights(200, 1.2, 120, lambda_adv)
    cfg = toy_train_config(weights_stage1=w, weights_stage2=w)
    tr = Trainer(cfg, toy_data, handle, model=toy_model_config())
    tr.discriminator_step = lambda *args: torch.tensor(0.0)
    before = {k: v.clone() for k, v in tr.bank.state_dict().items()}
    gen_before = {k: v.clone() for k, v in tr.sketch_gen.state_dict().items()}
    tr.step()
    assert all(torch.equal(before[k], v) for k, v in tr.bank.state_dict().items())
    assert all(p.grad is None for p in tr.bank.parameters())
    assert any(not torch.equal(gen_before[k], v) for k, v in tr.sketch_gen.state_dict().items())


def test_training_abort_reports_last_checkpoint(tmp_path, handle, toy_data):
    from featsketch.adapters import StubEmbedNet

    calls = {"n": 0}
    embed = StubEmbedNet()

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 10:  # two embedding calls per step, so step 5 fails
            raise RuntimeError("embedding service went away")
        return embed(x)

    cfg = toy_train_config(checkpoint_every=2)
    with pytest.raises(TrainingAborted) as info:
        train(cfg, toy_data, handle, Adapters(embednet=flaky), toy_model_config(), out_dir=tmp_path)
    assert info.value.last_checkpoint is not None
    assert checkpoint_load(info.value.last_checkpoint).iteration == 4


def test_fgbg_regions(handle, toy_data):
    tr = Trainer(toy_train_config(), toy_data, handle, model=toy_model_config(), regions="fgbg", parts=())
    rec = tr.step()
    assert sorted(tr.bank.region_names) == ["background", "foreground", "full"]
    assert all(map(lambda v: v == v, rec.values()))


def test_prepare_latents_inverts_missing_codes(handle, toy_data):
    bare = TrainData(toy_data.photos, toy_data.sketches, None)
    oracle = iter(toy_data.latents)
    inv = InverterConfig(encoder=lambda img: LatentCode(next(oracle)), refine_steps=0)
    filled = prepare_latents(bare, handle, inv)
    assert torch.equal(filled.latents, toy_data.latents)
    with pytest.raises(ConfigError):
        Trainer(toy_train_config(), bare, handle)


def test_empty_dataset_rejected(handle):
    empty = TrainData(torch.zeros(0, 3, 64, 64), torch.zeros(0, 3, 64, 64), torch.zeros(0, 10, 32))
    with pytest.raises(ConfigError):
        Trainer(toy_train_config(), empty, handle)
