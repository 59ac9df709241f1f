from dataclasses import replace

import numpy as np
import pytest
import torch

from laspa.encoders import encode
from laspa.io import load_checkpoint
from laspa.synthcorpus import CorpusSpec, generate_corpus
from laspa.training import (
    METRICS_HEADER,
    ModelConfig,
    OptimizerConfig,
    autograd_gradients,
    corpus_tensors,
    grad_check,
    infer_speaker_embedding,
    init_state,
    tiny_model_config,
    train,
    train_step,
)


def tiny_setup(n_speakers=4, n_languages=2, utts=4, frames=8):
    cfg = replace(tiny_model_config(), n_speakers=n_speakers, n_languages=n_languages)
    corpus = generate_corpus(
        CorpusSpec(n_speakers=n_speakers, n_languages=n_languages, utts_per_speaker_per_language=utts,
                   frames_per_utt=frames, n_mels=cfg.encoder.n_mels, seed=5)
    )
    return cfg, corpus


def snapshot(params):
    return {k: v.clone() for k, v in params.items()}


def test_zero_learning_rate_leaves_params_bitwise():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    before = snapshot(state.params)
    opt = OptimizerConfig(learning_rate=0.0, weight_decay=0.0, batch_size=8)
    state, report, accepted = train_step(state, corpus[:8], opt)
    assert accepted and report is not None and np.isfinite(report.total)
    assert all(torch.equal(before[k], state.params[k]) for k in before)
    assert state.step == 1
    # the moments still see the gradient
    assert any(torch.count_nonzero(m) for m in state.adam_m.values())


def test_decoupled_decay_shrinks_by_exact_factor():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    wd = 0.125
    opt = OptimizerConfig(learning_rate=0.0, weight_decay=wd, batch_size=8)
    expected = snapshot(state.params)
    for _ in range(3):
        state, _, accepted = train_step(state, corpus[:8], opt)
        assert accepted
        expected = {k: v * (1.0 - wd) for k, v in expected.items()}
    assert all(torch.equal(expected[k], state.params[k]) for k in expected)


def test_step_counter_strictly_increasing_and_params_finite():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    opt = OptimizerConfig(batch_size=8)
    steps = []
    for i in range(4):
        state, _, _ = train_step(state, corpus[8 * i:8 * i + 8], opt)
        steps.append(state.step)
        assert all(torch.isfinite(v).all() for v in state.params.values())
    assert steps == [1, 2, 3, 4]


def test_non_finite_step_rejected_state_unchanged():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    opt = OptimizerConfig(batch_size=8)
    state, _, _ = train_step(state, corpus[:8], opt)
    before = snapshot(state.params)
    moments = snapshot(state.adam_m)

    mels, spk, lng = corpus_tensors(corpus[:8])
    mels[0, 0, 0] = float("nan")
    state, report, accepted = train_step(state, (mels, spk, lng), opt)
    assert not accepted and report is None

    # an overflowing weight gives a non-finite loss rather than an input error
    state.params["decoder.out.weight"][0, 0] = float("inf")
    state, report, accepted = train_step(state, corpus[:8], opt)
    assert not accepted and report is None
    state.params["decoder.out.weight"][0, 0] = before["decoder.out.weight"][0, 0]

    assert state.rejected_steps == 2 and state.step == 1
    assert all(torch.equal(before[k], state.params[k]) for k in before)
    assert all(torch.equal(moments[k], state.adam_m[k]) for k in moments)


def test_batch_validation():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    with pytest.raises(ValueError, match="< 4"):
        train_step(state, corpus[:3], OptimizerConfig(batch_size=4))
    with pytest.raises(ValueError, match="batch_size"):
        OptimizerConfig(batch_size=2)


def test_two_runs_identical():
    cfg, corpus = tiny_setup()
    opt = OptimizerConfig(batch_size=8, epochs=2)
    a, rows_a = train(cfg, opt, corpus, seed=3)
    b, rows_b = train(cfg, opt, corpus, seed=3)
    assert rows_a == rows_b
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
    _, rows_c = train(cfg, opt, corpus, seed=4)
    assert rows_c != rows_a


def test_tiny_model_loss_decreases_over_200_steps():
    cfg, corpus = tiny_setup()  # 32 utterances, batch 8: 4 steps per epoch
    opt = OptimizerConfig(batch_size=8, epochs=50)
    state, rows = train(cfg, opt, corpus, seed=0)
    assert len(rows) == 200 and state.step == 200
    totals = np.array([float(r[-1]) for r in rows])
    assert totals[-1] < totals[0]
    assert totals[-20:].mean() < 0.7 * totals[:20].mean()


def test_zero_epochs(tmp_path):
    cfg, corpus = tiny_setup()
    metrics = tmp_path / "m.csv"
    state, rows = train(cfg, OptimizerConfig(batch_size=8, epochs=0), corpus, seed=0, metrics_path=metrics)
    fresh = init_state(cfg, 0)
    assert rows == [] and state.step == 0
    assert all(torch.equal(fresh.params[k], state.params[k]) for k in fresh.params)
    assert not metrics.exists() or metrics.read_text().strip() in ("", ",".join(METRICS_HEADER))


def test_metrics_csv_row_count(tmp_path):
    cfg, corpus = tiny_setup(utts=5)  # 40 utterances, batch 16: 2 steps, 8 dropped
    metrics = tmp_path / "m.csv"
    train(cfg, OptimizerConfig(batch_size=16, epochs=3), corpus, seed=0, metrics_path=metrics)
    lines = metrics.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len(lines) - 1 == 2 * 3
    assert [int(ln.split(",")[0]) for ln in lines[1:]] == [1, 2, 3, 4, 5, 6]
    assert [int(ln.split(",")[1]) for ln in lines[1:]] == [1, 1, 2, 2, 3, 3]


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg, corpus = tiny_setup()
    opt = OptimizerConfig(batch_size=8, epochs=4, checkpoint_every=2)
    full, rows = train(cfg, opt, corpus, seed=1, checkpoint_dir=tmp_path, digest=b"d")
    assert sorted(p.name for p in tmp_path.glob("*.lspc")) == ["epoch0002.lspc", "epoch0004.lspc"]
    mid = load_checkpoint(tmp_path / "epoch0002.lspc", cfg, expected_digest=b"d")
    assert mid.epoch == 2 and mid.step == 8
    resumed, rest = train(cfg, opt, corpus, seed=1, state=mid)
    assert rest == rows[8:]
    assert all(torch.equal(full.params[k], resumed.params[k]) for k in full.params)
    assert all(torch.equal(full.adam_v[k], resumed.adam_v[k]) for k in full.params)


def test_inference_uses_speaker_encoder_only():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    mel = corpus[0].mel
    e1 = infer_speaker_embedding(state, mel)
    e2 = infer_speaker_embedding(state, mel)
    assert e1.kind == "speaker" and e1.values.shape == (cfg.encoder.embed_dim,)
    assert torch.equal(e1.values, e2.values)
    direct = encode(state.params, mel.frames, cfg.encoder, "spk_encoder.")[0]
    assert torch.equal(e1.values, direct)
    assert state.calls["speaker_encoder"] == 2
    assert state.calls["language_encoder"] == 0
    assert state.calls["fusion"] == 0
    assert state.calls["decoder"] == 0


def test_training_touches_every_component():
    cfg, corpus = tiny_setup()
    state = init_state(cfg, 0)
    train_step(state, corpus[:8], OptimizerConfig(batch_size=8))
    assert all(state.calls[c] == 1 for c in ("speaker_encoder", "language_encoder", "fusion", "decoder"))


def test_variants():
    cfg = ModelConfig()
    full = init_state(cfg, 0)
    no_prefix = init_state(cfg.with_variant("no_prefix"), 0)
    spk = init_state(cfg.with_variant("speaker_only"), 0)
    assert full.prefix_parameter_count() == 2 * 2 * 4 * 64
    assert no_prefix.prefix_parameter_count() == 0
    assert set(no_prefix.params) == set(full.params)
    assert set(spk.params) == {k for k in full.params if k.startswith(("spk_encoder.", "spk_head."))}
    # prefix tokens stay a small share of the model
    assert full.prefix_parameter_count() / full.parameter_count() < 0.05
    # shared components start from identical values across variants
    for k, v in spk.params.items():
        assert torch.equal(v, full.params[k])


@pytest.fixture(scope="module")
def lstm_report():
    return grad_check()


def test_grad_check_covers_every_tensor_once(lstm_report):
    names = list(init_state(tiny_model_config(), 0).params)
    assert list(lstm_report.errors) == names
    assert any(n.endswith(".p_k") for n in names) and any(n.endswith(".p_v") for n in names)
    assert lstm_report.passed, lstm_report.lines()
    assert len(lstm_report.lines()) == len(names)


def test_grad_check_detects_corrupted_gradient():
    def corrupted(params, cfg, batch):
        grads = autograd_gradients(params, cfg, batch)
        grads["fusion.pt_spk.p_v"] = grads["fusion.pt_spk.p_v"] * 1.01
        return grads

    cfg = replace(tiny_model_config(), encoder=replace(tiny_model_config().encoder, channels=(2,)))
    report = grad_check(cfg, analytic=corrupted)
    assert report.failures == ["fusion.pt_spk.p_v"]
    assert not report.passed


def test_grad_check_refuses_large_configs():
    with pytest.raises(ValueError, match="tiny"):
        grad_check(ModelConfig())
