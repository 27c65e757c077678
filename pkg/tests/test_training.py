import dataclasses
import logging
import math

import numpy as np
import pytest
import torch

from app.core.config import LossWeights, ModelConfig, TrainConfig
from app.core.errors import CheckpointError, DomainError, InvalidInputError, TrainingDivergenceError
from app.models.schemas import MelSpectrogram, Solver
from app.services.diffusion import NoiseSchedule
from app.services.recognizer import cer, recognize
from app.services.score_net import ScoreUNet
from app.services.training import (
    LAST_CHECKPOINT,
    LOSS_TERMS,
    TRAIN_LOG_FILE,
    ablated_model_config,
    alignment_loss,
    checkpoint_alphabet,
    compute_losses,
    diffusion_loss,
    fit,
    load_checkpoint,
    lr_at,
    model_from_checkpoint,
    read_train_log,
    save_checkpoint,
)

SCHED = NoiseSchedule()
logger = logging.getLogger(__name__)


def forward(model, feat, t=0.4, seed=0):
    mel = torch.as_tensor(np.asarray(feat.mel.values), dtype=model.dtype)
    eps = torch.randn(mel.shape, generator=torch.Generator().manual_seed(seed))
    return mel, eps, model.forward_train(feat, t, eps, SCHED)


class TestComputeLosses:
    def test_total_is_sum_of_terms(self, tiny_model, train_features):
        feat = train_features[1][0]
        mel, eps, out = forward(tiny_model, feat)
        losses = compute_losses(mel, out, 0.4, eps, SCHED)
        parts = losses.as_floats()
        assert parts["total"] == pytest.approx(sum(parts[name] for name in LOSS_TERMS), abs=1e-6)
        assert all(parts[name] >= 0 for name in LOSS_TERMS)

    def test_exact_score_zeroes_diffusion_term(self, tiny_model, train_features):
        mel, eps, out = forward(tiny_model, train_features[1][0])
        exact = dataclasses.replace(out, score=-eps / math.sqrt(SCHED.lam(0.4)))
        assert float(compute_losses(mel, exact, 0.4, eps, SCHED).diffusion) == pytest.approx(0.0, abs=1e-10)

    def test_prior_zero_when_mu_matches_residual(self, tiny_model, train_features):
        mel, eps, out = forward(tiny_model, train_features[1][0])
        matched = dataclasses.replace(out, x_e=mel - out.x_f)
        assert float(compute_losses(mel, matched, 0.4, eps, SCHED).prior) == 0.0

    def test_weights_apply(self, tiny_model, train_features):
        mel, eps, out = forward(tiny_model, train_features[1][0])
        weights = LossWeights(diffusion=0.0, prior=2.0)
        losses = compute_losses(mel, out, 0.4, eps, SCHED, weights)
        parts = losses.as_floats()
        expected = sum(parts[n] for n in LOSS_TERMS if n not in ("diffusion", "prior")) + 2 * parts["prior"]
        assert parts["total"] == pytest.approx(expected, rel=1e-5)

    def test_non_finite_term(self, tiny_model, train_features):
        mel, eps, out = forward(tiny_model, train_features[1][0])
        broken = dataclasses.replace(out, score=torch.full_like(out.score, float("nan")))
        with pytest.raises(TrainingDivergenceError) as info:
            compute_losses(mel, broken, 0.4, eps, SCHED, step=17)
        assert info.value.step == 17 and info.value.term == "diffusion"

    def test_no_energy_term_without_energy(self, tiny_model_cfg, small_corpus, train_features):
        from app.services.acoustic_model import FormantDiffModel

        model = FormantDiffModel(len(small_corpus.alphabet), tiny_model_cfg.model_copy(update={"use_energy": False}))
        mel, eps, out = forward(model, train_features[1][0])
        assert out.energy_target is None
        assert float(compute_losses(mel, out, 0.4, eps, SCHED).energy) == 0.0


def test_backward_is_finite_on_a_long_string(tiny_model_cfg, small_corpus):
    from app.models.schemas import SpeakerProfile
    from app.services.acoustic_model import FormantDiffModel, UtteranceFeatures
    from app.services.signal_features import compute_energy, compute_mel, extract_f0, stft_magnitude
    from app.services.toy_corpus import synthesize_utterance

    phonemes = [0, 1, 2, 3, 4, 0, 2]
    record = synthesize_utterance(phonemes, [120.0] * 7, [0.08] * 7, SpeakerProfile(), 5, small_corpus.alphabet)
    wav = record.waveform
    feat = UtteranceFeatures(id="long", phonemes=phonemes, mel=compute_mel(wav), f0=extract_f0(wav).values,
                             energy=compute_energy(stft_magnitude(wav)).values)
    model = FormantDiffModel(len(small_corpus.alphabet), tiny_model_cfg).train()
    mel, eps, out = forward(model, feat)
    compute_losses(mel, out, 0.4, eps, SCHED).total.backward()
    grads = {name: p.grad for name, p in model.named_parameters() if p.grad is not None}
    assert grads
    assert [name for name, g in grads.items() if not torch.isfinite(g).all()] == []
    torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
    assert all(torch.isfinite(g).all() for g in grads.values())


def test_diffusion_loss_values():
    eps = torch.ones(3, 4)
    assert float(diffusion_loss(torch.zeros(3, 4), eps, 0.25)) == pytest.approx(1.0)
    assert float(diffusion_loss(-eps / 0.5, eps, 0.25)) == pytest.approx(0.0)


def test_alignment_loss_is_nonnegative(rng):
    logits = torch.as_tensor(rng.normal(size=(3, 9)))
    log_soft = torch.log_softmax(logits, dim=0)
    assert float(alignment_loss(log_soft, [3, 3, 3])) >= 0.0


class TestLrAt:
    def test_crossover(self):
        assert lr_at(4000, 4000, 2.0) == pytest.approx(2.0 * 4000**-0.5)

    def test_linear_ramp(self):
        assert lr_at(2000, 4000, 1.0) == pytest.approx(lr_at(4000, 4000, 1.0) / 2)

    def test_inverse_sqrt_decay(self):
        assert lr_at(16000, 4000, 1.0) == pytest.approx(lr_at(4000, 4000, 1.0) / 2)

    def test_step_zero(self):
        with pytest.raises(DomainError):
            lr_at(0, 4000, 1.0)


def test_diffusion_loss_gradient_matches_finite_differences(rng):
    torch.manual_seed(1)
    cfg = ModelConfig(n_mels=8, d_style=8, unet_base=8, unet_mults=(1, 2), time_emb_dim=8)
    net = ScoreUNet(cfg).double()
    x, mu, formant = (torch.randn(1, 8, 12, dtype=torch.float64) for _ in range(3))
    style = torch.randn(1, 8, dtype=torch.float64)
    eps = torch.randn(1, 8, 12, dtype=torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)
    lam = SCHED.lam(0.37)

    def loss():
        return diffusion_loss(net(x, mu, style, formant, t), eps, lam)

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    h = 1e-6
    for _ in range(20):
        param = params[int(rng.integers(len(params)))]
        idx = int(rng.integers(param.numel()))
        analytic = float(param.grad.reshape(-1)[idx])
        flat = param.data.view(-1)
        original = float(flat[idx])
        with torch.no_grad():
            flat[idx] = original + h
            up = float(loss())
            flat[idx] = original - h
            down = float(loss())
            flat[idx] = original
        assert (up - down) / (2 * h) == pytest.approx(analytic, rel=1e-4, abs=1e-8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_model, small_corpus, train_features, tiny_train_cfg, diffusion_cfg):
        path = save_checkpoint(tmp_path / "model.ckpt", tiny_model, small_corpus.alphabet, 12, tiny_train_cfg,
                               diffusion_cfg)
        payload = load_checkpoint(path)
        assert payload["step"] == 12
        assert checkpoint_alphabet(payload) == small_corpus.alphabet
        restored = model_from_checkpoint(payload)
        for (name, a), (_, b) in zip(tiny_model.state_dict().items(), restored.state_dict().items()):
            assert torch.equal(a, b), name
        assert restored.stats == tiny_model.stats

        feat = train_features[1][0]
        mel, eps, out_a = forward(tiny_model, feat)
        _, _, out_b = forward(restored, feat)
        loss_a = compute_losses(mel, out_a, 0.4, eps, SCHED).total
        loss_b = compute_losses(mel, out_b, 0.4, eps, SCHED).total
        assert float(loss_a) == float(loss_b)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.ckpt")

    def test_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "old.ckpt"
        torch.save({"format_version": 99}, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_ablated_model_config():
    cfg = ablated_model_config(ModelConfig(), TrainConfig(no_ef_generators=True, no_energy=True))
    assert not cfg.use_ef_generators and not cfg.use_energy
    assert ablated_model_config(ModelConfig(), TrainConfig()).use_ef_generators


def loss_rows(result):
    return [{k: v for k, v in r.model_dump().items() if k != "wall_time"} for r in result.log]


class TestFit:
    def test_writes_log_and_checkpoint(self, tmp_path, small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg):
        result = fit(small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg, out_dir=tmp_path, max_workers=2)
        assert result.step == 3
        assert result.checkpoint == tmp_path / LAST_CHECKPOINT and result.checkpoint.is_file()
        log = read_train_log(tmp_path / TRAIN_LOG_FILE)
        assert [r.step for r in log] == [1, 2, 3]
        for record in log:
            parts = record.model_dump()
            assert parts["total"] == pytest.approx(sum(parts[n] for n in LOSS_TERMS), rel=1e-5)
            assert all(np.isfinite(parts[n]) and parts[n] >= 0 for n in LOSS_TERMS)
        assert all(torch.isfinite(p).all() for p in result.model.parameters())

    def test_same_seed_same_curve(self, small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg):
        a = fit(small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg, max_workers=2)
        b = fit(small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg, max_workers=2)
        assert loss_rows(a) == loss_rows(b)

    def test_resume_continues_the_run(self, tmp_path, small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg):
        straight = fit(small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg, max_workers=2)
        short_cfg = tiny_train_cfg.model_copy(update={"max_steps": 2})
        first = fit(small_corpus, short_cfg, tiny_model_cfg, diffusion_cfg, out_dir=tmp_path, max_workers=2)
        resumed = fit(small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg, out_dir=tmp_path / "more",
                      resume=first.checkpoint, max_workers=2)
        assert [r.step for r in resumed.log] == [3]
        assert loss_rows(resumed)[0] == pytest.approx(loss_rows(straight)[2])

    def test_ablations_train(self, small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg):
        cfg = tiny_train_cfg.model_copy(update={"no_ef_generators": True, "no_energy": True, "max_steps": 1})
        result = fit(small_corpus, cfg, tiny_model_cfg, diffusion_cfg, max_workers=2)
        assert result.model.decoder.formant_generator is None
        assert result.log[0].energy == 0.0

    def test_divergence_reports_step(self, monkeypatch, small_corpus, tiny_train_cfg, tiny_model_cfg,
                                     diffusion_cfg):
        import app.services.training as training

        monkeypatch.setattr(training, "diffusion_loss", lambda score, eps, lam: score.sum() * float("nan"))
        with pytest.raises(TrainingDivergenceError) as info:
            fit(small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg, max_workers=2)
        assert info.value.step == 1 and info.value.term == "diffusion"

    def test_needs_training_split(self, small_corpus, tiny_train_cfg, tiny_model_cfg, diffusion_cfg):
        heldout_only = small_corpus.model_copy(update={"entries": small_corpus.split("heldout")})
        with pytest.raises(InvalidInputError):
            fit(heldout_only, tiny_train_cfg, tiny_model_cfg, diffusion_cfg)


SLOW_SEEDS = (1, 2, 3)


@pytest.fixture(scope="module")
def overfit_corpus(tmp_path_factory):
    from app.services.toy_corpus import generate_corpus

    return generate_corpus(8, 16, 4, seed=1, out_dir=tmp_path_factory.mktemp("overfit"))


def overfit_scores(corpus, model, features):
    from app.services.variance_adaptor import viterbi_hard_alignment

    cers, predicted_match, hard_match, n_phonemes = [], 0, 0, 0
    for entry, feat in zip(corpus.entries, features):
        truth = np.asarray(entry.durations)
        out = model.synthesize(feat.phonemes, feat.mel, Solver.PF, 50, 1.5, seed=0)
        cers.append(cer(list(feat.phonemes), recognize(MelSpectrogram(values=out.mel), corpus.alphabet)))
        predicted_match += int(np.sum(out.durations == truth))
        with torch.no_grad():
            mel = torch.as_tensor(np.asarray(feat.mel.values), dtype=model.dtype)
            eps = torch.zeros_like(mel)
            hard = viterbi_hard_alignment(model.forward_train(feat, 0.5, eps, SCHED, use_prior=False).log_soft)
        hard_match += int(np.sum(hard == truth))
        n_phonemes += len(truth)
    return float(np.median(cers)), predicted_match / n_phonemes, hard_match / n_phonemes


@pytest.mark.slow
def test_overfit_toy_corpus(overfit_corpus, diffusion_cfg):
    from app.services.training import extract_features

    features = extract_features(overfit_corpus, overfit_corpus.entries)
    drops, cers, predicted, hard = [], [], [], []
    for seed in SLOW_SEEDS:
        train_cfg = TrainConfig(max_steps=20000, eval_every=0, checkpoint_every=0, log_every=500, seed=seed)
        result = fit(overfit_corpus, train_cfg, ModelConfig(), diffusion_cfg)
        result.model.eval()
        totals = [r.total for r in result.log]
        drops.append(totals[-1] / totals[99])
        median_cer, predicted_frac, hard_frac = overfit_scores(overfit_corpus, result.model, features)
        cers.append(median_cer)
        predicted.append(predicted_frac)
        hard.append(hard_frac)
        logger.info("seed %d: loss ratio %.3f, CER %.4f, durations %.3f predicted / %.3f aligned",
                    seed, drops[-1], median_cer, predicted_frac, hard_frac)

    assert np.median(drops) < 0.2
    assert np.median(cers) <= 0.05
    assert np.median(predicted) >= 0.9
    # past the prior anneal the aligner alone must recover the corpus segmentation
    assert np.median(hard) >= 0.9


@pytest.mark.slow
def test_ablation_direction_is_logged(tmp_path_factory, diffusion_cfg):
    from app.core.config import SweepSpec
    from app.services.evaluation import evaluate_model
    from app.services.toy_corpus import generate_corpus

    corpus = generate_corpus(8, 20, 4, seed=5, out_dir=tmp_path_factory.mktemp("ablation"), n_heldout_speakers=1)
    spec = SweepSpec(solvers=["pf"], step_counts=[50], seeds=[0])
    cers = {"full": [], "no_ef_generators": []}
    for seed in SLOW_SEEDS:
        for name, flags in (("full", {}), ("no_ef_generators", {"no_ef_generators": True})):
            train_cfg = TrainConfig(max_steps=5000, eval_every=0, checkpoint_every=0, log_every=1000, seed=seed,
                                    **flags)
            model = fit(corpus, train_cfg, ModelConfig(), diffusion_cfg).model
            cers[name].append(evaluate_model(model, corpus, "heldout", spec).aggregates[0].cer_mean)
    medians = {name: float(np.median(values)) for name, values in cers.items()}
    logger.info("held-out proxy CER medians: full %.4f, without E-F generators %.4f (ablation not better: %s)",
                medians["full"], medians["no_ef_generators"], medians["no_ef_generators"] >= medians["full"])
    assert all(np.isfinite(v) for v in medians.values())
