import json
import math

import numpy as np
import pytest
import torch

from csd import arch, data, evaluation, losses, trainer
from csd.trainer import Strategy, TrainConfig


def _batch(b=4, size=8, k=2, scale=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    lr = torch.rand(b, 3, size, size, generator=g)
    hr = torch.rand(b, 3, size * scale, size * scale, generator=g)
    negs, idx = data.make_negatives(lr, k, scale, np.random.default_rng(seed))
    return data.PatchBatch(lr, hr, negs, idx)


def _small_cfg(**kw):
    base = dict(width=0.5, batch_size=4, epochs=1, steps_per_epoch=3, lr0=1e-3, k=2,
                patch=16, val_every=1, val_images=1)
    base.update(kw)
    return TrainConfig(**base)


def _contrastive_grads(net, phi, strategy):
    batch = _batch()
    cfg = _small_cfg()
    net.zero_grad(set_to_none=True)
    o_s = net(batch.lr, cfg.width)
    o_t = net(batch.lr, 1.0)
    cl = trainer.contrastive_term(o_s, trainer.select_positive(strategy, o_t, batch.hr),
                                  batch, phi, cfg)
    cl.backward()
    masks = arch.student_masks(net, cfg.width)
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
             for n, p in net.named_parameters()}
    teacher_only = [grads[n][~masks[n]] for n in grads]
    student = [grads[n][masks[n]] for n in grads]
    return teacher_only, student


class TestSchedule:
    def test_step_decay(self):
        cfg = TrainConfig()
        assert trainer.lr_at(0, cfg) == 1e-4
        assert trainer.lr_at(199_999, cfg) == 1e-4
        assert trainer.lr_at(200_000, cfg) == 1e-5
        assert trainer.lr_at(400_000, cfg) == 1e-6
        assert trainer.lr_at(10, TrainConfig(decay_every=5, decay_factor=0.5)) == 0.25e-4
        assert trainer.lr_at(10, TrainConfig(decay_every=5, decay_factor=0.3)) == \
            pytest.approx(0.09e-4)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.k, cfg.lambda_t, cfg.lambda_c) == (16, 10, 1.0, 200.0)
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
        assert cfg.width == 0.25 and cfg.strategy is Strategy.CSD

    @pytest.mark.parametrize("kw", [dict(lr0=-1.0), dict(k=0), dict(width=1.5),
                                    dict(lambda_c=-1.0), dict(loss_kind="mse"),
                                    dict(strategy="nope")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestGradientRouting:
    def test_csd_keeps_teacher_weights_out(self, tiny_net, toy_phi):
        teacher_only, student = _contrastive_grads(tiny_net, toy_phi, Strategy.CSD)
        assert all((g == 0).all() for g in teacher_only)
        assert any((g != 0).any() for g in student)

    def test_csd_b_reaches_teacher_weights(self, tiny_net, toy_phi):
        teacher_only, _ = _contrastive_grads(tiny_net, toy_phi, Strategy.CSD_B)
        assert any((g != 0).any() for g in teacher_only)

    def test_gt_positive_keeps_teacher_weights_out(self, tiny_net, toy_phi):
        teacher_only, _ = _contrastive_grads(tiny_net, toy_phi, Strategy.CSD_GT_POS)
        assert all((g == 0).all() for g in teacher_only)

    def test_jt1_has_no_contrastive_term(self, tiny_net, toy_phi):
        total, rep = trainer.compute_losses(tiny_net, toy_phi, _batch(), _small_cfg(strategy="jt1"))
        assert rep.contrastive == 0.0
        assert rep.total == pytest.approx(rep.recon_student + rep.recon_teacher, rel=1e-6)

    def test_csd_a_drops_teacher_reconstruction(self, tiny_net, toy_phi):
        _, rep = trainer.compute_losses(tiny_net, toy_phi, _batch(), _small_cfg(strategy="csd-a"))
        assert rep.total == pytest.approx(rep.recon_student + 200 * rep.contrastive, rel=1e-6)

    def test_csd_total(self, tiny_net, toy_phi):
        _, rep = trainer.compute_losses(tiny_net, toy_phi, _batch(), _small_cfg())
        want = rep.recon_student + rep.recon_teacher + 200 * rep.contrastive
        assert rep.total == pytest.approx(want, rel=1e-6)

    def test_individual_touches_only_the_slice(self, tiny_net, toy_phi):
        total, rep = trainer.compute_losses(tiny_net, toy_phi, _batch(),
                                            _small_cfg(strategy="individual"))
        total.backward()
        masks = arch.student_masks(tiny_net, 0.5)
        for n, p in tiny_net.named_parameters():
            assert (p.grad[~masks[n]] == 0).all(), n
        assert rep.recon_teacher == 0.0

    @pytest.mark.parametrize("kind", ["infonce", "perceptual"])
    def test_other_loss_kinds(self, tiny_net, toy_phi, kind):
        total, rep = trainer.compute_losses(tiny_net, toy_phi, _batch(), _small_cfg(loss_kind=kind))
        assert math.isfinite(rep.total) and rep.contrastive > 0

    def test_separate_student_shares_nothing(self, tiny_net, toy_phi):
        cfg = _small_cfg(strategy="ts-separate")
        t = trainer.Trainer(cfg, tiny_net, toy_phi)
        assert t.student is not None and t.student.base_width == 8
        before = [p.clone() for p in t.student.parameters()]
        t.train_step(_batch())
        assert any(not torch.equal(a, b) for a, b in zip(before, t.student.parameters()))


def test_adam_matches_closed_form():
    cfg = TrainConfig(lr0=0.01)
    w = torch.nn.Parameter(torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))
    opt = trainer.make_optimizer([w], cfg)
    target = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64)
    ref = w.detach().clone()
    m = torch.zeros_like(ref)
    v = torch.zeros_like(ref)
    for t in range(1, 6):
        opt.zero_grad()
        ((w - target) ** 2).sum().backward()
        opt.step()
        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        ref = ref - 0.01 * m_hat / (v_hat.sqrt() + 1e-8)
        assert (w.detach() - ref).abs().max().item() <= 1e-10


def test_train_step_sets_scheduled_lr(tiny_net, toy_phi):
    cfg = _small_cfg(decay_every=2)
    t = trainer.Trainer(cfg, tiny_net, toy_phi)
    lrs = []
    for _ in range(3):
        t.train_step(_batch())
        lrs.append(t.optimizer.param_groups[0]["lr"])
    assert lrs == [1e-3, 1e-3, 1e-4]
    assert t.state.iteration == 3


class TestFit:
    def test_zero_epochs_is_a_no_op(self, tiny_net, toy_phi):
        before = {k: v.clone() for k, v in tiny_net.state_dict().items()}
        res = trainer.fit(_small_cfg(epochs=0), tiny_net, data.synthetic_dataset(2, 32, 2),
                          toy_phi)
        assert res.history == [] and res.validations == []
        assert all(torch.equal(before[k], v) for k, v in tiny_net.state_dict().items())

    def test_outputs(self, tiny_net, toy_phi, tmp_path):
        train = data.synthetic_dataset(4, 32, 2)
        val = data.synthetic_dataset(1, 32, 2, seed=9)
        res = trainer.fit(_small_cfg(epochs=2), tiny_net, train, toy_phi, val, out_dir=tmp_path)
        assert len(res.history) == 6
        assert [v["iter"] for v in res.validations] == [0, 3, 6]
        for name in ("last.pt", "best.pt", "trainer_state.pt", "history.csv"):
            assert (tmp_path / name).is_file(), name
        header = (tmp_path / "history.csv").read_text().splitlines()[0]
        assert header == "iter,loss_total,loss_recS,loss_recT,loss_cl,lr"
        _, meta = arch.load_checkpoint(tmp_path / "best.pt")
        assert "psnr_student" in meta["extra"]

    def test_resume_is_bit_identical(self, toy_phi, tmp_path):
        train = data.synthetic_dataset(4, 32, 2)
        straight = arch.build_backbone(16, 2, 2, seed=0)
        trainer.fit(_small_cfg(epochs=2), straight, train, toy_phi)

        first = arch.build_backbone(16, 2, 2, seed=0)
        trainer.fit(_small_cfg(epochs=1), first, train, toy_phi, out_dir=tmp_path)
        resumed = arch.build_backbone(16, 2, 2, seed=5)  # weights come from the state file
        res = trainer.fit(_small_cfg(epochs=2), resumed, train, toy_phi,
                          resume=tmp_path / "trainer_state.pt")
        assert [h["iter"] for h in res.history] == [4, 5, 6]
        for a, b in zip(straight.parameters(), resumed.parameters()):
            assert torch.equal(a, b)

    def test_teacher_init_round_trip(self, tiny_net, toy_phi, tmp_path):
        train = data.synthetic_dataset(2, 32, 2)
        val = data.synthetic_dataset(1, 32, 2, seed=3)
        trainer.fit(_small_cfg(), tiny_net, train, toy_phi, val, out_dir=tmp_path / "a")
        _, meta = arch.load_checkpoint(tmp_path / "a" / "last.pt")
        recorded = meta["extra"]["psnr_teacher"]

        fresh = arch.build_backbone(16, 2, 2, seed=99)
        res = trainer.fit(_small_cfg(teacher_init=str(tmp_path / "a" / "last.pt")), fresh,
                          train, toy_phi, val)
        assert res.validations[0]["iter"] == 0
        assert abs(res.validations[0]["psnr_teacher"] - recorded) <= 0.01

    def test_teacher_init_config_mismatch(self, tiny_net, toy_phi, tmp_path):
        path = arch.save_checkpoint(tiny_net, tmp_path / "teacher.pt")
        with pytest.raises(ValueError):
            trainer.fit(_small_cfg(epochs=0, teacher_init=str(path)),
                        arch.build_backbone(8, 2, 2), data.synthetic_dataset(2, 32, 2), toy_phi)

    def test_non_finite_loss_aborts_with_dump(self, tiny_net, toy_phi, tmp_path):
        with torch.no_grad():
            tiny_net.head.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(losses.NonFiniteLossError):
            trainer.fit(_small_cfg(), tiny_net, data.synthetic_dataset(2, 32, 2), toy_phi,
                        out_dir=tmp_path)
        dump = json.loads((tmp_path / "nan_dump.json").read_text())
        assert dump["iteration"] == 0 and dump["weights_finite"] is False
