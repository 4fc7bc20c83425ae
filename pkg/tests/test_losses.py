import math

import numpy as np
import pytest
import torch

from lad.lnm import IGNORE
from lad.losses import (
    LossWeights,
    consistency_distance,
    cross_entropy_seg,
    cwd_loss,
    student_loss,
    teacher_loss,
)


def rand_logits(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return scale * torch.randn(*shape, generator=g, dtype=torch.float64)


def rand_label(h, w, c, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.integers(0, c, (h, w)))


# independent numpy references -------------------------------------------------


def ce_reference(logits, label):
    logits, label = np.asarray(logits, dtype=np.float64), np.asarray(label)
    c, h, w = logits.shape
    total, n = 0.0, 0
    for i in range(h):
        for j in range(w):
            if label[i, j] == IGNORE:
                continue
            z = logits[:, i, j]
            total += -(z[label[i, j]] - math.log(sum(math.exp(v) for v in z)))
            n += 1
    return total / n if n else 0.0


def cwd_reference(teacher, student, tau):
    teacher, student = np.asarray(teacher, dtype=np.float64), np.asarray(student, dtype=np.float64)
    c = teacher.shape[0]
    acc = 0.0
    for k in range(c):
        t = teacher[k].ravel() / tau
        s = student[k].ravel() / tau
        p = np.exp(t - t.max()) / np.exp(t - t.max()).sum()
        q = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        acc += float((p * np.log(p / q)).sum())
    return tau**2 * acc / c


def central_diff(fn, x, step=1e-4):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn(x))
        flat[i] = orig - step
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-4):
    err = (analytic - numeric).abs().max().item()
    scale = max(numeric.abs().max().item(), 1e-12)
    assert err / scale < rel, f"relative gradient error {err / scale:.2e}"


# cross-entropy ------------------------------------------------------------------


class TestCrossEntropy:
    def test_saturated(self):
        label = rand_label(4, 4, 3)
        logits = torch.zeros(3, 4, 4, dtype=torch.float64)
        logits.scatter_(0, label.unsqueeze(0), 30.0)
        assert float(cross_entropy_seg(logits, label)) < 1e-9

    def test_uniform(self):
        label = rand_label(5, 5, 4, seed=3)
        assert float(cross_entropy_seg(torch.zeros(4, 5, 5), label)) == pytest.approx(math.log(4), abs=1e-12)

    def test_single_pixel(self):
        logits = torch.tensor([[[1.0]], [[0.0]]])
        want = -math.log(math.e / (math.e + 1))
        assert want == pytest.approx(0.3133, abs=1e-4)
        assert float(cross_entropy_seg(logits, torch.tensor([[0]]))) == pytest.approx(want, abs=1e-12)

    def test_matches_reference_with_ignore(self):
        logits = rand_logits(3, 6, 6, seed=1, scale=2.0)
        label = rand_label(6, 6, 3, seed=1)
        label[0, :] = IGNORE
        got = float(cross_entropy_seg(logits, label))
        assert got == pytest.approx(ce_reference(logits.numpy(), label.numpy()), abs=1e-12)

    def test_all_ignore_is_zero(self):
        label = torch.full((3, 3), IGNORE)
        assert float(cross_entropy_seg(rand_logits(2, 3, 3), label)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy_seg(rand_logits(2, 3, 3), rand_label(3, 4, 2))

    def test_nonfinite_rejected(self):
        logits = rand_logits(2, 3, 3)
        logits[0, 0, 0] = float("nan")
        with pytest.raises(FloatingPointError):
            cross_entropy_seg(logits, rand_label(3, 3, 2))


# CWD ------------------------------------------------------------------------------


class TestCwd:
    def test_identical_is_zero(self):
        t = rand_logits(4, 5, 5, seed=2)
        assert float(cwd_loss(t, t.clone(), 4.0)) == pytest.approx(0.0, abs=1e-14)

    def test_per_channel_shift_invariance(self):
        t = rand_logits(4, 5, 5, seed=2)
        shift = torch.tensor([3.0, -7.0, 0.5, 100.0], dtype=torch.float64).view(4, 1, 1)
        assert float(cwd_loss(t, t + shift, 4.0)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        t = torch.tensor([[[0.0, 1.0]]])
        s = torch.tensor([[[1.0, 0.0]]])
        p0, p1 = 1 / (1 + math.e), math.e / (1 + math.e)
        want = (p1 - p0) * math.log(p1 / p0)
        assert want == pytest.approx(0.4622, abs=1e-4)
        assert float(cwd_loss(t, s, 1.0)) == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("tau", [1.0, 4.0, 10.0])
    def test_matches_reference(self, tau):
        t, s = rand_logits(3, 4, 5, seed=4, scale=3.0), rand_logits(3, 4, 5, seed=5, scale=3.0)
        assert float(cwd_loss(t, s, tau)) == pytest.approx(cwd_reference(t.numpy(), s.numpy(), tau), abs=1e-12)

    def test_batch_is_mean_of_items(self):
        t, s = rand_logits(3, 2, 4, 4, seed=1), rand_logits(3, 2, 4, 4, seed=2)
        each = [float(cwd_loss(t[i], s[i], 4.0)) for i in range(3)]
        assert float(cwd_loss(t, s, 4.0)) == pytest.approx(np.mean(each), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_non_negative(self, seed):
        t, s = rand_logits(3, 4, 4, seed=seed, scale=5), rand_logits(3, 4, 4, seed=seed + 100, scale=5)
        assert float(cwd_loss(t, s, 4.0)) >= 0.0

    def test_large_temperature_is_smooth(self):
        t, s = rand_logits(3, 4, 4, seed=1, scale=3), rand_logits(3, 4, 4, seed=2, scale=3)
        values = [float(cwd_loss(t, s, tau)) for tau in (10, 20, 40, 60, 80, 100)]
        assert all(math.isfinite(v) for v in values)
        # tau^2 * KL tends to a finite limit (half the per-channel logit variance gap)
        assert abs(values[-1] - values[-2]) < abs(values[0] - values[1])

    def test_no_gradient_into_teacher(self):
        t = rand_logits(2, 3, 3, seed=0).requires_grad_(True)
        s = rand_logits(2, 3, 3, seed=1).requires_grad_(True)
        cwd_loss(t, s, 4.0).backward()
        assert t.grad is None
        assert s.grad is not None and s.grad.abs().sum() > 0

    def test_teacher_perturbation_changes_value(self):
        t, s = rand_logits(2, 3, 3, seed=0), rand_logits(2, 3, 3, seed=1)
        t2 = t.clone()
        t2[0, 1, 1] += 1.0
        assert float(cwd_loss(t, s)) != float(cwd_loss(t2, s))

    def test_bad_arguments(self):
        t = rand_logits(2, 3, 3)
        with pytest.raises(ValueError):
            cwd_loss(t, rand_logits(2, 3, 4), 4.0)
        with pytest.raises(ValueError):
            cwd_loss(t, t, 0.0)


# teacher / student objectives ---------------------------------------------------------


class TestTeacherLoss:
    def test_equal_paths(self):
        o = rand_logits(3, 4, 4, seed=1)
        label = rand_label(4, 4, 3)
        total, parts = teacher_loss(o, o.clone(), label)
        assert float(parts["consistency"]) == 0.0
        assert float(total) == 2 * float(cross_entropy_seg(o, label))

    def test_lambda_zero(self):
        o1, o2 = rand_logits(3, 4, 4, seed=1), rand_logits(3, 4, 4, seed=2)
        label = rand_label(4, 4, 3)
        total, parts = teacher_loss(o1, o2, label, LossWeights(lambda_consistency=0.0))
        assert float(total) == float(parts["ce1"] + parts["ce2"])
        assert float(parts["consistency"]) > 0

    def test_termwise(self):
        o1, o2 = rand_logits(2, 4, 4, seed=7, scale=2), rand_logits(2, 4, 4, seed=8, scale=2)
        label = rand_label(4, 4, 2, seed=7)
        w = LossWeights(lambda_consistency=0.7, temperature=4.0)
        total, _ = teacher_loss(o1, o2, label, w)
        a, b, l = o1.numpy(), o2.numpy(), label.numpy()
        want = ce_reference(a, l) + ce_reference(b, l) + 0.7 * 0.5 * (cwd_reference(a, b, 4.0) + cwd_reference(b, a, 4.0))
        assert float(total) == pytest.approx(want, abs=1e-10)

    def test_symmetric(self):
        o1, o2 = rand_logits(3, 5, 5, seed=1), rand_logits(3, 5, 5, seed=2)
        label = rand_label(5, 5, 3)
        assert float(teacher_loss(o1, o2, label)[0]) == float(teacher_loss(o2, o1, label)[0])

    def test_one_directional_switch(self):
        o1, o2 = rand_logits(3, 5, 5, seed=1), rand_logits(3, 5, 5, seed=2)
        d = consistency_distance(o1, o2, 4.0, symmetric=False)
        assert float(d) == pytest.approx(float(cwd_loss(o1, o2, 4.0)), abs=1e-14)

    def test_both_paths_receive_gradients(self):
        o1 = rand_logits(3, 4, 4, seed=1).requires_grad_(True)
        o2 = rand_logits(3, 4, 4, seed=2).requires_grad_(True)
        total, parts = teacher_loss(o1, o2, rand_label(4, 4, 3))
        parts["weighted_consistency"].backward()
        assert o1.grad.abs().sum() > 0 and o2.grad.abs().sum() > 0


class TestStudentLoss:
    def test_beta_zero(self):
        s, t = rand_logits(3, 4, 4, seed=1), rand_logits(3, 4, 4, seed=2)
        label = rand_label(4, 4, 3)
        total, _ = student_loss(s, t, label, LossWeights(beta_kd=0.0))
        assert float(total) == float(cross_entropy_seg(s, label))

    def test_perfect(self):
        label = rand_label(4, 4, 3)
        t = torch.zeros(3, 4, 4, dtype=torch.float64).scatter_(0, label.unsqueeze(0), 40.0)
        total, _ = student_loss(t.clone(), t, label)
        assert float(total) < 1e-9

    def test_defaults_termwise(self):
        s, t = rand_logits(4, 4, 4, seed=3, scale=2), rand_logits(4, 4, 4, seed=4, scale=2)
        label = rand_label(4, 4, 4, seed=3)
        total, _ = student_loss(s, t, label)
        want = ce_reference(s.numpy(), label.numpy()) + 3.0 * cwd_reference(t.numpy(), s.numpy(), 4.0)
        assert float(total) == pytest.approx(want, abs=1e-10)

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_consistency, w.beta_kd, w.temperature) == (1.0, 3.0, 4.0)


# gradients vs central finite differences ----------------------------------------------


@pytest.mark.parametrize("seed", range(3))
class TestFiniteDifferences:
    def test_ce(self, seed):
        x = rand_logits(2, 3, 3, seed=seed).requires_grad_(True)
        label = rand_label(3, 3, 2, seed=seed)
        cross_entropy_seg(x, label).backward()
        numeric = central_diff(lambda z: cross_entropy_seg(z, label), x.detach().clone())
        assert_grad_close(x.grad, numeric)

    def test_cwd_student(self, seed):
        t = rand_logits(2, 3, 3, seed=seed + 10)
        s = rand_logits(2, 3, 3, seed=seed).requires_grad_(True)
        cwd_loss(t, s, 4.0).backward()
        numeric = central_diff(lambda z: cwd_loss(t, z, 4.0), s.detach().clone())
        assert_grad_close(s.grad, numeric)

    def test_teacher_loss_paths(self, seed):
        label = rand_label(3, 3, 2, seed=seed)
        o1 = rand_logits(2, 3, 3, seed=seed).requires_grad_(True)
        o2 = rand_logits(2, 3, 3, seed=seed + 50).requires_grad_(True)
        teacher_loss(o1, o2, label)[0].backward()
        n1 = central_diff(lambda z: teacher_loss(z, o2.detach(), label)[0], o1.detach().clone())
        n2 = central_diff(lambda z: teacher_loss(o1.detach(), z, label)[0], o2.detach().clone())
        assert_grad_close(o1.grad, n1)
        assert_grad_close(o2.grad, n2)

    def test_student_loss(self, seed):
        label = rand_label(3, 3, 2, seed=seed)
        t = rand_logits(2, 3, 3, seed=seed + 5)
        s = rand_logits(2, 3, 3, seed=seed).requires_grad_(True)
        student_loss(s, t, label)[0].backward()
        numeric = central_diff(lambda z: student_loss(z, t, label)[0], s.detach().clone())
        assert_grad_close(s.grad, numeric)
