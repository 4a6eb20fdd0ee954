"""Losses, coding rate and TTR schedule against independent oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semantoks.objective import (
    ObjectiveConfig,
    cls_loss,
    coding_rate,
    coding_rate_from_cov,
    gamma,
    network_summaries,
    token_loss,
    total_loss,
    ttr_loss,
    ttr_weight,
)

T = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float64)


# -----------------------------------------------------------------------
# Scalar-loop oracles (plain python floats, no numpy/torch linear algebra)
# -----------------------------------------------------------------------


def _cov(rows):
    b, d = len(rows), len(rows[0])
    mean = [sum(r[j] for r in rows) / b for j in range(d)]
    return [[sum((r[i] - mean[i]) * (r[j] - mean[j]) for r in rows) / b for j in range(d)] for i in range(d)]


def _half_logdet(m):
    n = len(m)
    l = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            s = m[i][j] - sum(l[i][k] * l[j][k] for k in range(j))
            l[i][j] = math.sqrt(s) if i == j else s / l[j][j]
    return sum(math.log(l[i][i]) for i in range(n))


def _rate(rows, eps=0.05):
    d = len(rows[0])
    c = _cov(rows)
    return _half_logdet([[(i == j) + d / eps * c[i][j] for j in range(d)] for i in range(d)])


def _d(u, v):
    return sum((a - b) ** 2 for a, b in zip(u, v))


def _oracle_cls(s1, s2, t1, t2, g, eps=0.05):
    b = len(s1)
    dist = sum(_d(s1[i], t2[i]) + _d(s2[i], t1[i]) for i in range(b)) / b
    return dist - g * 0.5 * (_rate(s1, eps) + _rate(s2, eps))


def _oracle_ttr(s1, s2, t1, t2, g, eps=0.05):
    b, n = len(s1), len(s1[0])
    dist = sum(_d(s1[i][k], t2[i][k]) + _d(s2[i][k], t1[i][k]) for i in range(b) for k in range(n)) / b
    rate = sum(0.5 * (_rate([s1[i][k] for i in range(b)], eps) + _rate([s2[i][k] for i in range(b)], eps))
               for k in range(n))
    return dist - g * rate


def _unit(rng, *shape):
    z = rng.standard_normal(shape)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def _eig_rate(sigma, eps=0.05, d=None):
    d = sigma.shape[-1] if d is None else d
    lam = np.linalg.eigvalsh(sigma)
    return 0.5 * np.sum(np.log1p(d / eps * np.clip(lam, 0, None)))


# -----------------------------------------------------------------------


class TestCodingRate:
    def test_identical_rows(self):
        z = T(np.tile(np.random.default_rng(0).standard_normal(4), (8, 1)))
        assert abs(coding_rate(z).item()) < 1e-12

    def test_zero_cov_exact(self):
        for d in (1, 4, 16):
            assert coding_rate_from_cov(torch.zeros(d, d, dtype=torch.float64)).item() == 0.0

    def test_identity_closed_form(self):
        r = coding_rate_from_cov(torch.eye(2, dtype=torch.float64), eps=0.05)
        assert abs(r.item() - math.log(41)) < 1e-12
        assert abs(r.item() - 3.7136) < 1e-4

    def test_random_batch_vs_eig(self):
        z = np.random.default_rng(1).standard_normal((8, 4))
        zc = z - z.mean(0)
        ref = _eig_rate(zc.T @ zc / 8)
        assert abs(coding_rate(T(z)).item() - ref) < 1e-8

    def test_gram_forms_agree(self):
        """B < D uses the B x B Gram; compare with the D x D form on the same data."""
        z = np.random.default_rng(2).standard_normal((5, 12))
        zc = z - z.mean(0)
        assert abs(coding_rate(T(z)).item() - _eig_rate(zc.T @ zc / 5)) < 1e-8

    def test_scalar_oracle(self):
        z = np.random.default_rng(3).standard_normal((6, 3))
        assert abs(coding_rate(T(z)).item() - _rate(z.tolist())) < 1e-10

    def test_batched(self):
        z = np.random.default_rng(4).standard_normal((3, 8, 4))
        out = coding_rate(T(z))
        for k in range(3):
            assert abs(out[k].item() - coding_rate(T(z[k])).item()) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.integers(0, 2**31))
    def test_monotone_rank_one(self, d, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d, d))
        sigma = a @ a.T / d
        u = rng.standard_normal(d)
        r0 = coding_rate_from_cov(T(sigma)).item()
        r1 = coding_rate_from_cov(T(sigma + np.outer(u, u))).item()
        assert r1 >= r0 - 1e-12

    def test_needs_batch(self):
        with pytest.raises(ValueError):
            coding_rate(T(np.ones((1, 4))))
        with pytest.raises(FloatingPointError):
            coding_rate(T([[1.0, np.nan], [0.0, 1.0]]))

    def test_gradient(self):
        z = T(np.random.default_rng(5).standard_normal((8, 4))).requires_grad_()
        coding_rate(z).backward()
        fd = np.zeros((8, 4))
        h = 1e-6
        base = z.detach().numpy()
        for i in range(8):
            for j in range(4):
                p, m = base.copy(), base.copy()
                p[i, j] += h
                m[i, j] -= h
                fd[i, j] = (coding_rate(T(p)).item() - coding_rate(T(m)).item()) / (2 * h)
        g = z.grad.numpy()
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


class TestGamma:
    def test_values(self):
        assert gamma(128, 512) == 0.009765625
        assert gamma(128, 128) == 0.015625
        assert gamma(1, 1) == 2


class TestCLS:
    def test_identical_collapsed(self):
        z = T(np.tile([[0.6, 0.8]], (4, 1)))
        assert cls_loss(z, z, z, z, 0.5).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pairs(self):
        s = T([[1.0, 0.0]] * 2)
        t = T([[0.0, 1.0]] * 2)
        _, dist, _ = cls_loss(s, s, t, t, 0.0, return_parts=True)
        assert dist.item() == pytest.approx(4.0)
        for u, v in zip(s, t):
            assert ((u - v) ** 2).sum().item() == pytest.approx(2 - 2 * (u @ v).item())

    def test_scalar_oracle(self):
        rng = np.random.default_rng(6)
        s1, s2, t1, t2 = (_unit(rng, 4, 3) for _ in range(4))
        g = gamma(3, 4)
        got = cls_loss(T(s1), T(s2), T(t1), T(t2), g).item()
        assert abs(got - _oracle_cls(s1.tolist(), s2.tolist(), t1.tolist(), t2.tolist(), g)) < 1e-10

    def test_stop_gradient(self):
        rng = np.random.default_rng(7)
        s1, s2, t1, t2 = (T(_unit(rng, 4, 3)).requires_grad_() for _ in range(4))
        cls_loss(s1, s2, t1, t2, 0.3).backward()
        assert t1.grad is None and t2.grad is None
        assert s1.grad is not None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cls_loss(T(np.ones((4, 3))), T(np.ones((3, 3))), T(np.ones((4, 3))), T(np.ones((4, 3))), 0.1)

    def test_gradient_float32(self):
        rng = np.random.default_rng(8)
        s1, s2, t1, t2 = (torch.as_tensor(_unit(rng, 4, 3), dtype=torch.float32) for _ in range(4))
        s1.requires_grad_()
        cls_loss(s1, s2, t1, t2, 0.3).backward()
        g64 = T(s1.detach().numpy()).requires_grad_()
        cls_loss(g64, T(s2.numpy()), T(t1.numpy()), T(t2.numpy()), 0.3).backward()
        fd = np.zeros((4, 3))
        h = 1e-6
        for i in range(4):
            for j in range(3):
                p, m = g64.detach().clone(), g64.detach().clone()
                p[i, j] += h
                m[i, j] -= h
                args = (T(s2.numpy()), T(t1.numpy()), T(t2.numpy()), 0.3)
                fd[i, j] = (cls_loss(p, *args).item() - cls_loss(m, *args).item()) / (2 * h)
        assert np.linalg.norm(s1.grad.numpy() - fd) / np.linalg.norm(fd) < 1e-3


class TestToken:
    def _grid(self, rng, b=2, n=3, p=4, d=5):
        return T(_unit(rng, b, n, p, d))

    def test_equal_zero(self):
        z = self._grid(np.random.default_rng(0))
        m = torch.ones(2, 3, 4, dtype=torch.bool)
        assert token_loss([z, z], [z, z], [m, m]).item() == 0.0

    def test_unit_displacement(self):
        zs = torch.zeros(1, 2, 2, 3, dtype=torch.float64)
        zt = zs.clone()
        zs[0, 1, 0, 0] = 1.0
        m = torch.zeros(1, 2, 2, dtype=torch.bool)
        m[0, 1, 0] = True
        assert token_loss([zs], [zt], [m]).item() == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_unmasked_invariance(self, seed):
        rng = np.random.default_rng(seed)
        zs, zt = self._grid(rng), self._grid(rng)
        m = torch.as_tensor(rng.random((2, 3, 4)) < 0.5)
        m[:, 0, 0] = True
        ref = token_loss([zs], [zt], [m]).item()
        noise = T(rng.standard_normal(zs.shape)) * (~m)[..., None]
        assert token_loss([zs + noise], [zt - noise], [m]).item() == pytest.approx(ref, abs=1e-12)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(9)
        zs = [self._grid(rng) for _ in range(2)]
        zt = [self._grid(rng) for _ in range(2)]
        ms = [torch.as_tensor(rng.random((2, 3, 4)) < 0.6) for _ in range(2)]
        for m in ms:
            m[:, 0, 0] = True
        ref = 0.0
        for v in range(2):
            for i in range(2):
                cells = [(n, p) for n in range(3) for p in range(4) if ms[v][i, n, p]]
                ref += sum(_d(zs[v][i, n, p].tolist(), zt[v][i, n, p].tolist()) for n, p in cells) / len(cells)
        assert abs(token_loss(zs, zt, ms).item() - ref / 4) < 1e-12
        raw = token_loss(zs, zt, ms, normalize=False).item()
        assert raw > token_loss(zs, zt, ms).item()

    def test_no_masked_tokens(self):
        z = torch.zeros(1, 2, 2, 3, dtype=torch.float64)
        with pytest.raises(ValueError):
            token_loss([z], [z], [torch.zeros(1, 2, 2, dtype=torch.bool)])

    def test_stop_gradient(self):
        rng = np.random.default_rng(10)
        zs, zt = self._grid(rng).requires_grad_(), self._grid(rng).requires_grad_()
        m = torch.ones(2, 3, 4, dtype=torch.bool)
        token_loss([zs], [zt], [m]).backward()
        assert zt.grad is None


class TestTTR:
    def test_collapsed_zero(self):
        z = T(np.tile([0.0, 1.0], (4, 3, 1)))
        assert ttr_loss(z, z, z, z, 0.5).item() == pytest.approx(0.0, abs=1e-12)

    def test_single_patch_summary(self):
        g = torch.randn(2, 3, 1, 4)
        assert torch.equal(network_summaries(g), g[:, :, 0])
        with pytest.raises(ValueError):
            network_summaries(torch.zeros(2, 3, 0, 4))

    def test_scalar_oracle(self):
        rng = np.random.default_rng(11)
        s1, s2, t1, t2 = (_unit(rng, 5, 2, 3) for _ in range(4))
        g = gamma(3, 5)
        got = ttr_loss(T(s1), T(s2), T(t1), T(t2), g).item()
        assert abs(got - _oracle_ttr(s1.tolist(), s2.tolist(), t1.tolist(), t2.tolist(), g)) < 1e-10


class TestTTRWeight:
    cfg = ObjectiveConfig()

    def test_values(self):
        assert ttr_weight(0, 1000, self.cfg) == 0.5
        assert ttr_weight(50, 1000, self.cfg) == 0.0
        assert ttr_weight(25, 1000, self.cfg) == pytest.approx(0.25, abs=1e-15)
        assert ttr_weight(999, 1000, self.cfg) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(40, 5000))
    def test_continuous_monotone(self, total):
        w = np.array([ttr_weight(s, total, self.cfg) for s in range(total + 1)])
        assert np.all(np.diff(w) <= 1e-15)
        steps_in_decay = 0.05 * total
        assert np.max(np.abs(np.diff(w))) < 2 * 0.5 / steps_in_decay
        assert np.all(w[np.arange(total + 1) >= steps_in_decay] == 0)

    def test_constant_option(self):
        cfg = ObjectiveConfig(ttr_schedule="constant")
        assert ttr_weight(900, 1000, cfg) == 0.5


class TestTotal:
    cfg = ObjectiveConfig()
    z = torch.zeros((), dtype=torch.float64)

    def test_zero(self):
        assert total_loss(self.z, self.z, self.z, 0, 100, self.cfg).total.item() == 0.0

    def test_past_decay_ignores_ttr(self):
        a = total_loss(T(1.0), T(2.0), T(5.0), 10, 100, self.cfg).total.item()
        b = total_loss(T(1.0), T(2.0), T(-7.0), 10, 100, self.cfg).total.item()
        assert a == b == 2.0

    def test_arithmetic(self):
        for step in (0, 1, 2, 3, 4, 5, 60):
            w = ttr_weight(step, 100, self.cfg)
            out = total_loss(T(0.3), T(1.7), T(-2.2), step, 100, self.cfg)
            assert out.total.item() == pytest.approx(0.3 + 0.5 * 1.7 + w * -2.2, abs=1e-15)
            assert out.ttr_weight_used == w

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            total_loss(T(np.nan), self.z, self.z, 0, 100, self.cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(eps=0)
        with pytest.raises(ValueError):
            ObjectiveConfig(ttr_decay_fraction=0)
