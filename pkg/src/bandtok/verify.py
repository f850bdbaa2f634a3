"""Invariant suite behind ``bandtok verify``.

Each check returns a :class:`Check` with the measured quantity and the
tolerance it was held to.  ``run_suite`` accepts a fault name so the report
can be shown to catch a broken implementation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import haar as haar_mod
from . import rng as rng_mod
from .analysis import nmi
from .codec import latent_frame_rate
from .errors import InvalidInputError
from .lm import ConditioningPrefix, MicroLm, MicroLmConfig, cfg_mix
from .losses import CriticConfig, MultiScaleCritic, composite_loss, critic_forward
from .rope import RopeConfig, apply_rotation, relative_score, rope_angles
from .tokens import (TokenGrid, assign_positions, btok_bytes, build_sequence, flatten_band_first,
                     parse_btok, unflatten)
from .vq import Codebook, ema_update, nearest_codes, quantize, residual_energies, residual_quantize

FAULTS = ("haar-norm",)


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: str
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag} {self.name:<28} measured={self.measured:.3e}  tol {self.tolerance}  [{self.seconds:.2f}s]{extra}"


@dataclass
class Report:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} properties passed")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {"passed": self.passed,
                "checks": [dict(name=c.name, passed=c.passed, measured=c.measured,
                                tolerance=c.tolerance, seconds=c.seconds, detail=c.detail)
                           for c in self.checks]}


# ---------------------------------------------------------------------------
# Haar


def _faulty_haar(scale: float = 1.01):
    """Forward/inverse pair with the normalisation off by ``scale``.

    The pair still inverts exactly, so only energy conservation notices.
    """
    def fwd(m):
        p = haar_mod.haar_forward(m)
        return haar_mod.PatchedSpectrogram(p.subbands * scale, p.original_shape)

    def inv(p):
        return haar_mod.haar_inverse(haar_mod.PatchedSpectrogram(p.subbands / scale, p.original_shape))
    return fwd, inv


def _haar_cases(seed: int, n: int, max_side: int = 64):
    gen = rng_mod.derive(seed, "verify.haar")
    for _ in range(n):
        t, f = 2 * gen.integers(1, max_side // 2 + 1, size=2)
        yield gen.standard_normal((t, f))


def check_haar_roundtrip(seed=0, n=1000, fwd=haar_mod.haar_forward, inv=haar_mod.haar_inverse) -> Check:
    worst = 0.0
    for m in _haar_cases(seed, n):
        worst = max(worst, float(np.max(np.abs(inv(fwd(m)) - m))))
    return Check("haar-roundtrip", worst < 1e-12, worst, "< 1e-12", detail=f"{n} matrices")


def check_haar_energy(seed=0, n=1000, fwd=haar_mod.haar_forward) -> Check:
    worst = 0.0
    for m in _haar_cases(seed, n):
        e = np.sum(m ** 2)
        worst = max(worst, abs(float(np.sum(fwd(m).subbands ** 2)) - e) / e)
    return Check("haar-energy-conservation", worst < 1e-10, worst, "< 1e-10 relative", detail=f"{n} matrices")


# ---------------------------------------------------------------------------
# Geometry, VQ, EMA, residual


def check_latent_geometry() -> Check:
    rate = latent_frame_rate()
    ok = f"{rate:.2f}" == "10.77" and 128 // 8 == 16
    return Check("latent-geometry", ok, rate, "rate prints as 10.77 Hz, F'=16")


def brute_force_nearest(vectors, codes) -> np.ndarray:
    """Exhaustive scan: walk the codes in order, keep a running best per cell.

    A strict ``<`` keeps the lowest index on ties.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    best = np.zeros(len(vectors), dtype=np.int64)
    best_d = np.full(len(vectors), np.inf)
    for k in range(len(codes)):
        d = np.zeros(len(vectors))
        for c in range(vectors.shape[1]):
            d += (vectors[:, c] - codes[k, c]) ** 2
        better = d < best_d
        best[better] = k
        best_d[better] = d[better]
    return best


def check_vq_oracle(seed=0, n=10_000, K=64, C=8) -> Check:
    gen = rng_mod.derive(seed, "verify.vq")
    codes = gen.standard_normal((K, C))
    cells = gen.standard_normal((n, C))
    # a few exact ties: cells sitting on duplicated codes
    codes[K - 1] = codes[3]
    cells[:10] = codes[3]
    agree = float(np.mean(nearest_codes(cells, codes) == brute_force_nearest(cells, codes)))
    return Check("vq-oracle", agree == 1.0, agree, "== 1.0 agreement", detail=f"{n} cells, K={K}, C={C}")


def ema_fixed_point_run(seed=0, K=16, C=4, steps=500, decay=0.99, eps=1e-5, per_code=8):
    """Stationary assignments; returns (deviation per step, smoothed target means)."""
    gen = rng_mod.derive(seed, "verify.ema")
    counts = np.full(K, per_code)
    z = gen.standard_normal((K * per_code, C))
    idx = np.repeat(np.arange(K), per_code)
    cb = Codebook(0.1 * gen.standard_normal((K, C)), counts.astype(np.float64),
                  np.zeros((K, C)), decay, eps)
    smoothed = cb.smoothed_cluster_size()
    cb.ema_embed_sum = cb.codes * smoothed[:, None]
    # counts are stationary, so the smoothed size stays put and the target is fixed
    target = np.stack([z[idx == k].sum(0) for k in range(K)]) / smoothed[:, None]
    dev = []
    for _ in range(steps):
        ema_update(cb, z.T, idx)
        dev.append(float(np.max(np.abs(cb.codes - target))))
    return np.array(dev), cb, target


def check_ema_fixed_point(seed=0) -> Check:
    dev, _, _ = ema_fixed_point_run(seed)
    ratio = float((dev[400] / dev[100]) ** (1 / 300))
    ok = dev[-1] < 1e-2 and 0.985 <= ratio <= 0.995
    return Check("ema-fixed-point", ok, float(dev[-1]), "< 1e-2 after 500 updates",
                 detail=f"decay ratio {ratio:.5f} in [0.985, 0.995]")


def check_residual_monotone(seed=0, n=1000, depth=6, K=16, D=16) -> Check:
    gen = rng_mod.derive(seed, "verify.residual")
    books = [Codebook.init(K, D, seed=seed + l, scale=1.0 / (l + 1), pinned_zero=True) for l in range(depth)]
    z = gen.standard_normal((D, n))
    results = residual_quantize(z, books)
    violations = 0
    residual = z.copy()
    prev = np.sum(residual ** 2, axis=0)
    for r in results:
        residual = residual - r.quantized
        cur = np.sum(residual ** 2, axis=0)
        violations += int(np.sum(cur > prev))
        prev = cur
    energies = residual_energies(z, results)
    violations += int(np.sum(np.diff(energies) > 0))
    return Check("residual-monotonicity", violations == 0, float(violations), "== 0 violations",
                 detail=f"{n} inputs, depth {depth}")


# ---------------------------------------------------------------------------
# RoPE and positions


def check_rope_relative(seed=0, n=1000) -> Check:
    gen = rng_mod.derive(seed, "verify.rope")
    worst = 0.0
    for _ in range(n):
        hd = int(2 * gen.integers(3, 33))
        cfg = RopeConfig(hd)
        q, k = gen.standard_normal(hd), gen.standard_normal(hd)
        pq, pk, d = (gen.integers(0, 512, size=3) for _ in range(3))
        a = relative_score(q, k, pq + d, pk + d, cfg)
        b = relative_score(q, k, pq, pk, cfg)
        worst = max(worst, abs(a - b))
    return Check("rope-relative-invariance", worst < 1e-10, worst, "< 1e-10", detail=f"{n} trials")


def reference_rope_1d(x, pos, base=10000.0):
    """Textbook 1D rotary embedding on consecutive pairs."""
    x = np.asarray(x, dtype=np.float64)
    hd = x.shape[-1]
    inv = base ** (-2.0 * np.arange(hd // 2) / hd)
    ang = np.asarray(pos, dtype=np.float64)[:, None] * inv
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * c - x[..., 1::2] * s
    out[..., 1::2] = x[..., 0::2] * s + x[..., 1::2] * c
    return out


def check_rope_1d(seed=0) -> Check:
    gen = rng_mod.derive(seed, "verify.rope1d")
    mism = 0
    for hd in (2, 8, 16, 64):
        x = gen.standard_normal((40, hd))
        pos = np.stack([np.arange(40), gen.integers(0, 9, 40), gen.integers(0, 9, 40)], axis=1)
        ang = rope_angles(pos, RopeConfig.one_d(hd))
        got = apply_rotation(x, np.cos(ang), np.sin(ang))
        mism += int(np.sum(got != reference_rope_1d(x, pos[:, 0])))
    return Check("rope-1d-degeneration", mism == 0, float(mism), "bitwise equal to 1D reference")


def check_positions() -> Check:
    p = assign_positions(2, 2, 3)
    ok = p.time.tolist() == [0, 1, 2, 2, 2, 3, 3, 3] and p.band.tolist() == [0, 0, 1, 2, 3, 1, 2, 3]
    return Check("position-assignment", ok, 0.0 if ok else 1.0, "exact pattern")


# ---------------------------------------------------------------------------
# Gradients


def fd_relative_errors(loss_fn: Callable[[], torch.Tensor], params: dict, step: float = 1e-5,
                       max_entries: int | None = None, seed: int = 0, floor: float = 1e-8) -> dict:
    """Central-difference check of ``loss_fn`` against autograd.

    Returns ``{name: ||g_fd - g_auto|| / max(||g_fd||, ||g_auto||, floor)}``
    over the checked entries of each tensor.  ``max_entries`` subsamples
    large tensors.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    auto = {k: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
    gen = rng_mod.derive(seed, "verify.fd")
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            entries = np.arange(flat.numel())
            if max_entries is not None and len(entries) > max_entries:
                entries = np.sort(gen.choice(entries, size=max_entries, replace=False))
            fd = np.empty(len(entries))
            for j, e in enumerate(entries):
                orig = flat[e].item()
                flat[e] = orig + step
                up = loss_fn().item()
                flat[e] = orig - step
                down = loss_fn().item()
                flat[e] = orig
                fd[j] = (up - down) / (2 * step)
            an = auto[name].view(-1).numpy()[entries]
            denom = max(np.linalg.norm(fd), np.linalg.norm(an), floor)
            out[name] = float(np.linalg.norm(fd - an) / denom)
    return out


def tiny_lm_problem(seed=0, d=16, layers=2, K=12, B=3, frames=2, rows=2):
    cfg = MicroLmConfig(n_audio=K, d_model=d, n_layers=layers, n_heads=2, d_ff=32, seed=seed, init_scale=0.3)
    model = MicroLm(cfg)
    gen = rng_mod.derive(seed, "verify.lm.problem")
    prefix = ConditioningPrefix(gen.standard_normal((rows, d)), 3.0, 40.0)
    seq = build_sequence(model.prefix_len(prefix), gen.integers(0, K, frames * B), B, cfg.vocab)
    tokens = torch.as_tensor(seq.tokens)

    def loss():
        logits = model(seq, prefix)
        logp = logits[seq.prefix_len:-1].log_softmax(-1)
        return -logp.gather(-1, tokens[seq.prefix_len + 1:, None]).mean()
    return model, loss


def tiny_composite_problem(seed=0, T=16, F=16):
    gen = rng_mod.derive(seed, "verify.loss.problem")
    critic = MultiScaleCritic(CriticConfig(channels=[4, 4, 1], scales=[1.0, 0.5], seed=seed))
    x = torch.as_tensor(gen.standard_normal((2, T, F)))
    x_hat = torch.nn.Parameter(torch.as_tensor(gen.standard_normal((2, T, F))))
    z = torch.nn.Parameter(torch.as_tensor(gen.standard_normal((4, 3))))
    q = torch.as_tensor(gen.standard_normal((4, 3)))

    def loss():
        commit = ((z - q) ** 2).mean()
        total, _ = composite_loss(x, x_hat, commit, critic_forward(x, critic), critic_forward(x_hat, critic),
                                  detach_real=False)
        return total
    params = {"x_hat": x_hat, "z": z}
    params.update({f"critic.{k}": v for k, v in critic.named_parameters()})
    return params, loss


def check_grad_lm(seed=0, max_entries=None) -> Check:
    model, loss = tiny_lm_problem(seed)
    errs = fd_relative_errors(loss, dict(model.named_parameters()), max_entries=max_entries, seed=seed)
    worst_name = max(errs, key=errs.get)
    return Check("gradient-micro-lm", errs[worst_name] < 1e-4, errs[worst_name], "< 1e-4 per tensor",
                 detail=f"{len(errs)} tensors, worst {worst_name}")


def check_grad_composite(seed=0, max_entries=None) -> Check:
    params, loss = tiny_composite_problem(seed)
    errs = fd_relative_errors(loss, params, max_entries=max_entries, seed=seed)
    worst_name = max(errs, key=errs.get)
    return Check("gradient-composite-loss", errs[worst_name] < 1e-4, errs[worst_name], "< 1e-4 per tensor",
                 detail=f"{len(errs)} tensors, worst {worst_name}")


# ---------------------------------------------------------------------------
# CFG, tokens, NMI


def check_cfg_identities(seed=0, n=10_000, V=32) -> Check:
    gen = rng_mod.derive(seed, "verify.cfg")
    c = gen.standard_normal((n, V)) * 4
    u = gen.standard_normal((n, V)) * 4
    exact1 = np.array_equal(cfg_mix(c, u, 1.0), c)
    exact0 = np.array_equal(cfg_mix(c, u, 0.0), u)
    agree = float(np.mean(np.argmax(cfg_mix(c, u, 1.0), 1) == np.argmax(c, 1)))
    ok = exact1 and exact0 and agree == 1.0
    return Check("cfg-identities", ok, agree, "w=1 -> cond, w=0 -> uncond exactly; argmax 100%",
                 detail=f"w1 exact={exact1} w0 exact={exact0}")


def check_flatten_bijection(seed=0, n=1000) -> Check:
    gen = rng_mod.derive(seed, "verify.flatten")
    bad = 0
    for _ in range(n):
        T, B = gen.integers(1, 20), gen.integers(1, 20)
        K = int(gen.integers(1, 9000))
        g = TokenGrid(gen.integers(0, K, size=(T, B)), K)
        s = flatten_band_first(g)
        back = unflatten(s, B, K)
        if not np.array_equal(back.indices, g.indices) or not np.array_equal(flatten_band_first(back), s):
            bad += 1
        if btok_bytes(parse_btok(btok_bytes(g))) != btok_bytes(g):
            bad += 1
    return Check("flatten-bijection", bad == 0, float(bad), "== 0 mismatches", detail=f"{n} grids")


def check_nmi_properties(seed=0, N=100_000) -> Check:
    gen = rng_mod.derive(seed, "verify.nmi")
    a = gen.integers(0, 16, N)
    b = gen.integers(0, 16, N)
    m = nmi(np.stack([a, a, b, (a * 7 + 3) % 16], axis=1)).values
    ok = (m[0, 1] == 1.0 and m[0, 3] == 1.0 and m[0, 2] < 0.01 and np.array_equal(m, m.T)
          and m.min() >= -1e-9 and m.max() <= 1 + 1e-9)
    return Check("nmi-properties", bool(ok), float(m[0, 2]), "identical = 1 exactly, independent < 0.01")


# ---------------------------------------------------------------------------


def run_suite(seed: int = 0, fault: str | None = None, quick: bool = False) -> Report:
    """Run every check.  ``quick`` subsamples the finite-difference checks."""
    if fault is not None and fault not in FAULTS:
        raise InvalidInputError(f"unknown fault {fault!r}; choose from {FAULTS}")
    fwd, inv = (_faulty_haar() if fault == "haar-norm" else (haar_mod.haar_forward, haar_mod.haar_inverse))
    fd_entries = 24 if quick else None
    plan = [
        lambda: check_haar_roundtrip(seed, fwd=fwd, inv=inv),
        lambda: check_haar_energy(seed, fwd=fwd),
        check_latent_geometry,
        lambda: check_vq_oracle(seed),
        lambda: check_ema_fixed_point(seed),
        lambda: check_residual_monotone(seed),
        lambda: check_rope_relative(seed),
        lambda: check_rope_1d(seed),
        check_positions,
        lambda: check_grad_lm(seed, fd_entries),
        lambda: check_grad_composite(seed, fd_entries),
        lambda: check_cfg_identities(seed),
        lambda: check_flatten_bijection(seed),
        lambda: check_nmi_properties(seed),
    ]
    report = Report()
    for fn in plan:
        t0 = time.perf_counter()
        c = fn()
        c.seconds = time.perf_counter() - t0
        report.checks.append(c)
    return report
