"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Criteria 6, 8 and 10 share one desk-scale fixture (a 5,000-clip corpus and
six generator runs); the whole module takes roughly an hour on one CPU core.
"""
from __future__ import annotations

import copy
import math
import time

import numpy as np
import pytest
import torch

from acceptance_report import record
from conftest import tiny_config
from oracles import autograd_grad, brute_force_table, fd_grad, random_prob_rows, rel_err, select_from_table

from mogic import numerics as nx
from mogic.autoencoder import train_autoencoder
from mogic.checkpoint import load_checkpoint, read_checkpoint, restore_optimizer, save_checkpoint
from mogic.cmt import ExpertConfig, ada_modulate, dynamic_topk, renormalize_topk
from mogic.config import EvalConfig, SampleConfig, desk_config
from mogic.eval.evaluator import train_evaluator, write_report
from mogic.eval.metrics import GaussianStats, fid
from mogic.heads import (
    LINEAR,
    IntentionHead,
    IPHConfig,
    MGHConfig,
    MotionGenerationHead,
    interpolate,
    ode_euler_sample,
    sde_euler_maruyama_sample,
)
from mogic.model import MoGIC, build_items
from mogic.motion_repr import MotionSequence, extract_features, facing_yaw, reconstruct_positions
from mogic.numerics import WarmupAdam
from mogic.pipeline import build_model, evaluate_generator, intent_metrics, load_splits, train_generator
from mogic.synthdata import CorpusRecord, build_corpus, generate_sample
from mogic.training import (
    GenerationInputs,
    build_inbetween_mask,
    compute_losses,
    generate,
    generate_from_items,
    make_batch,
    trainable_parameters,
)

ACCEPT_SEEDS = (0, 1, 2)
ACCEPT_EPOCHS = 20
ACCEPT_DIFFUSION_MULT = 2
EVAL_EPOCHS = 15


def _verdict(criterion: int, passed: bool, detail: str) -> None:
    record(criterion, passed, detail)
    assert passed, detail


def _open_gates(module: torch.nn.Module, seed: int, scale: float = 0.1) -> None:
    """Replace all-zero parameters (zero-initialised gates/outputs) by small noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad and not bool(p.any()):
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * scale)


def _rotate_y(frames: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return frames @ np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]).T


# -- criterion 1: gradient integrity ------------------------------------------------

def _op_cases(rng: np.random.Generator):
    """Yield ``(name, f, x)`` with ``f`` a scalar function of one float tensor."""

    def rand(*shape, lo=-2.0, hi=2.0):
        return torch.as_tensor(rng.uniform(lo, hi, size=shape))

    def away_from(x: torch.Tensor, kinks: float, margin: float = 0.01) -> torch.Tensor:
        # push entries off a kink so the central difference never straddles it
        d = x - kinks
        bump = torch.where(d >= 0, torch.full_like(x, margin), torch.full_like(x, -margin))
        return torch.where(d.abs() < margin, kinks + bump, x)

    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    a, b = rand(m, k), rand(k, n)
    w = rand(m, n)
    yield "matmul[a]", lambda x: (nx.matmul(x, b.to(x.dtype)) * w.to(x.dtype)).sum(), a
    yield "matmul[b]", lambda x: (nx.matmul(a.to(x.dtype), x) * w.to(x.dtype)).sum(), b

    shape = tuple(int(v) for v in rng.integers(2, 6, size=2))
    wt = rand(*shape)
    yield "softmax", lambda x: (nx.softmax(x) * wt.to(x.dtype)).sum(), rand(*shape)
    # with two entries the normalised output is +-1 and the gradient vanishes, so use >= 3
    ln_shape = (shape[0], shape[1] + 1)
    wl = rand(*ln_shape)
    yield "layer_norm", lambda x: (nx.layer_norm(x) * wl.to(x.dtype)).sum(), rand(*ln_shape)
    for kind in ("gelu", "silu", "relu"):
        x = rand(*shape)
        if kind == "relu":
            x = away_from(x, 0.0)
        yield f"activation[{kind}]", (lambda kk: lambda x: (nx.activation(x, kk) * wt.to(x.dtype)).sum())(kind), x

    target = rand(*shape)
    beta = float(rng.uniform(0.3, 1.5))
    pred = target + away_from(away_from(rand(*shape), beta), -beta)
    yield "smooth_l1", lambda x: nx.smooth_l1(x, target.to(x.dtype), beta), pred

    vocab = int(rng.integers(2, 8))
    tgt = torch.as_tensor(rng.integers(0, vocab, size=shape[0]))
    yield "cross_entropy_logits", lambda x: nx.cross_entropy_logits(x, tgt), rand(shape[0], vocab)

    # differentiable part of the sparse attention: renormalisation on a fixed selection
    probs = torch.softmax(rand(*shape), -1)
    sel = torch.as_tensor(rng.random(shape) < 0.6)
    sel[..., :2] = True
    yield "renormalize_topk", lambda x: (renormalize_topk(x, sel) * wt.to(x.dtype)).sum(), probs

    # gated residual modulation, w.r.t. the token states and the gate
    d = int(rng.integers(3, 7))
    z0, al, be, ga = rand(1, 3, d), rand(1, d), rand(1, d), rand(1, d)
    wz = rand(1, 3, d)
    yield "ada_modulate[z]", lambda x: (
        ada_modulate(x, (al.to(x.dtype), be.to(x.dtype), ga.to(x.dtype)), torch.tanh) * wz.to(x.dtype)
    ).sum(), z0
    yield "ada_modulate[gamma]", lambda x: (
        ada_modulate(z0.to(x.dtype), (al.to(x.dtype), be.to(x.dtype), x), torch.tanh) * wz.to(x.dtype)
    ).sum(), ga


_HEADS: dict[str, torch.nn.Module] = {}


def _head_cases(rng: np.random.Generator, i: int):
    if not _HEADS:
        torch.manual_seed(0)
        mgh = MotionGenerationHead(MGHConfig(depth=2, width=16, time_dim=8), 4, 8)
        iph = IntentionHead(IPHConfig(layers=1, width=16, heads=2), 8)
        _open_gates(mgh, 1)
        _open_gates(iph, 2)
        _HEADS.update(mgh=mgh, iph=iph, mgh64=copy.deepcopy(mgh).double(), iph64=copy.deepcopy(iph).double())
    mgh, iph, mgh64, iph64 = (_HEADS[k] for k in ("mgh", "iph", "mgh64", "iph64"))

    def pick(x, a, b):
        return a if x.dtype == torch.float32 else b

    n = int(rng.integers(1, 4))
    z_t, t, c = (torch.as_tensor(v) for v in (rng.normal(size=(n, 4)), rng.uniform(0.05, 0.95, size=n), rng.normal(size=(n, 8))))
    wv = torch.as_tensor(rng.normal(size=(n, 4)))
    yield "mgh[z_t]", lambda x: (pick(x, mgh, mgh64)(x, t.to(x.dtype), c.to(x.dtype)) * wv.to(x.dtype)).sum(), z_t
    yield "mgh[cond]", lambda x: (pick(x, mgh, mgh64)(z_t.to(x.dtype), t.to(x.dtype), x) * wv.to(x.dtype)).sum(), c

    L = int(rng.integers(1, 4))
    mem = torch.as_tensor(rng.normal(size=(1, L, 8)))
    tgt = torch.as_tensor(rng.integers(0, 1024, size=(1, int(rng.integers(1, 4)))))
    yield "iph_loss[memory]", lambda x: pick(x, iph, iph64).loss(x, None, tgt), mem


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst: dict[str, float] = {}
    for i in range(100):
        for name, f, x in list(_op_cases(rng)) + list(_head_cases(rng, i)):
            err = rel_err(autograd_grad(f, x), fd_grad(f, x))
            worst[name] = max(worst.get(name, 0.0), err)
    ops_ok = all(v < 1e-3 for v in worst.values())

    # whole-model loss: autograd vs FD on 20 random scalar parameters, float64
    recs = []
    for i in range(4):
        s = generate_sample(100 + i, duration_range=(1.5, 2.0))
        recs.append(CorpusRecord(f"s{i}", s.motion, s.caption, s.phase_split, s.vision, "train", tuple(p.kind for p in s.primitives)))
    cfg = tiny_config()
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(0)
        model = MoGIC(cfg).double()
        model.freeze_autoencoder()
        items = build_items(model, recs)
        _open_gates(model, 3)

        def loss() -> torch.Tensor:
            # batches (and their condition bundles) are rebuilt so every parameter is re-read
            g = torch.Generator().manual_seed(0)
            batches = [make_batch(model, items, task, np.random.default_rng(k), cfg.train) for k, task in enumerate(("vl2m", "ip"))]
            return sum(compute_losses(model, b, cfg.train, True, g).total for b in batches)

        params = trainable_parameters(model)
        model.zero_grad()
        loss().backward()
        candidates = [(p, j) for p in params if p.grad is not None for j in torch.nonzero(p.grad.view(-1)).flatten().tolist()]
        pr = np.random.default_rng(7)
        model_errs = []
        h = 1e-3
        with torch.no_grad():
            for ci in pr.choice(len(candidates), size=20, replace=False):
                p, j = candidates[int(ci)]
                flat = p.view(-1)
                orig = flat[j].item()
                flat[j] = orig + h
                fp = loss().item()
                flat[j] = orig - h
                fm = loss().item()
                flat[j] = orig
                fd = (fp - fm) / (2 * h)
                model_errs.append(abs(p.grad.view(-1)[j].item() - fd) / max(abs(fd), 1e-8))
    finally:
        torch.set_default_dtype(prev)
    elapsed = time.perf_counter() - start
    model_ok = max(model_errs) < 5e-3
    worst_op = max(worst, key=worst.get)
    _verdict(
        1,
        ops_ok and model_ok and elapsed < 120,
        f"{len(worst)} ops x 100 instances, worst {worst_op} rel err {worst[worst_op]:.2e} (< 1e-3); "
        f"full model 20 params worst {max(model_errs):.2e} (< 5e-3); {elapsed:.1f}s",
    )


# -- criterion 2: adaptive top-k oracle ---------------------------------------------

TOPK_GRID = [
    (k_min, k_max, tau)
    for k_min in (1, 2, 3)
    for k_max in (1, 3, 6, math.inf)
    for tau in (0.3, 0.5, 0.8, 0.95, 1.0)
    if k_max >= k_min
]


def test_criterion_2_topk_oracle_equivalence():
    assert (1, 6, 0.8) in TOPK_GRID and (1, math.inf, 1.0) in TOPK_GRID
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    rows = random_prob_rows(rng, 10_000, max_len=12)
    n = 12
    probs = torch.zeros(len(rows), n, dtype=torch.float64)
    valid = torch.zeros(len(rows), n, dtype=torch.bool)
    for i, r in enumerate(rows):
        probs[i, : len(r)] = torch.as_tensor(r)
        valid[i, : len(r)] = True
    tables = [brute_force_table(r) for r in rows]
    tol = 16 * np.finfo(np.float64).eps
    mismatches = 0
    worst_w = 0.0
    for k_min, k_max, tau in TOPK_GRID:
        k_dyn, selected, _ = dynamic_topk(probs, ExpertConfig(k_min, k_max, tau), valid)
        weights = renormalize_topk(probs, selected).numpy()
        sel_np, k_np = selected.numpy(), k_dyn.numpy()
        for i, (r, table) in enumerate(zip(rows, tables)):
            k, ref_set, _ = select_from_table(table, k_min, k_max, tau, tol)
            got = set(np.nonzero(sel_np[i])[0].tolist())
            if k != int(k_np[i]) or got != ref_set:
                mismatches += 1
                continue
            idx = sorted(ref_set)
            ref_w = np.zeros(n)
            ref_w[idx] = r[idx] / r[idx].sum()
            worst_w = max(worst_w, float(np.abs(weights[i] - ref_w).max()), abs(float(weights[i].sum()) - 1.0))
    elapsed = time.perf_counter() - start
    _verdict(
        2,
        mismatches == 0 and worst_w <= 1e-12 and elapsed < 30,
        f"{len(rows)} rows x {len(TOPK_GRID)} (k_min,k_max,tau) configs: {mismatches} selection mismatches, "
        f"max renormalised weight diff {worst_w:.1e}; {elapsed:.1f}s",
    )


# -- criterion 3: interpolant boundaries and samplers --------------------------------

def _gaussian_velocity(s: float):
    def v(z, t, cond=None):
        t = t[..., None].to(z.dtype)
        return (t - (1 - t) * s**2) / ((1 - t) ** 2 * s**2 + t**2) * z

    return v


def _loglog_slope(steps, errs) -> float:
    errs = np.maximum(np.asarray(errs, dtype=np.float64), np.finfo(np.float64).tiny)
    return float(np.polyfit(np.log(steps), np.log(errs), 1)[0])


def test_criterion_3_interpolant_and_samplers():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(64, 5, generator=g, dtype=torch.float64)
    eps = torch.randn(64, 5, generator=g, dtype=torch.float64)
    boundary = (
        LINEAR.alpha(0.0) == 1.0 and LINEAR.sigma(0.0) == 0.0 and LINEAR.alpha(1.0) == 0.0 and LINEAR.sigma(1.0) == 1.0
        and torch.equal(interpolate(z0, eps, 0.0), z0) and torch.equal(interpolate(z0, eps, 1.0), eps)
    )

    steps = np.array([5, 10, 20, 40, 80])
    c = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    z1 = torch.randn(256, 3, generator=g, dtype=torch.float64)
    field = lambda z, t, cond=None: (z - c) / t[..., None]  # noqa: E731
    pm_errs = [float(((ode_euler_sample(field, z1, int(n)) - c).norm(dim=-1) / (z1 - c).norm(dim=-1)).max()) for n in steps]
    pm_slope = _loglog_slope(steps, pm_errs)

    # supplementary: the same sampler on the Gaussian-data field, whose exact endpoint is s * z1
    s = 0.5
    zg = torch.randn(256, 2, generator=g, dtype=torch.float64)
    g_errs = [float((ode_euler_sample(_gaussian_velocity(s), zg, int(n)) - s * zg).norm()) for n in steps]
    g_slope = _loglog_slope(steps, g_errs)

    zs = torch.randn(10_000, 1, generator=g, dtype=torch.float64)
    out = sde_euler_maruyama_sample(_gaussian_velocity(s), zs, 100, generator=g)
    std_rel = abs(float(out.std()) - s) / s
    elapsed = time.perf_counter() - start
    slope_ok = -1.2 <= pm_slope <= -0.8
    _verdict(
        3,
        boundary and slope_ok and std_rel < 0.1 and elapsed < 120,
        f"boundaries exact={boundary}; point-mass Euler errors {['%.1e' % e for e in pm_errs]} slope {pm_slope:.2f} "
        f"(need -1+-0.2); Gaussian-field slope {g_slope:.2f}; SDE std rel err {std_rel:.3f}; {elapsed:.1f}s",
    )


# -- criterion 4: representation round-trip -----------------------------------------

def test_criterion_4_representation_roundtrip():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_rt, worst_yaw = 0.0, 0.0
    for seed in range(500):
        m = generate_sample(seed).motion
        f = extract_features(m)
        root0 = m.frames[0, 0]
        rec = reconstruct_positions(f, facing_yaw(m.frames[:1])[0], (root0[0], root0[2]))
        worst_rt = max(worst_rt, float(np.abs(rec.frames - m.frames[:-1]).max()))
        rot = extract_features(MotionSequence(m.fps, _rotate_y(m.frames, float(rng.uniform(-np.pi, np.pi)))))
        worst_yaw = max(worst_yaw, float(np.abs(rot - f).max()))
    elapsed = time.perf_counter() - start
    _verdict(
        4,
        worst_rt < 1e-4 and worst_yaw < 1e-5 and elapsed < 60,
        f"500 motions: max joint error {worst_rt:.2e} m (< 1e-4), yaw invariance {worst_yaw:.2e} (< 1e-5); {elapsed:.1f}s",
    )


# -- criterion 5: FID closed forms -------------------------------------------------

def _moment_matched(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """Samples whose empirical mean is 0 and (ddof=1) covariance is I to rounding."""
    x = rng.normal(size=(n, d))
    x -= x.mean(0)
    chol = np.linalg.cholesky(np.cov(x, rowvar=False))
    return np.linalg.solve(chol, x.T).T


def test_criterion_5_fid_closed_forms():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    n, d = 10_000, 16
    mu = rng.normal(size=d) * 0.7
    scale = 1.6
    a, b = _moment_matched(rng, n, d), _moment_matched(rng, n, d)

    def fid_of(x, y):
        return fid(GaussianStats.from_features(x), GaussianStats.from_features(y))

    mean_err = abs(fid_of(a + mu, b) - float(mu @ mu))
    var_err = abs(fid_of(scale * a, b) - d * (scale - 1) ** 2)
    raw_a, raw_b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    raw_err = abs(fid_of(raw_a + mu, raw_b) - float(mu @ mu))
    elapsed = time.perf_counter() - start
    _verdict(
        5,
        mean_err <= 1e-4 and var_err <= 1e-3 and elapsed < 30,
        f"n=10000 d=16 moment-matched: |FID-||mu||^2|={mean_err:.1e} (<= 1e-4), variance case {var_err:.1e} (<= 1e-3); "
        f"raw-sample mean case {raw_err:.1e} for reference; {elapsed:.1f}s",
    )


# -- criterion 7: in-betweening contract -------------------------------------------

def test_criterion_7_inbetween_contract(tiny_model, tiny_corpus):
    start = time.perf_counter()
    model, _ = tiny_model
    _open_gates(model.mgh, 5, scale=0.05)
    _, splits = tiny_corpus
    sample = SampleConfig(iters=4, euler_steps=4)
    clips = splits["train"].records[:4]
    checks, failures = 0, []
    for rec in clips:
        length = model.ae.latent_length(rec.motion.n_frames - 1)
        for mode in ("prefix", "suffix", "infix", "circumfix"):
            for frac in (0.25, 0.5, 0.75):
                spec = build_inbetween_mask(length, mode, frac)
                res = generate(model, "m2m", GenerationInputs(motion=rec.motion, text=rec.caption, mask=spec), sample, seed=checks)
                vis = torch.as_tensor(~spec.mask)
                checks += 1
                if not torch.equal(res.latents[vis], res.input_latents[vis]):
                    failures.append(f"{rec.id}/{mode}/{frac}")
    full_diffs = []
    for rec in clips:
        res = generate(model, "m2m", GenerationInputs(motion=rec.motion), sample)
        f = extract_features(rec.motion)
        rt = model.decode_latents(model.encode_features([f]), [len(f)])[0]
        full_diffs.append(float(np.abs(res.features - rt).max()))
    elapsed = time.perf_counter() - start
    _verdict(
        7,
        not failures and max(full_diffs) <= 1e-6 and elapsed < 300,
        f"{checks} (clip, mode, visible fraction) cases, visible latents bit-exact in {checks - len(failures)}; "
        f"full-visibility M2M vs AE round-trip max diff {max(full_diffs):.1e}; {elapsed:.1f}s",
    )


# -- criterion 9: determinism and persistence ----------------------------------------

def _pipeline_once(root, seed: int = 0):
    manifest = build_corpus(250, root / "corpus", seed=seed, duration_range=(2.0, 3.0))
    splits = load_splits(manifest)
    cfg = tiny_config()
    ae = train_autoencoder(splits["train"].feats, cfg.ae, epochs=1, seed=seed)
    torch.manual_seed(seed)
    model = build_model(cfg, ae, splits["train"].feats)
    items = build_items(model, splits["train"].records, splits["train"].feats)
    log = root / "train.log.jsonl"
    trainer = train_generator(model, cfg, items, log_path=log, epochs=2)
    return manifest, splits, model, trainer, log


def test_criterion_9_determinism_and_persistence(tmp_path):
    start = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    man_a, splits, model, trainer, log_a = _pipeline_once(tmp_path / "a")
    man_b, _, model_b, _, log_b = _pipeline_once(tmp_path / "b")
    corpus_same = man_a.read_bytes().replace(b"/a/", b"/") == man_b.read_bytes().replace(b"/b/", b"/")
    logs_same = log_a.read_bytes() == log_b.read_bytes() and len(log_a.read_bytes()) > 0
    params_same = all(torch.equal(x, y) for x, y in zip(model.state_dict().values(), model_b.state_dict().values()))

    ck1, ck2 = tmp_path / "m1.mgc", tmp_path / "m2.mgc"
    save_checkpoint(ck1, model, trainer.opt, trainer.step, trainer.epoch)
    loaded, ck = load_checkpoint(ck1)
    opt2 = WarmupAdam(trainable_parameters(loaded), lr=trainer.cfg.lr, warmup_steps=trainer.cfg.warmup_steps)
    restore_optimizer(ck, opt2)
    save_checkpoint(ck2, loaded, opt2, ck.step, ck.epoch)
    state_same = all(torch.equal(model.state_dict()[k], v) for k, v in loaded.state_dict().items())
    opt_same = all(torch.equal(trainer.opt.state_tensors()[k], v) for k, v in opt2.state_tensors().items())
    ckpt_same = ck1.read_bytes() == ck2.read_bytes() and read_checkpoint(ck2).step == trainer.step

    ev = train_evaluator(splits["train"].feats, splits["train"].captions, EvalConfig(epochs=2)).model
    test_items = build_items(loaded, splits["test"].records, splits["test"].feats)
    sample = SampleConfig(iters=3, euler_steps=3)
    reports = []
    for i in range(2):
        rep = evaluate_generator(loaded, ev, test_items, splits["test"].feats, sample, reps=5)
        write_report(tmp_path / f"r{i}.json", rep, loaded.cfg.to_ini())
        reports.append((tmp_path / f"r{i}.json").read_bytes())
    report_same = reports[0] == reports[1]
    elapsed = time.perf_counter() - start
    ok = corpus_same and logs_same and params_same and state_same and opt_same and ckpt_same and report_same
    _verdict(
        9,
        ok,
        f"corpus={corpus_same} loss logs={logs_same} params={params_same} ckpt state={state_same} "
        f"optimizer={opt_same} ckpt bytes={ckpt_same} reports={report_same}; {elapsed:.1f}s",
    )


# -- desk-scale training runs shared by criteria 6, 8 and 10 -------------------------

def _run_config(mode: str, seed: int):
    cfg = desk_config()
    cfg.train.seed = seed
    cfg.train.diffusion_mult = ACCEPT_DIFFUSION_MULT
    cfg.train.w_vl2m = cfg.train.w_v2m = cfg.train.w_m2m = 0.0
    if mode == "a":
        cfg.train.w_ip = 0.0
    return cfg


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    t0 = time.perf_counter()
    base = desk_config()
    root = tmp_path_factory.mktemp("desk")
    manifest = build_corpus(
        base.data.n_samples, root, seed=base.data.seed, duration_range=(base.data.min_seconds, base.data.max_seconds)
    )
    splits = load_splits(manifest)
    ae = train_autoencoder(splits["train"].feats, base.ae, seed=0)
    ev = train_evaluator(splits["train"].feats, splits["train"].captions, EvalConfig(epochs=EVAL_EPOCHS)).model
    setup = time.perf_counter() - t0
    runs = {}
    items = test_items = None
    for seed in ACCEPT_SEEDS:
        for mode in ("a", "b"):
            cfg = _run_config(mode, seed)
            torch.manual_seed(seed)
            model = build_model(cfg, ae, splits["train"].feats)
            if items is None:
                # latents depend only on the shared auto-encoder and tokenizer
                items = build_items(model, splits["train"].records, splits["train"].feats)
                test_items = build_items(model, splits["test"].records, splits["test"].feats)
            t1 = time.perf_counter()
            trainer = train_generator(model, cfg, items, epochs=ACCEPT_EPOCHS)
            train_time = time.perf_counter() - t1
            rep = evaluate_generator(model, ev, test_items, splits["test"].feats, cfg.sample, with_intent=False)
            out = {"model": model, "steps": trainer.step, "train_time": train_time, "report": rep}
            if mode == "b":
                out["intent"] = intent_metrics(model, test_items)
            runs[(mode, seed)] = out
            print(
                f"desk run {mode} seed {seed}: {trainer.step} steps {train_time:.0f}s "
                f"fid {rep['fid']['mean']:.4f} top1 {rep['r_precision_top1']['mean']:.3f} {out.get('intent', '')}",
                flush=True,
            )
    return {"runs": runs, "ev": ev, "splits": splits, "test_items": test_items, "setup": setup, "start": t0}


def test_criterion_6_desk_training_trend(desk_runs):
    runs = desk_runs["runs"]
    chance = 1.0 / EvalConfig().pool_size
    top1 = {k: r["report"]["r_precision_top1"]["mean"] for k, r in runs.items()}
    fids = {m: [runs[(m, s)]["report"]["fid"]["mean"] for s in ACCEPT_SEEDS] for m in ("a", "b")}
    times = {m: [runs[(m, s)]["train_time"] for s in ACCEPT_SEEDS] for m in ("a", "b")}
    steps_equal = len({r["steps"] for r in runs.values()}) == 1
    total = time.perf_counter() - desk_runs["start"]
    rp_ok = min(top1.values()) >= 3 * chance - 1e-4
    fid_ok = np.mean(fids["b"]) <= np.mean(fids["a"])
    _verdict(
        6,
        rp_ok and fid_ok and steps_equal and total < 4 * 3600,
        f"(i) min R-prec top-1 {min(top1.values()):.3f} (>= {3 * chance:.3f}); "
        f"(ii) mean FID b {np.mean(fids['b']):.4f} vs a {np.mean(fids['a']):.4f} "
        f"[a {', '.join(f'{v:.4f}' for v in fids['a'])}; b {', '.join(f'{v:.4f}' for v in fids['b'])}]; "
        f"train time a {np.mean(times['a']):.0f}s b {np.mean(times['b']):.0f}s per run; {total / 60:.0f} min total",
    )


def test_criterion_8_intention_above_chance(desk_runs):
    stats = [desk_runs["runs"][("b", s)]["intent"] for s in ACCEPT_SEEDS]
    acc_ok = all(m["clause2_accuracy"] >= 2 * m["chance"] for m in stats)
    bleu_ok = all(m["bleu1"] - m["bleu1_shuffled"] >= 10.0 for m in stats)
    _verdict(
        8,
        acc_ok and bleu_ok,
        "clause-2 accuracy "
        + ", ".join(f"{m['clause2_accuracy']:.3f}" for m in stats)
        + f" vs 2x chance {2 * stats[0]['chance']:.3f}; BLEU@1 minus shuffled "
        + ", ".join(f"{m['bleu1'] - m['bleu1_shuffled']:.1f}" for m in stats)
        + " (>= 10)",
    )


def test_criterion_10_inference_ablation_shape(desk_runs):
    model = desk_runs["runs"][("b", ACCEPT_SEEDS[0])]["model"]
    items = desk_runs["test_items"]
    batch = items[:32]
    xs, ts = [], []
    for iters in (1, 2, 4, 8):
        for steps in (1, 2, 5, 10):
            sample = SampleConfig(iters=iters, euler_steps=steps)
            best = math.inf
            for _ in range(3):
                t0 = time.perf_counter()
                generate_from_items(model, batch, "l2m", sample)
                best = min(best, time.perf_counter() - t0)
            xs.append(iters * steps)
            ts.append(best)
    xs, ts = np.asarray(xs, float), np.asarray(ts)
    coef = np.polyfit(xs, ts, 1)
    r2 = 1.0 - float(((ts - np.polyval(coef, xs)) ** 2).sum() / ((ts - ts.mean()) ** 2).sum())

    splits = desk_runs["splits"]
    fid10 = desk_runs["runs"][("b", ACCEPT_SEEDS[0])]["report"]["fid"]["mean"]
    base = SampleConfig()
    coarse = SampleConfig(iters=base.iters, euler_steps=2)
    rep2 = evaluate_generator(model, desk_runs["ev"], items, splits["test"].feats, coarse, with_intent=False)
    fid2 = rep2["fid"]["mean"]
    _verdict(
        10,
        r2 > 0.95 and fid2 > fid10,
        f"wall-clock vs iters*euler_steps: slope {coef[0] * 1e3:.2f} ms/unit, R^2 {r2:.4f} (> 0.95); "
        f"FID at euler_steps=2 {fid2:.4f} vs 10 {fid10:.4f}",
    )
