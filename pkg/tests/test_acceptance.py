"""Acceptance criteria 1-9. Each test prints one ``CRITERION n PASS|FAIL`` line.

Criteria 7-9 share one module-scoped run of the real pipeline (2k parallel
pairs, desk-scale defaults); the whole file takes roughly a quarter hour on
one CPU core.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from attrdiff import autodiff as ad
from attrdiff import cli, nn
from attrdiff.autodiff import Tensor
from attrdiff.checkpoint import save_checkpoint
from attrdiff.data import CorpusConfig, generate_corpus, token_array
from attrdiff.denoiser import DenoiserConfig, DenoiserModel
from attrdiff.diffusion import build_train_set, diffusion_loss, regularization_loss, train_diffusion
from attrdiff.metrics import (DIRECTIONS, evaluate_generated, generate, sentence_embeddings, silhouette,
                              style_accuracy, train_oracle)
from attrdiff.sampler import (GuidanceConfig, cfg_combine, cg_adjust, classifier_log_prob, run_ddim,
                              sample)
from attrdiff.schedule import build_linear_schedule, diffuse, recover_eps, recover_x0, v_target
from attrdiff.vae import VaeConfig, VaeLossWeights, VaeModel, reconstruction_accuracy, train_vae, vae_loss

from conftest import TINY_DEN, TINY_DIFF, TINY_VAE
from test_autodiff import OP_CASES


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1. autodiff soundness

GC_VAE = VaeConfig(vocab_size=10, seq_len=4, latent_dim=2, embed_dim=4, heads=2, layers=1, cls_hidden=3,
                   refine_steps=2, train_passes=2)
GC_DEN = DenoiserConfig(latent_dim=2, seq_len=4, hidden=4, layers=1, heads=2, T=100)


def _composed_losses(seed: int):
    """Fresh micro models and batch for one seed; returns [(params, loss_fn), ...]."""
    rng = np.random.default_rng([seed, 77])
    vae = VaeModel(GC_VAE, seed=seed)
    toks = rng.integers(0, GC_VAE.vocab_size, size=(2, GC_VAE.seq_len))
    labels = rng.integers(0, 2, size=2)
    noise = rng.standard_normal((2, GC_VAE.seq_len, GC_VAE.latent_dim))
    weights = VaeLossWeights(alpha=0.1, beta=1.0)
    l_vae = lambda: vae_loss(vae, toks, labels, weights, noise).total

    frozen = VaeModel(GC_VAE, seed=seed + 1000).freeze()
    den = DenoiserModel(GC_DEN, seed=seed)
    sched = build_linear_schedule(GC_DEN.T)
    shape = (2, GC_DEN.seq_len, GC_DEN.latent_dim)
    x0, eps, z_src = rng.standard_normal((3,) + shape)
    t = rng.integers(1, GC_DEN.T + 1, size=2)
    keep = np.array([True, bool(rng.random() < 0.5)])
    z_t, v = diffuse(sched, x0, eps, t), v_target(sched, x0, eps, t)
    lam = 3.0

    def l_diff():
        v_pred = den.forward(Tensor(z_t), t, z_src, labels, keep)
        reg = regularization_loss(v_pred, z_t, t, labels, frozen, sched)
        return ad.add(diffusion_loss(v_pred, v), ad.mul(reg, lam))
    return [(vae.params, l_vae), (den.params, l_diff)]


def sampled_param_check(params, loss_fn, names, rng, h: float = 1e-5) -> float:
    """One backward pass, then central differences at one random coordinate of each named tensor.

    Same elementwise relative error as ``ad.grad_check``, restricted to the sampled coordinates.
    """
    nn.zero_grad(params)
    ad.backward(loss_fn())
    worst = 0.0
    for name in names:
        p = params[name]
        analytic = 0.0 if p.grad is None else p.grad.reshape(-1)
        i = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn().item()
        flat[i] = old - h
        fm = loss_fn().item()
        flat[i] = old
        numeric = (fp - fm) / (2 * h)
        a = analytic if np.isscalar(analytic) else analytic[i]
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(numeric)))
    nn.zero_grad(params)
    return worst


def test_criterion_1_autodiff_soundness(capsys):
    start = time.perf_counter()
    worst_op = {}
    for op, case in OP_CASES.items():
        worst_op[op] = max(ad.grad_check(*case(np.random.default_rng(seed)), h=1e-5) for seed in range(100))
    # composed losses: every seed draws fresh models and data and checks a random coordinate of
    # every other parameter tensor, so each tensor is probed at 50 random coordinates over 100 seeds
    worst_loss = {"vae": 0.0, "diffusion+lam*classifier": 0.0}
    covered = {k: set() for k in worst_loss}
    all_names = {k: set(p) for k, (p, _) in zip(worst_loss, _composed_losses(0))}
    for seed in range(100):
        rng = np.random.default_rng([seed, 5])
        for key, (params, loss_fn) in zip(worst_loss, _composed_losses(seed)):
            group = sorted(params)[seed % 2::2]
            worst_loss[key] = max(worst_loss[key], sampled_param_check(params, loss_fn, group, rng))
            covered[key].update(group)
    assert covered == all_names
    elapsed = time.perf_counter() - start
    worst = max(max(worst_op.values()), max(worst_loss.values()))
    detail = (f"max rel err ops={max(worst_op.values()):.2e} over {len(worst_op)} op cases, "
              f"L_vae={worst_loss['vae']:.2e}, L_diff+lam*L_cls={worst_loss['diffusion+lam*classifier']:.2e}, "
              f"100 seeds each, {elapsed:.1f}s")
    verdict(capsys, 1, worst < 1e-4 and elapsed < 60, detail)


# ---------------------------------------------------------------- 2. schedule identities

def test_criterion_2_schedule_identities(capsys):
    sched = build_linear_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - (1e-4 + (t - 1) / 999 * (0.02 - 1e-4))
    ends_ok = sched.beta[0] == 1e-4 and sched.beta[-1] == 0.02
    ab_ok = abs(sched.alpha_bar[-1] / prod - 1) < 0.10 and abs(prod / 4.0e-5 - 1) < 0.10
    worst_rt = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x0, eps = rng.normal(size=(2, 16, 4))
        t = int(rng.integers(1, 1001))
        zt, v = diffuse(sched, x0, eps, t), v_target(sched, x0, eps, t)
        worst_rt = max(worst_rt, np.abs(recover_x0(sched, zt, v, t) - x0).max(),
                       np.abs(recover_eps(sched, zt, v, t) - eps).max())
    worst_ddim = {}
    for steps in (5, 50, 1000):
        rng = np.random.default_rng(steps)
        x0 = rng.normal(size=(3, 16, 4))

        def oracle(z, t, x0=x0):
            a, s = math.sqrt(sched.alpha_bar[t - 1]), sched.sigma[t - 1]
            return v_target(sched, x0, (z - a * x0) / s, t)
        worst_ddim[steps] = float(np.abs(run_ddim(oracle, rng.standard_normal(x0.shape), sched, steps) - x0).max())
    ok = ends_ok and ab_ok and worst_rt < 1e-10 and max(worst_ddim.values()) < 1e-8
    detail = (f"beta_1={float(sched.beta[0])!r} beta_T={float(sched.beta[-1])!r}; "
              f"alpha_bar_T={sched.alpha_bar[-1]:.4e} (oracle {prod:.4e}); round-trip err {worst_rt:.1e}; "
              "DDIM oracle err "
              + ", ".join(f"{k} steps {v:.1e}" for k, v in worst_ddim.items()))
    verdict(capsys, 2, ok, detail)


# ---------------------------------------------------------------- 3. guidance algebra

def test_criterion_3_guidance_algebra(capsys, tiny_vae):
    sched = build_linear_schedule()
    id_cfg = id_cg = equiv = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        z, vc, vu = rng.normal(size=(3, 16, 4))
        t, gamma = int(rng.integers(1, 1001)), float(rng.uniform(0, 5))
        id_cfg = max(id_cfg, np.abs(cfg_combine(vc, vu, 0.0) - vc).max())
        id_cg = max(id_cg, np.abs(cg_adjust(vc, vu, 0.0, sched.sigma[t - 1]) - vc).max())
        via_v = recover_eps(sched, z, cfg_combine(vc, vu, gamma), t)
        via_eps = cfg_combine(recover_eps(sched, z, vc, t), recover_eps(sched, z, vu, t), gamma)
        equiv = max(equiv, np.abs(via_v - via_eps).max())
    grad_err = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 16, 4))
        label = rng.integers(0, 2, size=1)
        grad_err = max(grad_err, ad.grad_check(lambda v: classifier_log_prob(tiny_vae, v, label), x))
    ok = id_cfg == 0 and id_cg == 0 and equiv < 1e-10 and grad_err < 1e-4
    detail = (f"cfg(gamma=0) err {id_cfg:.0e}, cg(gamma=0) err {id_cg:.0e}, v/eps CFG equivalence {equiv:.1e}, "
              f"classifier grad rel err {grad_err:.1e}")
    verdict(capsys, 3, ok, detail)


# ---------------------------------------------------------------- 4. determinism

def test_criterion_4_determinism(capsys, tmp_path):
    ccfg = CorpusConfig(n_train=64, n_val=8, n_test=16, seed=5)
    c1, c2 = generate_corpus(ccfg), generate_corpus(ccfg)
    data_ok = c1.splits() == c2.splits()

    def build():
        vae, _ = train_vae(c1.train, replace(TINY_VAE, epochs=1), seed=3)
        ts = build_train_set(c1.train, vae)
        den, _ = train_diffusion(ts, vae, replace(TINY_DIFF, epochs=1), TINY_DEN)
        return vae, den
    (vae1, den1), (vae2, den2) = build(), build()
    paths = []
    for i, (v, d) in enumerate(((vae1, den1), (vae2, den2))):
        save_checkpoint(v.params, tmp_path / f"vae{i}.ckpt")
        save_checkpoint(d.params, tmp_path / f"den{i}.ckpt")
        paths.append((tmp_path / f"vae{i}.ckpt", tmp_path / f"den{i}.ckpt"))
    ckpt_ok = all(a.read_bytes() == b.read_bytes() for a, b in zip(*paths))

    sched = build_linear_schedule(TINY_DEN.T)
    g = GuidanceConfig(ddim_steps=5)
    s1 = generate(c1.test, vae1, den1, sched, g, seed=1)
    s2 = generate(c1.test, vae2, den2, sched, g, seed=1)
    samples_ok = s1.tobytes() == s2.tobytes()
    oracle = train_oracle(c1.train, 32)
    r1 = evaluate_generated(c1.test, {1: s1}, vae1, oracle, c1.grammar)
    r2 = evaluate_generated(c1.test, {1: s2}, vae2, oracle, c1.grammar)
    reports_ok = r1.to_lines() == r2.to_lines()

    ts = build_train_set(c1.train, vae1)
    a, ha = train_diffusion(ts, vae1, replace(TINY_DIFF, lam=0.0, epochs=2), TINY_DEN)
    b, hb = train_diffusion(ts, vae1, replace(TINY_DIFF, lam=0.0, epochs=2, regularize=False), TINY_DEN)
    lam0_ok = nn.checksum(a.params) == nn.checksum(b.params) and [h["total"] for h in ha] == [h["total"] for h in hb]

    # the CLI route end to end: two runs of the same config are byte-identical
    cfg_text = ("n_train=32\nn_val=4\nn_test=8\nlatent_dim=4\nvae_embed=8\nhidden=8\nlayers=1\nheads=2\n"
                "vae_epochs=1\nepochs=1\nT=50\nddim_steps=4\nseeds=1\nlambdas=0,3\n")
    (tmp_path / "cfg.txt").write_text(cfg_text)
    for d in ("r1", "r2"):
        assert cli.run(["pipeline", "--out", str(tmp_path / d), "--config", str(tmp_path / "cfg.txt")]) == 0
    files = ["data/corpus.train", "vae.ckpt", "lam3/diff.ckpt", "lam3/samples_cfg_seed1.jsonl",
             "lam3/report_cfg.txt", "summary.tsv"]
    cli_ok = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes() for f in files)

    ok = data_ok and ckpt_ok and samples_ok and reports_ok and lam0_ok and cli_ok
    detail = (f"datasets={data_ok} checkpoints={ckpt_ok} samples={samples_ok} reports={reports_ok} "
              f"lam0==unregularized={lam0_ok} cli_rerun={cli_ok}")
    verdict(capsys, 4, ok, detail)


# ---------------------------------------------------------------- 5. frozen contracts

def test_criterion_5_frozen_contracts(capsys, tiny_corpus):
    vae, _ = train_vae(tiny_corpus.train, TINY_VAE, seed=11)
    before, cls_before = nn.checksum(vae.params), nn.checksum(vae.classifier_params)
    ts = build_train_set(tiny_corpus.train, vae)
    den, _ = train_diffusion(ts, vae, replace(TINY_DIFF, lam=5.0, epochs=2), TINY_DEN)
    after_train = nn.checksum(vae.params), nn.checksum(vae.classifier_params)
    sched = build_linear_schedule(TINY_DEN.T)
    z_src = vae.encode_mean(token_array(tiny_corpus.test, "src"))
    labels = [e.tgt_label for e in tiny_corpus.test]
    for mode in ("cfg", "cg", "none"):
        sample(z_src, labels, den, sched, GuidanceConfig(mode, 2.0, 5), seed=1, vae=vae)
    after_sample = nn.checksum(vae.params), nn.checksum(vae.classifier_params)
    no_grads = all(p.grad is None and not p.requires_grad for p in vae.params.values())
    ok = after_train == (before, cls_before) == after_sample and no_grads
    verdict(capsys, 5, ok, f"VAE sha256 {before[:12]} classifier sha256 {cls_before[:12]} unchanged after "
                           f"training and cfg/cg/none sampling: {ok}")


# ---------------------------------------------------------------- 6. inductive bias

def test_criterion_6_inductive_bias(capsys):
    gaps, rows = [], []
    for seed in (0, 1, 2):
        corpus = generate_corpus(CorpusConfig(seed=seed))  # 1600/200/200 = 2000 pairs
        test_toks = token_array(corpus.test, "src")
        labels = [e.src_label for e in corpus.test]
        sil = {}
        for beta in (1.0, 0.0):
            vae, _ = train_vae(corpus.train, VaeConfig(epochs=6), VaeLossWeights(alpha=0.1, beta=beta), seed=seed)
            sil[beta] = silhouette(sentence_embeddings(test_toks, vae), labels)
        gaps.append(sil[1.0] - sil[0.0])
        rows.append(f"seed{seed}: {sil[1.0]:.3f} vs {sil[0.0]:.3f}")
    med = float(np.median(gaps))
    verdict(capsys, 6, med >= 0.1, f"silhouette beta=1 vs beta=0 ({'; '.join(rows)}), median gap {med:.3f}")


# ---------------------------------------------------------------- shared pipeline for 7-9

LAMBDAS = (3.0, 0.0, 1.0, 10.0)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    cfg = cli.RunConfig()
    cfg.validate()
    res = {"out": out, "cfg": cfg, "reports": {}}
    t0 = time.perf_counter()
    cli.stage_gen_data(cfg, out)
    cli.stage_train_vae(cfg, out)
    for lam in LAMBDAS:
        cli.stage_train_diff(cfg, out, lam)
        res.setdefault("cfg_step", {})[lam] = cli.stage_sample(cfg, out, lam)
        res["reports"][lam] = cli.stage_eval(cfg, out, lam)
        if lam == 3.0:
            res["lam3_seconds"] = time.perf_counter() - t0
    return res


def test_criterion_7_regularization_trend(capsys, pipeline):
    reps = pipeline["reports"]
    seeds = pipeline["cfg"].seeds
    med = lambda lam, d, m: float(np.median([reps[lam].per_seed[s][d][m] for s in seeds]))
    acc_ok = all(med(3.0, d, "style_accuracy") >= med(0.0, d, "style_accuracy") for d in DIRECTIONS)
    sim = {lam: float(np.median([np.mean([reps[lam].per_seed[s][d]["semantic_similarity"] for d in DIRECTIONS])
                                 for s in seeds])) for lam in (1.0, 10.0)}
    sim_ok = sim[10.0] <= sim[1.0]
    accs = "; ".join(f"{d}: lam3 {med(3.0, d, 'style_accuracy'):.3f} vs lam0 {med(0.0, d, 'style_accuracy'):.3f}"
                     for d in DIRECTIONS)
    table = " | ".join(f"lam{lam:g} acc {np.mean([reps[lam].mean[d]['style_accuracy'] for d in DIRECTIONS]):.3f} "
                       f"sim {np.mean([reps[lam].mean[d]['semantic_similarity'] for d in DIRECTIONS]):.3f} "
                       f"valid {np.mean([reps[lam].mean[d]['validity_rate'] for d in DIRECTIONS]):.3f}"
                       for lam in sorted(reps))
    verdict(capsys, 7, acc_ok and sim_ok,
            f"median style acc {accs}; similarity lam10 {sim[10.0]:.4f} <= lam1 {sim[1.0]:.4f}; [{table}]")


def test_criterion_8_end_to_end_floor(capsys, pipeline):
    out, cfg = pipeline["out"], pipeline["cfg"]
    corpus = cli.run_corpus(out)
    vae = cli.load_vae(cfg, out)
    recon = reconstruction_accuracy(vae, token_array(corpus.test, "src"))
    oracle = train_oracle(corpus.train, cfg.vocab_size, seed=cfg.data_seed)
    test_toks, test_labels = token_array(corpus.test, "src"), [e.src_label for e in corpus.test]
    self_acc = style_accuracy(test_toks, test_labels, oracle)
    rep = pipeline["reports"][3.0]
    validity = float(np.mean([rep.mean[d]["validity_rate"] for d in DIRECTIONS]))
    # untrained denoiser, same VAE and sampler settings, first evaluation seed
    untrained = DenoiserModel(cfg.denoiser_config(), seed=cfg.train_seed)
    sched = build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = generate(corpus.test, vae, untrained, sched, cfg.guidance(), seed=cfg.seeds[0])
    baseline = float(np.mean([corpus.grammar.is_valid(g) for g in gen]))
    minutes = pipeline["lam3_seconds"] / 60
    ok = minutes < 15 and recon >= 0.95 and self_acc >= 0.99 and validity - baseline >= 0.3
    verdict(capsys, 8, ok, f"pipeline to lam=3 eval {minutes:.1f} min; recon acc {recon:.4f}; oracle self-acc "
                           f"{self_acc:.4f}; validity {validity:.3f} vs untrained {baseline:.3f}")


def test_criterion_9_cg_overhead(capsys, pipeline):
    out, cfg = pipeline["out"], pipeline["cfg"]
    cg_cfg = replace(cfg, mode="cg")
    none_cfg = replace(cfg, mode="none", seeds=cfg.seeds[:1])
    cg_step = cli.stage_sample(cg_cfg, out, 3.0)
    cg_report = cli.stage_eval(cg_cfg, out, 3.0)
    none_step = cli.stage_sample(none_cfg, out, 3.0)
    cfg_step = pipeline["cfg_step"][3.0]
    ratio = cg_step / cfg_step
    acc = np.mean([cg_report.mean[d]["style_accuracy"] for d in DIRECTIONS])
    valid = np.mean([cg_report.mean[d]["validity_rate"] for d in DIRECTIONS])
    ok = all(math.isfinite(x) and x > 0 for x in (cg_step, cfg_step, none_step))
    detail = (f"per-step seconds (batch {cfg.n_test}): cg {cg_step * 1e3:.2f} ms, cfg {cfg_step * 1e3:.2f} ms, "
              f"conditional-only {none_step * 1e3:.2f} ms; cg/cfg = {ratio:.2f}x, classifier-gradient cost "
              f"{(cg_step - none_step) * 1e3:.2f} ms/step; cg style acc {acc:.3f} validity {valid:.3f}")
    (out / "cg_overhead.txt").write_text(detail + "\n")
    verdict(capsys, 9, ok, detail)


@pytest.mark.xfail(reason="pooled encoder means of the classifier-biased VAE are dominated by style; "
                          "parallel pairs beat random unrelated sentences only about half the time")
def test_parallel_pairs_closer_than_unrelated(capsys, pipeline):
    out, cfg = pipeline["out"], pipeline["cfg"]
    test = cli.run_corpus(out).test
    vae = cli.load_vae(cfg, out)
    src = sentence_embeddings(token_array(test, "src"), vae)
    tgt = sentence_embeddings(token_array(test, "tgt"), vae)
    labels = np.array([e.src_label for e in test])
    rng = np.random.default_rng(0)
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    wins = {"random": 0, "same style": 0, "other style": 0}
    for _ in range(1000):
        i, j = rng.choice(len(test), 2, replace=False)
        pair = cos(src[i], tgt[i])
        same = rng.choice(np.flatnonzero((labels == labels[i]) & (np.arange(len(test)) != i)))
        other = rng.choice(np.flatnonzero(labels != labels[i]))
        wins["random"] += pair > cos(src[i], src[j])
        wins["same style"] += pair > cos(src[i], src[same])
        wins["other style"] += pair > cos(src[i], src[other])
    with capsys.disabled():
        print("\nparallel pair beats unrelated sentence: "
              + ", ".join(f"{k} {v / 1000:.3f}" for k, v in wins.items()))
    assert wins["random"] / 1000 >= 0.95
