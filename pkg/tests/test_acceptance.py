"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines
appear at the end of the session.  The two training experiments (8, 9)
take several minutes on one CPU and carry the ``slow`` marker.
"""
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE, check_grads
from dermrep import autodiff as ad
from dermrep import cli, gda, metrics, model as md, preprocess as pp, synthdata as sd
from dermrep.autodiff import Tensor
from dermrep.experiments import run_gda_desk, run_ihd_desk
from dermrep.optim import AdamState, ParamGroups, RMSpropState, adam_direction, adam_step, joint_step, rmsprop_step


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _layer_cases(rng):
    def p(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x4, w, wt = p(2, 3, 6, 6), p(4, 3, 3, 3), p(3, 2, 4, 4)
    x2, wd, bd = p(4, 5), p(3, 5), p(3)
    xa = p(3, 6)
    xa.data += np.sign(xa.data) * 0.05
    g, b = p(3), p(3)
    bn_state = ad.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    r, f = p(5, 1), p(5, 1)
    y2 = p(2, 3, 6, 6)
    labels = ad.one_hot([0, 2, 1, 2], 3)
    z = p(4, 3)

    def fresh_state():
        return ad.BatchNormState(bn_state.running_mean.copy(), bn_state.running_var.copy())

    return {
        "conv2d": (lambda: ad.conv2d(x4, w, 2, 1), [x4, w]),
        "conv_transpose2d": (lambda: ad.conv_transpose2d(x4, wt, 2, 1), [x4, wt]),
        "dense": (lambda: ad.dense(x2, wd, bd), [x2, wd, bd]),
        "relu": (lambda: ad.relu(xa), [xa]),
        "leaky_relu": (lambda: ad.leaky_relu(xa, 0.2), [xa]),
        "tanh": (lambda: ad.tanh(xa), [xa]),
        "sigmoid": (lambda: ad.sigmoid(xa), [xa]),
        "batch_norm_train": (lambda: ad.batch_norm(x4, g, b, fresh_state(), "train"), [x4, g, b]),
        "batch_norm_eval": (lambda: ad.batch_norm(x4, g, b, fresh_state(), "eval"), [x4, g, b]),
        "softmax": (lambda: ad.softmax(z), [z]),
        "cross_entropy": (lambda: ad.cross_entropy(ad.softmax(z), labels), [z]),
        "wgan_critic": (lambda: ad.wgan_losses(r, f)[0], [r, f]),
        "wgan_generator": (lambda: ad.wgan_losses(r, f)[1], [f]),
        "grad_reverse": (lambda: ad.grad_reverse(xa, 1.0), [xa]),
        "global_avg_pool": (lambda: ad.global_avg_pool(x4), [x4]),
        "channel_bias": (lambda: ad.add_channel_bias(x4, g), [x4, g]),
        "select_rows": (lambda: ad.select_rows(x2, np.array([3, 0, 3])), [x2]),
        "mse": (lambda: ad.mse(x4, y2), [x4, y2]),
    }


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for name, (build, tensors) in _layer_cases(rng).items():
        if name == "grad_reverse":
            # the reversal is deliberately not a gradient of its forward map
            xa = tensors[0]
            ad.zero_grad(tensors)
            ad.backward(ad.tensor_sum(ad.grad_reverse(xa, 1.0)))
            worst[name] = float(np.abs(xa.grad + 1.0).max())
            continue
        worst[name] = check_grads(build, tensors, rng)

    cfg = md.BackboneConfig(input_size=8, blocks=((3, 1), (4, 2)), feature_dim=5, use_color_constancy=False, lam=0.6)
    groups = md.init_params(cfg)
    for t in groups.all_params().values():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    x = md.prepare_images(rng.uniform(size=(4, 8, 8, 3)), cfg)
    y, yh, rows = np.array([0, 1, 1, 0]), np.array([1, 0, 1, 1]), np.array([0, 1, 2])

    def total():
        l = md.batch_losses(x, y, yh, rows, groups, cfg, reverse=False)
        return ad.add(l.melanoma, ad.scale(l.hair, cfg.lam))

    params = groups.all_params()
    ad.zero_grad(params.values())
    ad.backward(total())
    worst["end_to_end"] = max(
        ad.relative_error(t.grad, ad.numerical_grad(lambda: total().item(), t)) for t in params.values()
    )
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    record(1, max(worst.values()) < 1e-4 and elapsed < 120,
           f"{len(worst)} checks, worst rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. GRL contract


def test_c02_grl_contract():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6)) * 1e3
    forward_ok = all(ad.grad_reverse(Tensor(x), lam).data.tobytes() == x.tobytes()
                     for lam in (0.0, 1e-9, 0.5, 1.0, 7.0, 1e6))

    cfg = md.BackboneConfig(input_size=8, blocks=((3, 2),), feature_dim=4, use_color_constancy=False)
    worst = 0.0
    xs = md.prepare_images(rng.uniform(size=(5, 8, 8, 3)), cfg)
    y, yh, rows = np.array([0, 1, 0, 1, 1]), np.array([1, 1, 0, 0, 1]), np.arange(5)
    for lam in (0.25, 1.0, 4.0):
        c = replace(cfg, lam=lam)
        g = md.init_params(c)
        rev = md._grads_of(md.batch_losses(xs, y, yh, rows, g, c, True).hair, g.theta_f)
        plain = md._grads_of(md.batch_losses(xs, y, yh, rows, g, c, False).hair, g.theta_f)
        worst = max(worst, max(float(np.abs(rev[k] + lam * plain[k]).max()) for k in plain))

    data = sd.build_confounded_dataset(sd.ConfoundConfig(n_train=40, n_test=0, size=16, seed=2))[0]
    base = replace(cfg, input_size=16, epochs=2, batch_size=16, lr=1e-2)
    a = md.train(data, replace(base, ihd=True, lam=0.0)).groups
    b = md.train(data, replace(base, ihd=False)).groups
    same = all(a.all_params()[k].data.tobytes() == t.data.tobytes() for k, t in {**b.theta_f, **b.theta_m}.items())
    record(2, forward_ok and worst <= 1e-12 and same,
           f"forward identity {forward_ok}, max |g_rev + lam*g| {worst:.1e}, lambda=0 bitwise {same}")


# ---------------------------------------------------------------------------
# 3. optimizer traces

ADAM_TRACE = [0.9000000004999999975, 0.87336629670243135784, 0.83932338213894247183]
RMSPROP_TRACE = [-0.00063245551203367649886, -0.0010912869692484844827, -0.0014754763370660601244]


def test_c03_optimizer_traces():
    p = {"w": Tensor(np.array([1.0]))}
    st = AdamState(eta=0.1)
    adam_err = 0.0
    for grad, want in zip([2.0, -1.0, 0.5], ADAM_TRACE):
        adam_step(p, {"w": np.array([grad])}, st)
        adam_err = max(adam_err, abs(p["w"].data[0] - want))
    q = {"w": Tensor(np.array([0.0]))}
    rs = RMSpropState()
    rms_err = 0.0
    for want in RMSPROP_TRACE:
        rmsprop_step(q, {"w": np.ones(1)}, rs)
        rms_err = max(rms_err, abs(q["w"].data[0] - want))

    lam, eta = 0.6, 0.05
    t = lambda v: Tensor(np.array([v]))
    groups = ParamGroups({"f": t(1.0)}, {"m": t(2.0)}, {"h": t(-1.0)}, AdamState(eta=eta), AdamState(eta=eta))
    gm = {"f": np.array([0.3]), "m": np.array([-0.2])}
    gh_raw = {"f": np.array([0.7]), "h": np.array([0.4])}
    joint_step(groups, gm, {"f": -lam * gh_raw["f"], "h": gh_raw["h"]}, lam)
    am, ah = adam_direction(AdamState(), gm), adam_direction(AdamState(), gh_raw)
    cases = [
        groups.theta_m["m"].data[0] - (2.0 - eta * am["m"][0]),
        groups.theta_h["h"].data[0] - (-1.0 - eta * lam * ah["h"][0]),
        groups.theta_f["f"].data[0] - (1.0 - eta * (am["f"][0] - lam * ah["f"][0])),
    ]
    eq9 = max(abs(c) for c in cases)
    record(3, adam_err < 1e-10 and rms_err < 1e-10 and eq9 < 1e-15,
           f"adam err {adam_err:.1e}, rmsprop err {rms_err:.1e}, joint-step err {eq9:.1e}")


# ---------------------------------------------------------------------------
# 4. colour constancy


def _random_images(n, seed):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 1, (24, 24, 3)) * rng.uniform(0.3, 1.0, 3) for _ in range(n)]


def test_c04_color_constancy():
    imgs = _random_images(20, 4)
    idem = all(np.array_equal(pp.max_rgb(pp.max_rgb(im)), pp.max_rgb(im)) for im in imgs)
    max_err = max(float(np.abs(pp.max_rgb(im, 0.8).reshape(-1, 3).max(0) - 0.8).max()) for im in imgs)
    sog_dev = max(float(np.abs(pp.shades_of_gray(im, 100) - pp.max_rgb(im)).max()) for im in imgs)
    img = np.array([[[0.2, 0.4, 0.1], [0.6, 0.2, 0.3]], [[0.4, 0.4, 0.5], [0.4, 0.8, 0.3]]])
    by_hand = np.clip(img * (0.5 / np.array([0.4, 0.45, 0.3])), 0, 1)
    gw_err = float(np.abs(pp.shades_of_gray(img, p=1, k=0.5) - by_hand).max())
    record(4, idem and max_err <= 1e-6 and sog_dev <= 1e-3 and gw_err < 1e-12,
           f"idempotent {idem}, |max-k| {max_err:.1e}, SoG(p=100) vs Max-RGB {sog_dev:.2e} (tol 1e-3), "
           f"gray-world err {gw_err:.1e}")


# ---------------------------------------------------------------------------
# 5. AUC oracle


def test_c05_auc_oracle():
    rng = np.random.default_rng(5)
    mismatches = monotone_breaks = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.integers(0, max(2, n // 3), n) / 7.0 if rng.random() < 0.5 else rng.normal(size=n)
        a = metrics.auc(s, y)
        mismatches += a != metrics.mann_whitney_auc(s, y)
        monotone_breaks += a != metrics.auc(s ** 3, y) or a != metrics.auc(np.exp(s), y)
    record(5, mismatches == 0 and monotone_breaks == 0,
           f"1000 instances: {mismatches} oracle mismatches, {monotone_breaks} monotone-transform changes")


# ---------------------------------------------------------------------------
# 6. stratified folds


def test_c06_stratified_kfold():
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(200):
        k = int(rng.integers(2, 11))
        n_pos = int(rng.integers(k, 300))
        n_neg = int(rng.integers(k, 300))
        y = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)])
        folds = sd.stratified_kfold(y, k, int(rng.integers(1 << 30)))
        vals = np.concatenate([v for _, v in folds])
        partition = np.array_equal(np.sort(vals), np.arange(y.size))
        bounded = all(abs(int(y[v].sum()) - -(-n_pos // k)) <= 1 for _, v in folds)
        bad += not (partition and bounded)
    y = np.zeros(33126, int)
    y[:584] = 1
    counts = sorted(int(y[v].sum()) for _, v in sd.stratified_kfold(y, 5, 0))
    record(6, bad == 0 and set(counts) <= {116, 117},
           f"{bad}/200 configurations violate partition/bounds; 584/33126 folds {counts}")


# ---------------------------------------------------------------------------
# 7. GDA mechanics


def test_c07_gda_mechanics():
    real, fake = np.array([[1.0], [2.0], [4.0]]), np.array([[0.5], [-1.5], [1.0]])
    c, g = ad.wgan_losses(Tensor(real), Tensor(fake))
    loss_err = max(abs(c.item() - (0.0 - 7 / 3)), abs(g.item() - 0.0))

    colors = ([0.8, 0.2, 0.2], [0.6, 0.3, 0.1])
    toy = sd.Dataset([sd.LabeledSample(np.full((32, 32, 3), col), 1, 0, id=f"c{i}") for i, col in enumerate(colors)])
    target = np.mean(colors, axis=0)
    first, last = [], []
    for seed in range(5):
        cfg = gda.GanConfig(width=8, epochs=30, batch_size=8, iters_per_epoch=2, seed=seed)
        pair = gda.train_dcgan(toy, cfg, record_samples=16)
        dist = [np.linalg.norm(np.array(h["sample_mean_color"]) - target) for h in pair.history]
        first.append(dist[0])
        last.append(dist[-1])

    rng = np.random.default_rng(7)
    noisy = sd.Dataset([sd.LabeledSample(np.clip(np.full((32, 32, 3), col) + rng.normal(0, 0.1, (32, 32, 3)), 0, 1),
                                         1, 0, id=f"n{i}") for i, col in enumerate(colors * 3)])
    floor = gda.calibrate_mse_floor(noisy)
    emitted = gda.sample_synthetic(pair, 30, noisy, floor, np.random.default_rng(8))
    audit = all(gda.nearest_train_mse(s.image, noisy)[1] >= floor for s in emitted)
    record(7, loss_err < 1e-15 and audit and np.mean(last) < np.mean(first),
           f"wgan loss err {loss_err:.1e}, {len(emitted)} samples pass MSE floor {audit}, "
           f"colour distance {np.mean(first):.3f} -> {np.mean(last):.3f}")


# ---------------------------------------------------------------------------
# 8. IHD direction of effect


@pytest.mark.slow
def test_c08_ihd_direction():
    result, elapsed = run_ihd_desk(range(5))
    gains = np.subtract(result.ihd_auc, result.backbone_auc)
    record(8, result.gain >= 0.02 and elapsed <= 600,
           f"BB {np.mean(result.backbone_auc):.4f} -> BB+IHD {np.mean(result.ihd_auc):.4f} "
           f"(gain {result.gain:+.4f}, per seed {np.round(gains, 3).tolist()}), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. GDA direction of effect


@pytest.mark.slow
def test_c09_gda_direction():
    t0 = time.perf_counter()
    means, table = run_gda_desk(range(3))
    counts = [r.n_synthetic for r in table[0]]
    best = int(np.argmax(means))
    errors = [r.error for rows in table for r in rows if r.error]
    record(9, 0 < best < len(counts) - 1 and not errors,
           f"mean AUC by count {dict(zip(counts, np.round(means, 4).tolist()))}, "
           f"peak at {counts[best]}, {time.perf_counter() - t0:.0f}s")


# ---------------------------------------------------------------------------
# 10. determinism of every CLI command

CLI_CONFIG = """\
seed = 11
folds = 2
synth.n_train = 30
synth.size = 16
model.input_size = 16
model.blocks = 4x2
model.feature_dim = 4
model.epochs = 1
model.batch_size = 16
model.lr = 0.01
gan.z_dim = 8
gan.width = 4
gan.epochs = 2
gan.iters_per_epoch = 1
gan.critic_steps_per_gen = 2
gan.batch_size = 4
gda.synthetic_count = 4
sweep.counts = 0, 2
"""


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_cli_determinism(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text(CLI_CONFIG)
    out = tmp_path / "out"
    commands = [["synth"], ["gan"], ["gan-sample"], ["train"], ["sweep"]]
    codes, snapshots = [], []
    for _ in range(2):
        for cmd in commands:
            codes.append(cli.run([*cmd, "--config", str(conf), "--out", str(out)]))
        snapshots.append(_tree(out))
    a, b = snapshots
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record(10, all(c == 0 for c in codes) and not differing and len(a) > 0,
           f"{len(a)} artifacts over {len(commands)} commands, exit codes {set(codes)}, {len(differing)} differ")


# ---------------------------------------------------------------------------
# 11. ingestion robustness


def test_c11_ingestion(tmp_path):
    rng = np.random.default_rng(11)
    ds = sd.Dataset([sd.LabeledSample(rng.uniform(size=(16, 16, 3)), i % 2, (i // 2) % 2, "real", f"r{i}")
                     for i in range(4)])
    path = tmp_path / "manifest.csv"
    sd.save_manifest(ds, path)
    back = sd.load_manifest(path)
    again = tmp_path / "copy" / "manifest.csv"
    sd.save_manifest(back, again)
    round_trip = (path.read_bytes() == again.read_bytes()
                  and [s.id for s in back] == [s.id for s in ds]
                  and np.array_equal(back.melanoma, ds.melanoma) and np.array_equal(back.hair, ds.hair)
                  and np.array_equal(sd.to_uint8(back.images()), sd.to_uint8(ds.images())))

    header = "path,melanoma,hair,split\n"
    good = "real/r0.png,0,0,train\n"
    cases = {
        "non-binary melanoma": (good + "real/r1.png,2,0,train\n", 3),
        "non-binary hair": ("real/r0.png,0,yes,train\n", 2),
        "missing file": (good + good.replace("r0", "r1") + "real/gone.png,1,0,train\n", 4),
    }
    caught = {}
    for name, (rows, line) in cases.items():
        path.write_text(header + rows)
        try:
            sd.load_manifest(path)
            caught[name] = False
        except sd.IngestionError as exc:
            caught[name] = exc.line == line and f"line {line}" in str(exc)
    record(11, round_trip and all(caught.values()),
           f"round trip exact {round_trip}, row-precise rejections {caught}")
