"""Self-contained acceptance suite.

Each criterion is an independent function returning (passed, detail).
The suite runs every criterion with fixed seeds, never stops at the
first failure, and emits a machine-readable verdict. Criteria 6-8 train
on the default synthetic benchmark and dominate the runtime; ``fast``
skips them for quick smoke checks.
"""

import itertools
import time

import numpy as np

from . import tensor as T
from .clustering import adjusted_rand_index, build_profiles, dtw_distance, kmeans
from .data import GridSeries, SynthCitySpec, normalize, synth_city
from .experiment import ExperimentConfig, build_seed_data, run_cell
from .gradcheck import check_gradients, relative_error
from .meta import MetaConfig, adapt_to_target, inner_adapt
from .metrics import paired_t_test, rmse
from .params import (
    Adam,
    ParamSet,
    from_checkpoint_bytes,
    grad_params,
    sgd_step,
    to_checkpoint_bytes,
)
from .presets import traffic_benchmark
from .stmem import PatternMemory, attend, clustering_loss_from_scores
from .stnet import Batch, StNetConfig, StNetModel


# -- criterion 1: gradient checks ---------------------------------------------

def _op_registry():
    """(name, fn, input-maker) for every differentiable operation.

    Input makers keep samples away from non-smooth points (relu kink,
    clamp floor, division near zero) so central differences are valid.
    """

    def away_from(x, point, margin):
        d = x - point
        return point + np.where(np.abs(d) < margin, np.sign(d + 1e-12) * margin, d)

    return [
        ("add", lambda ts: T.add(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("add_broadcast", lambda ts: T.add(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((4,))]),
        ("neg", lambda ts: T.neg(ts[0]),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("sub", lambda ts: T.sub(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("mul", lambda ts: T.mul(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("div", lambda ts: T.div(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)),
                      away_from(rng.standard_normal((3, 4)), 0.0, 0.5)]),
        ("scale", lambda ts: T.scale(ts[0], 0.37),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("square", lambda ts: T.square(ts[0]),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("sum_all", lambda ts: T.sum(ts[0]),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("sum_axis", lambda ts: T.sum(ts[0], axis=1, keepdims=True),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("mean", lambda ts: T.mean(ts[0], axis=0),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("reshape", lambda ts: T.reshape(ts[0], (4, 3)),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("transpose", lambda ts: T.transpose(ts[0]),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("broadcast_to", lambda ts: T.broadcast_to(ts[0], (5, 3, 4)),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("concat", lambda ts: T.concat(ts, axis=1),
         lambda rng: [rng.standard_normal((3, 2)), rng.standard_normal((3, 3))]),
        ("narrow", lambda ts: T.narrow(ts[0], 1, 1, 2),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("matmul_22", lambda ts: T.matmul(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        ("matmul_12", lambda ts: T.matmul(ts[0], ts[1]),
         lambda rng: [rng.standard_normal(4), rng.standard_normal((4, 2))]),
        ("matmul_21", lambda ts: T.matmul(ts[0], ts[1]),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal(4)]),
        ("relu", lambda ts: T.relu(ts[0]),
         lambda rng: [away_from(rng.standard_normal((3, 4)), 0.0, 0.05)]),
        ("clamp_min", lambda ts: T.clamp_min(ts[0], 0.2),
         lambda rng: [away_from(rng.standard_normal((3, 4)), 0.2, 0.05)]),
        ("sigmoid", lambda ts: T.sigmoid(ts[0]),
         lambda rng: [2.0 * rng.standard_normal((3, 4))]),
        ("tanh", lambda ts: T.tanh(ts[0]),
         lambda rng: [2.0 * rng.standard_normal((3, 4))]),
        ("log", lambda ts: T.log(ts[0]),
         lambda rng: [np.abs(rng.standard_normal((3, 4))) + 0.5]),
        ("softmax", lambda ts: T.softmax(ts[0], axis=-1),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("im2col", lambda ts: T.im2col(ts[0], 3, 3),
         lambda rng: [rng.standard_normal((2, 4, 4, 2))]),
        ("col2im", lambda ts: T.col2im(ts[0], 2, 4, 4, 2, 3, 3),
         lambda rng: [rng.standard_normal((2 * 4 * 4, 3 * 3 * 2))]),
        ("conv2d", lambda ts: T.conv2d(ts[0], ts[1], ts[2]),
         lambda rng: [rng.standard_normal((2, 4, 4, 2)),
                      rng.standard_normal((3, 3, 2, 3)),
                      rng.standard_normal(3)]),
    ]


def _micro_model(g=3, d=4):
    cfg = StNetConfig(patch_size=3, channels=1, cnn_layers=1, cnn_filters=2,
                      kernel_size=3, spatial_dim=4, lstm_hidden_dim=4,
                      window_len=3)
    return StNetModel(cfg, memory_patterns=g, memory_dim=d), cfg


def _micro_batch(cfg, rng, n=2, g=3):
    patches = rng.standard_normal(
        (n, cfg.window_len, cfg.patch_size, cfg.patch_size, cfg.channels))
    targets = np.tanh(rng.standard_normal((n, cfg.target_channels)))
    onehots = np.eye(g)[rng.integers(0, g, size=n)]
    return Batch(patches=patches, targets=targets, onehots=onehots,
                 region_ids=np.arange(n), timestamps=np.arange(n))


def criterion_gradients(ctx, trials=20, tol=1e-4):
    """Every op and the full model loss vs central finite differences."""
    t0 = time.perf_counter()
    worst_by_op = {}
    for name, fn, make in _op_registry():
        rng = np.random.default_rng(hash(name) % (2**32))
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, check_gradients(fn, make(rng), rng=rng))
        worst_by_op[name] = worst

    model, cfg = _micro_model()
    rng = np.random.default_rng(7)
    worst_model = 0.0
    for _ in range(trials):
        theta = model.init_params(rng=rng)
        memory = PatternMemory.create(3, 4, rng=rng)
        batch = _micro_batch(cfg, rng)
        names = list(theta.names())

        def full_loss(ts):
            p = ParamSet(zip(names, ts[:-1]))
            mem = PatternMemory(ts[-1])
            total, _, _ = model.query_loss(p, batch, mem, gamma=0.5)
            return total

        arrays = [theta[n].data for n in names] + [memory.M.data]
        worst_model = max(worst_model, check_gradients(full_loss, arrays, rng=rng))
    worst_by_op["full_model_loss"] = worst_model

    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst_by_op.items() if v > tol}
    overall = max(worst_by_op.values())
    passed = not bad and elapsed < 120.0
    detail = f"worst rel err {overall:.3e} over {len(worst_by_op)} checks"
    if bad:
        detail += f"; failing: { {k: f'{v:.2e}' for k, v in bad.items()} }"
    if elapsed >= 120.0:
        detail += f"; too slow ({elapsed:.0f}s >= 120s)"
    return passed, detail


# -- criterion 2: meta-gradient correctness -----------------------------------

class _QuadModel:
    """Scalar quadratic task family: loss(theta) = (theta - a)^2.

    Drives the real inner/outer machinery; the batch carries ``a``.
    """

    def loss(self, theta, batch, memory):
        diff = T.sub(theta["w"], T.tensor(batch))
        return T.sum(T.square(diff))

    def query_loss(self, theta, batch, memory, gamma=0.0):
        loss = self.loss(theta, batch, memory)
        return loss, loss.item(), 0.0


def criterion_meta_gradient(ctx):
    rng = np.random.default_rng(11)
    worst_quad = 0.0
    model = _QuadModel()
    for _ in range(50):
        theta0_val = rng.standard_normal()
        a = rng.standard_normal()
        alpha = rng.uniform(0.05, 0.45)
        cfg = MetaConfig(inner_lr=alpha, inner_steps=1, second_order=True)
        theta0 = ParamSet([("w", T.param(np.array(theta0_val)))])
        theta_c = inner_adapt(model, theta0, np.array(a), None, cfg)
        query, _, _ = model.query_loss(theta_c, np.array(a), None)
        grad = grad_params(query, theta0)["w"].item()
        closed = 2.0 * (1.0 - 2.0 * alpha) ** 2 * (theta0_val - a)
        worst_quad = max(worst_quad, abs(grad - closed))

    # Full network: second-order meta-gradient vs finite differences.
    # The FD evaluations must keep grad recording ON because the function
    # itself differentiates (the inner step), so this loop is explicit
    # rather than going through check_gradients.
    model, cfg = _micro_model()
    meta_cfg = MetaConfig(inner_lr=0.05, inner_steps=1, second_order=True, gamma=0.3)
    rng = np.random.default_rng(13)
    theta = model.init_params(rng=rng)
    memory = PatternMemory.create(3, 4, rng=rng)
    support = _micro_batch(cfg, rng)
    query = _micro_batch(cfg, rng)
    names = list(theta.names())
    base = {n: theta[n].data.copy() for n in names}

    def outer_val():
        leaves = {n: T.param(base[n].copy()) for n in names}
        adapted = inner_adapt(model, ParamSet(leaves.items()), support,
                              memory, meta_cfg)
        total, _, _ = model.query_loss(adapted, query, memory,
                                       gamma=meta_cfg.gamma)
        return total, leaves

    total, leaves = outer_val()
    grads = T.backward(total, [leaves[n] for n in names])
    h = 1e-5
    worst_net = 0.0
    for idx, name in enumerate(names):
        flat = base[name].reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = outer_val()[0].item()
            flat[i] = orig - h
            fm = outer_val()[0].item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        worst_net = max(worst_net, relative_error(
            grads[idx].data.reshape(-1), num))

    passed = worst_quad <= 1e-10 and worst_net <= 1e-3
    return passed, (f"closed-form diff {worst_quad:.2e} (tol 1e-10), "
                    f"network meta-grad rel err {worst_net:.2e} (tol 1e-3)")


# -- criterion 3: memory freeze ------------------------------------------------

def criterion_memory_freeze(ctx, trials=100):
    model, cfg = _micro_model()
    meta_cfg = MetaConfig(inner_lr=0.05, inner_steps=2, second_order=True,
                          adapt_steps=3, adapt_batch_size=2, gamma=0.1)
    rng = np.random.default_rng(17)
    for k in range(trials):
        theta = model.init_params(rng=rng)
        memory = PatternMemory.create(3, 4, rng=rng)
        before = memory.M.data.tobytes()
        batch = _micro_batch(cfg, rng)
        inner_adapt(model, theta, batch, memory, meta_cfg)
        if memory.M.data.tobytes() != before:
            return False, f"inner_adapt mutated memory on trial {k}"
        adapt_to_target(model, theta, memory, batch, meta_cfg, seed=k)
        if memory.M.data.tobytes() != before:
            return False, f"adapt_to_target mutated memory on trial {k}"
    return True, f"memory bitwise stable across {trials} adaptation trials"


# -- criterion 4: attention invariants ----------------------------------------

def criterion_attention(ctx, trials=200):
    rng = np.random.default_rng(23)
    g, d = 4, 6
    worst_sum = 0.0
    min_p = np.inf
    worst_hull = -np.inf
    for _ in range(trials):
        memory = PatternMemory(rng.standard_normal((g, d)))
        v = T.tensor(rng.standard_normal((5, d)))
        p, z = attend(v, memory)
        pd, zd = p.data, z.data
        worst_sum = max(worst_sum, float(np.max(np.abs(pd.sum(axis=1) - 1.0))))
        min_p = min(min_p, float(pd.min()))
        # support-function test: z inside hull(M) iff u.z <= max_g u.M_g for all u
        for _ in range(20):
            u = rng.standard_normal(d)
            gap = zd @ u - np.max(memory.M.data @ u)
            worst_hull = max(worst_hull, float(np.max(gap)))

    uniform_scores = T.tensor(np.zeros((8, 4)))
    onehots = np.eye(4)[rng.integers(0, 4, size=8)]
    loss = clustering_loss_from_scores(T.softmax(uniform_scores, axis=-1),
                                       T.tensor(onehots))
    uniform_err = abs(loss.item() - np.log(4.0))

    passed = (worst_sum <= 1e-9 and min_p > 0.0 and worst_hull <= 1e-9
              and uniform_err <= 1e-6)
    return passed, (f"sum-to-one err {worst_sum:.1e}, min p {min_p:.1e}, "
                    f"hull gap {worst_hull:.1e}, uniform loss err {uniform_err:.1e}")


# -- criterion 5: clustering recovery ------------------------------------------

def _dtw_bruteforce(a, b):
    """Min warping-path cost by explicit path enumeration (no DP reuse)."""
    n, m = len(a), len(b)
    best = [np.inf]

    def walk(i, j, acc):
        acc = acc + (a[i] - b[j]) ** 2
        if i == n - 1 and j == m - 1:
            best[0] = min(best[0], acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


def criterion_clustering(ctx):
    spec = SynthCitySpec(city_id="probe", rows=6, cols=6, periods=24 * 14,
                         noise_sigma=0.05)
    rng = np.random.default_rng(31)
    city = synth_city(spec, "traffic", rng, "source")
    series = normalize(city.series, train_len=city.series.T)
    profs = build_profiles(series, train_end=series.T)
    _, assigns = kmeans(np.stack([p.profile for p in profs]), 4, seed=0)
    ari = adjusted_rand_index([a.centroid_id for a in assigns], city.archetypes)

    rng = np.random.default_rng(37)
    n_pairs = 0
    for la, lb in itertools.product(range(1, 9), range(1, 9)):
        reps = 3 if max(la, lb) <= 6 else 1
        for _ in range(reps):
            # dyadic rationals: every path sum is exact in float64
            a = rng.integers(-128, 129, size=la) / 64.0
            b = rng.integers(-128, 129, size=lb) / 64.0
            got = dtw_distance(a, b)
            want = _dtw_bruteforce(a, b)
            if got != want:
                return False, (f"dtw mismatch at lengths ({la},{lb}): "
                               f"{got!r} != {want!r}")
            n_pairs += 1

    passed = ari == 1.0
    return passed, f"archetype ARI {ari:.3f} (need 1.0), dtw exact on {n_pairs} pairs"


# -- criteria 6-8: synthetic benchmark reproduction ----------------------------

BENCH_METHODS = ("st-net", "multi-ft", "maml", "metast")


def _benchmark_cells(ctx):
    """Train/score the four transfer methods on the default benchmark.

    Cached in ctx so the ordering, sensitivity, and pattern criteria share
    one set of runs.
    """
    if "bench_cells" in ctx:
        return ctx["bench_cells"]
    cfg = ExperimentConfig.from_dict(traffic_benchmark()).with_(
        methods=BENCH_METHODS)
    t0 = time.perf_counter()
    cells = []
    for seed in cfg.seeds:
        shared = build_seed_data(cfg, seed)
        for method in cfg.methods:
            cells.append(run_cell(cfg, method, seed, shared=shared))
    ctx["bench_elapsed"] = time.perf_counter() - t0
    ctx["bench_cells"] = cells
    return cells


def _pairwise(cells, better, worse):
    b = np.array([c["rmse"] for c in cells if c["method"] == better])
    w = np.array([c["rmse"] for c in cells if c["method"] == worse])
    res = paired_t_test(b, w)
    ok = b.mean() < w.mean() and not res.degenerate and res.p < 0.05
    return ok, b.mean(), w.mean(), res.p


def criterion_transfer(ctx):
    cells = _benchmark_cells(ctx)
    elapsed = ctx.get("bench_elapsed", 0.0)
    pairs = [("metast", "maml"), ("maml", "multi-ft"), ("multi-ft", "st-net")]
    lines = []
    all_ok = True
    for better, worse in pairs:
        ok, mb, mw, p = _pairwise(cells, better, worse)
        all_ok &= ok
        lines.append(f"{better} {mb:.4f} < {worse} {mw:.4f} (p={p:.4f}{'' if ok else ' FAIL'})")
    metast = np.array([c["rmse"] for c in cells if c["method"] == "metast"])
    maml = np.array([c["rmse"] for c in cells if c["method"] == "maml"])
    gain = float((maml.mean() - metast.mean()) / maml.mean())
    if gain < 0.02:
        all_ok = False
        lines.append(f"improvement over plain meta-init {100*gain:.1f}% < 2% FAIL")
    else:
        lines.append(f"improvement {100*gain:.1f}% >= 2%")
    if elapsed >= 1200.0:
        all_ok = False
        lines.append(f"over budget: {elapsed:.0f}s >= 1200s")
    return all_ok, "; ".join(lines)


def criterion_gamma_shape(ctx):
    cfg = ExperimentConfig.from_dict(traffic_benchmark()).with_(
        methods=("metast",))
    values = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
    interior = 0
    per_seed = []
    for seed in cfg.seeds:
        shared = build_seed_data(cfg, seed)
        scores = []
        for value in values:
            sub = cfg.with_(meta=cfg.meta.with_(gamma=value))
            cell = run_cell(sub, "metast", seed, shared=shared)
            scores.append(cell["rmse"])
        best = int(np.argmin(scores))
        if 0 < best < len(values) - 1:
            interior += 1
        per_seed.append(f"seed{seed}: best gamma={values[best]:g}")
    passed = interior >= 3
    return passed, f"interior optimum in {interior}/5 seeds ({'; '.join(per_seed)})"


def criterion_pattern_detection(ctx):
    cells = _benchmark_cells(ctx)
    matches = [c["attention_match"] for c in cells if c["method"] == "metast"]
    mean_match = float(np.mean(matches))
    passed = mean_match >= 0.80
    return passed, (f"attention-archetype agreement {mean_match:.2f} "
                    f"(per seed: {[f'{m:.2f}' for m in matches]})")


# -- criterion 9: baseline sanity ----------------------------------------------

def criterion_baselines(ctx):
    from .baselines import ar_fit, ha_forecast

    spec = SynthCitySpec(city_id="probe", rows=4, cols=4, periods=24 * 30,
                         noise_sigma=0.0)
    rng = np.random.default_rng(41)
    clean = synth_city(spec, "traffic", rng, "source")
    train_end = 24 * 24
    preds = ha_forecast(clean.series, train_end)
    clean_rmse = rmse(preds, clean.series.values[train_end:])

    spec_noisy = SynthCitySpec(city_id="probe", rows=4, cols=4, periods=24 * 30,
                               noise_sigma=0.1)
    rng = np.random.default_rng(43)
    noisy = synth_city(spec_noisy, "traffic", rng, "source")
    preds = ha_forecast(noisy.series, train_end)
    noisy_rmse = rmse(preds, noisy.series.values[train_end:])

    rng = np.random.default_rng(47)
    x = np.zeros(2000)
    eps = rng.standard_normal(2000)
    for t in range(1, 2000):
        x[t] = 0.5 * x[t - 1] + eps[t]
    model = ar_fit(x, p=1, q=0)
    coeff = float(model.coef[0])

    ok_clean = clean_rmse <= 1e-12
    ok_noisy = 0.09 <= noisy_rmse <= 0.13
    ok_ar = abs(coeff - 0.5) <= 0.05
    passed = ok_clean and ok_noisy and ok_ar
    return passed, (f"noiseless rmse {clean_rmse:.2e}, "
                    f"noisy rmse {noisy_rmse:.4f} in [0.09, 0.13]: {ok_noisy}, "
                    f"ar(1) coeff {coeff:.3f} (true 0.5)")


# -- criterion 10: determinism and persistence ----------------------------------

def criterion_determinism(ctx):
    from .experiment import report_fingerprint, run_experiment

    cfg = ExperimentConfig.from_dict(traffic_benchmark()).with_(
        methods=("ha", "metast"), seeds=(0,),
        meta=ExperimentConfig.from_dict(traffic_benchmark()).meta.with_(
            max_meta_iters=25, adapt_steps=20),
    )
    fp = [report_fingerprint(run_experiment(cfg)) for _ in range(2)]

    rng = np.random.default_rng(53)
    arrays = {
        "a.W": rng.standard_normal((7, 3)),
        "b": rng.standard_normal(11),
        "scalar": np.array(rng.standard_normal()),
    }
    blob = to_checkpoint_bytes(arrays)
    back = from_checkpoint_bytes(blob)
    round_ok = (set(back) == set(arrays)
                and all(np.array_equal(back[k], arrays[k]) for k in arrays)
                and all(back[k].dtype == np.float64 for k in arrays)
                and to_checkpoint_bytes(back) == blob)

    passed = fp[0] == fp[1] and round_ok
    return passed, (f"fingerprints {'match' if fp[0] == fp[1] else 'DIFFER'} "
                    f"({fp[0][:12]}..), checkpoint round-trip "
                    f"{'lossless' if round_ok else 'LOSSY'}")


# -- suite runner ---------------------------------------------------------------

CRITERIA = (
    (1, "gradient-checks", criterion_gradients, False),
    (2, "meta-gradients", criterion_meta_gradient, False),
    (3, "memory-freeze", criterion_memory_freeze, False),
    (4, "attention-invariants", criterion_attention, False),
    (5, "clustering-recovery", criterion_clustering, False),
    (6, "transfer-ordering", criterion_transfer, True),
    (7, "gamma-sensitivity", criterion_gamma_shape, True),
    (8, "pattern-detection", criterion_pattern_detection, True),
    (9, "baseline-sanity", criterion_baselines, False),
    (10, "determinism-persistence", criterion_determinism, False),
)

CRITERION_FUNCS = {cid: fn for cid, _, fn, _ in CRITERIA}


def acceptance_suite(fast=False, criteria=None):
    """Run the criteria and return a verdict dict.

    Individual failures (including exceptions) are recorded and the suite
    continues. ``criteria`` may be a comma-separated id string or an
    iterable of ints.
    """
    if isinstance(criteria, str):
        criteria = [int(c) for c in criteria.split(",") if c.strip()]
    wanted = set(criteria) if criteria else None
    ctx = {}
    results = []
    for cid, name, fn, long_running in CRITERIA:
        if wanted is not None and cid not in wanted:
            continue
        if fast and long_running:
            results.append({"id": cid, "name": name, "passed": False,
                            "skipped": True, "elapsed_s": 0.0,
                            "detail": "skipped (fast mode)"})
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = fn(ctx)
        except Exception as e:  # criterion crash counts as failure
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        results.append({"id": cid, "name": name, "passed": bool(passed),
                        "skipped": False,
                        "elapsed_s": round(time.perf_counter() - t0, 2),
                        "detail": detail})
    n_passed = sum(1 for r in results if r["passed"])
    return {
        "schema": "metast-verdict-v1",
        "criteria": results,
        "n_passed": n_passed,
        "n_total": len(results),
        "all_passed": n_passed == len(results),
    }
