"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 1-4 are fast oracle checks. Criteria 5-10 train desk-profile models
(3000 steps, batch 8, 64-bit): three clean seeds, three 0 dB seeds and the
six-point SNR sweep. Trained runs are cached for the whole session; on one
CPU core the suite takes roughly an hour.
"""

import math
import time

import numpy as np
import pytest
from scipy import special

from mcgurklab import evaluation as ev
from mcgurklab import experiments as ex
from mcgurklab import signal as sg
from mcgurklab import stats
from mcgurklab import tensorcore as tc
from mcgurklab.model import CpcModel, ModelConfig
from mcgurklab.signal import NoiseBank, Waveform
from mcgurklab.train import info_nce_loss

SEEDS = (0, 1, 2)
NOISY_SNR = 0.0
LINES = []


def record(n, ok, msg):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {msg}"
    LINES.append(line)
    print("\n" + line)
    return ok


# ---------------------------------------------------------------- 1. gradients


def _param(rng, *shape):
    return tc.tensor(rng.normal(size=shape), requires_grad=True)


def _op_cases(rng):
    w = lambda *s: tc.tensor(rng.normal(size=s))
    attn = tc.init_attention_params(8, 2, 2, rng)
    for v in attn.values():
        v.data = v.data + rng.normal(0, 0.2, v.shape)
    x8 = _param(rng, 4, 8)
    relu_in = _param(rng, 4, 3)
    relu_in.data = np.where(np.abs(relu_in.data) < 0.1, relu_in.data + 0.3, relu_in.data)
    a, b = _param(rng, 4, 3), _param(rng, 3, 2)
    c1, c2 = _param(rng, 2, 4, 3), _param(rng, 2, 3, 4)
    cx, ck, cb = _param(rng, 9, 2), _param(rng, 3, 2, 2), _param(rng, 2)
    s1 = _param(rng, 4, 4)
    ln_x, ln_g, ln_b = _param(rng, 4, 5), _param(rng, 5), _param(rng, 5)
    t1, t2 = _param(rng, 4, 2), _param(rng, 4, 3)
    e1 = _param(rng, 4, 2)
    g1 = _param(rng, 4, 3)
    r1 = _param(rng, 4, 3)
    w42, w44, w45, w44b, w48 = w(4, 2), w(4, 4), w(4, 5), w(4, 4), w(4, 8)
    return {
        "matmul": (lambda: tc.tsum(tc.mul(tc.matmul(a, b), w42)), [a, b]),
        "batched_matmul": (lambda: tc.tsum(tc.matmul(c1, c2)), [c1, c2]),
        "conv1d": (lambda: tc.tsum(tc.mul(tc.conv1d(cx, ck, 2, cb), tc.conv1d(cx, ck, 2, cb))), [cx, ck, cb]),
        "add_mul_scale_sub": (lambda: tc.tsum(tc.scale(tc.mul(tc.sub(tc.add(a, a), a), a), 0.7)), [a]),
        "softmax": (lambda: tc.tsum(tc.mul(tc.softmax(s1), w44)), [s1]),
        "log_softmax": (lambda: tc.tsum(tc.mul(tc.log_softmax(s1), w44b)), [s1]),
        "layer_norm": (lambda: tc.tsum(tc.mul(tc.layer_norm(ln_x, ln_g, ln_b), w45)), [ln_x, ln_g, ln_b]),
        "structural": (lambda: tc.tsum(tc.transpose(tc.concat([t1, t2], axis=-1))[1:, :]), [t1, t2]),
        "exp_log": (lambda: tc.tsum(tc.log(tc.add(tc.exp(e1), tc.tensor(1.0)))), [e1]),
        "gelu": (lambda: tc.tsum(tc.gelu(g1)), [g1]),
        "relu": (lambda: tc.tsum(tc.mul(tc.relu(relu_in), tc.relu(relu_in))), [relu_in]),
        "reshape_mean": (lambda: tc.tmean(tc.mul(tc.reshape(r1, (12,)), tc.reshape(r1, (12,)))), [r1]),
        "attention_causal": (lambda: tc.tsum(tc.mul(tc.attention_block(x8, attn, 2, causal=True), w48)), [x8, *attn.values()]),
        "attention_full": (lambda: tc.tsum(tc.mul(tc.attention_block(x8, attn, 2, causal=False), w48)), [x8, *attn.values()]),
    }


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    with tc.precision("64"):
        errs = {name: tc.grad_check(f, ps) for name, (f, ps) in _op_cases(np.random.default_rng(0)).items()}
        model = CpcModel(ModelConfig(embed_dim=8, audio_channels=4, heads=2, ffn_mult=2, horizon=2), seed=1)
        rng = np.random.default_rng(7)
        audio, lips = rng.normal(size=(2, 960)), rng.normal(size=(2, 2, 2))

        def composite():
            z, c = model.forward(audio, lips, rng=np.random.default_rng(0), dropout=True, dropout_p=0.0)
            return info_nce_loss(model.predict_future(c), z)

        errs["info_nce_of_model"] = tc.grad_check(composite, model.parameters())
    worst = max(errs, key=errs.get)
    dt = time.perf_counter() - t0
    ok = errs[worst] < 1e-4 and dt < 60
    assert record(1, ok, f"max rel err {errs[worst]:.2e} ({worst}) over {len(errs)} checks, {dt:.1f}s")


# ---------------------------------------------------------------- 2. DTW oracle


def _paths(n, m):
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield ((i, j),)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                for rest in walk(i + di, j + dj):
                    yield ((i, j),) + rest

    return list(walk(0, 0))


def test_criterion_02_dtw_matches_exhaustive_paths():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n, m, d = (int(v) for v in rng.integers(1, 6, size=3))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        cost = np.array([[ev.cosine_distance(x, y) for y in b] for x in a])
        best = min(_paths(n, m), key=lambda p: sum(cost[c] for c in p))
        want = sum(cost[c] for c in best) / len(best)
        worst = max(worst, abs(ev.dtw_distance(a, b) - want))
    dt = time.perf_counter() - t0
    assert record(2, worst <= 1e-12 and dt < 10, f"200 pairs, max |dtw - exhaustive| {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 3. SNR


def test_criterion_03_snr_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        snr = float(rng.uniform(-20, 20))
        speech = Waveform(rng.normal(size=int(rng.integers(200, 4000))))
        bank = NoiseBank(Waveform(rng.normal(size=8000)), talker_count=3, seed=i)
        mixed = sg.mix_at_snr(speech, bank, snr, i)
        noise = mixed.samples - speech.samples
        worst = max(worst, abs(sg.measured_snr_db(speech, noise) - snr))
    dt = time.perf_counter() - t0
    assert record(3, worst < 1e-9 and dt < 5, f"100 mixes over [-20, 20] dB, max error {worst:.1e} dB, {dt:.2f}s")


# ---------------------------------------------------------------- 4. statistics


def _pearson_direct(table):
    table = np.asarray(table, dtype=float)
    rows, cols = table.shape
    total = table.sum()
    stat = 0.0
    for i in range(rows):
        for j in range(cols):
            e = table[i].sum() * table[:, j].sum() / total
            stat += (table[i, j] - e) ** 2 / e
    df = (rows - 1) * (cols - 1)
    return stat, df, float(special.gammaincc(df / 2, stat / 2))


def test_criterion_04_statistics_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    df_ok = True
    for _ in range(50):
        table = rng.integers(1, 80, size=(int(rng.integers(2, 4)), int(rng.integers(2, 5))))
        got, want = stats.chi_squared(table), _pearson_direct(table)
        df_ok &= got[1] == want[1]
        worst = max(worst, abs(got[0] - want[0]), abs(got[2] - want[2]))
    x = rng.integers(0, 2, 90).astype(float)
    ci_a = stats.bootstrap_ci(x, 10000, seed=11)
    ci_b = stats.bootstrap_ci(x, 10000, seed=11)
    boot_ok = ci_a == ci_b and ci_a[0] <= x.mean() <= ci_a[1]
    dt = time.perf_counter() - t0
    ok = worst < 1e-10 and df_ok and boot_ok and dt < 10
    assert record(4, ok, f"chi2 max dev {worst:.1e} on 50 tables; bootstrap CI {ci_a} repeatable={ci_a == ci_b}, {dt:.1f}s")


# ---------------------------------------------------------------- desk runs


class DeskRuns:
    """Lazily trained desk-profile models, shared by criteria 5-10."""

    def __init__(self):
        self.base = ex.Settings.load(profile="desk", precision="64")
        self.inputs = ex.prepare_inputs(self.base)
        self.runs = {}

    def get(self, seed, snr):
        key = (seed, snr)
        if key not in self.runs:
            s = ex.Settings.load(profile="desk", seed=seed, precision="64")
            t0 = time.perf_counter()
            model, losses = ex.train_model(s, self.inputs, snr)
            t1 = time.perf_counter()
            res = ex.evaluate(model, self.inputs.corpus, s)
            t2 = time.perf_counter()
            self.runs[key] = {"model": model, "losses": losses, "res": res, "train_s": t1 - t0, "eval_s": t2 - t1}
            print(f"\n  desk run seed={seed} snr={snr}: train {t1 - t0:.0f}s, eval {t2 - t1:.0f}s")
        return self.runs[key]


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


def _vf(outcome):
    p = outcome.proportions
    return p["visual"] + p["fused"]


def test_criterion_05_training_sanity(desk):
    target = math.log(desk.base.train_config(None).batch_size) - 0.5
    finals, times = [], []
    for seed in SEEDS:
        run = desk.get(seed, None)
        finals.append(float(np.mean(run["losses"][-100:])))
        times.append(run["train_s"])
    below = sum(f < target for f in finals)
    steps = len(desk.get(0, None)["losses"])
    ok = below >= 2 and steps <= 3000
    msg = f"final-100 loss {[round(f, 3) for f in finals]} vs ln(8)-0.5={target:.3f}; {below}/3 below; {steps} steps, train {max(times):.0f}s max"
    assert record(5, ok, msg)


def test_criterion_06_congruent_cv(desk):
    run = desk.get(0, None)
    cv = run["res"]["cv"]
    others = [round(desk.get(s, None)["res"]["cv"].accuracy, 1) for s in SEEDS[1:]]
    ok = cv.accuracy >= 80.0 and run["eval_s"] < 600
    msg = f"seed 0 CV {cv.accuracy:.1f}% CI [{cv.ci[0]:.1f}, {cv.ci[1]:.1f}] (k sens {cv.sensitivity}); seeds 1-2 {others}; eval {run['eval_s']:.0f}s"
    assert record(6, ok, msg)


def test_criterion_07_noise_raises_visual_influence(desk):
    rows, wins, dfs = [], 0, []
    for seed in SEEDS:
        clean = desk.get(seed, None)["res"]["audiovisual"]
        noisy = desk.get(seed, NOISY_SNR)["res"]["audiovisual"]
        chi = ex._chi(clean, noisy)
        dfs.append(chi["df"])
        wins += _vf(noisy) > _vf(clean)
        stat = "n/a" if chi["statistic"] is None else f"{chi['statistic']:.2f}"
        rows.append(f"s{seed} V+F {_vf(clean):.2f}->{_vf(noisy):.2f} chi2={stat}")
    ok = wins >= 2 and all(d == 2 for d in dfs)
    assert record(7, ok, f"noisy V+F higher in {wins}/3 seeds, df={dfs}; " + "; ".join(rows))


def test_criterion_08_audio_only_control(desk):
    ao = desk.get(0, None)["res"]["audio_only"]
    share = ao.proportions["auditory"]
    others = [round(desk.get(s, None)["res"]["audio_only"].proportions["auditory"], 3) for s in SEEDS[1:]]
    assert record(8, share >= 0.90, f"seed 0 audio-only auditory {share:.3f} (n={len(ao.responses)}); seeds 1-2 {others}")


def test_criterion_09_snr_sweep(desk, tmp_path_factory):
    settings = ex.Settings.load(profile="desk", seed=0, precision="64")
    out = tmp_path_factory.mktemp("sweep")
    report = ex.experiment2(settings, ex.DEFAULT_SNRS, out)
    rows = report["rows"]
    complete = [r for r in rows if "failed" not in r]
    accs = {f"{r['snr_db']:+g}": round(r["cv"]["accuracy"], 1) for r in complete}
    ok = (
        len(rows) == 6
        and len(complete) == 6
        and [r["snr_db"] for r in rows] == list(ex.DEFAULT_SNRS)
        and all(r["cv"]["accuracy"] >= 80.0 for r in complete)
        and (out / "sweep_responses.csv").is_file()
    )
    obs = report["observations"]
    print("  exploratory: V+F by SNR", {k: round(v, 2) for k, v in obs["visual_plus_fused_by_snr"].items()},
          "all-auditory at <= -10 dB:", obs["all_auditory_at_or_below_minus10"])
    assert record(9, ok, f"{len(complete)}/6 rows complete, CV by SNR {accs}")


def test_criterion_10_profile_argmin_matches_forced_choice(desk):
    corpus = desk.inputs.corpus
    model = desk.get(0, None)["model"]
    cong = model.embed_records(corpus.congruent)
    inc = model.embed_records(corpus.incongruent)
    per_option = len(ev._option_refs(corpus.incongruent[0], corpus.congruent, False)["auditory"])
    k_all = per_option * len(ev.ROLES)

    def agreement(k):
        out = ev.run_forced_choice(corpus.incongruent, inc, corpus.congruent, cong, k)
        hits = [out.responses[sid] == min(prof, key=prof.get) for sid, prof in out.profiles.items()]
        return float(np.mean(hits)), len(hits)

    rate, n = agreement(k_all)
    rate_small, _ = agreement(per_option)
    msg = f"argmin agreement {rate:.3f} on {n} stimuli at k={k_all} (every option reference votes); k={per_option} gives {rate_small:.3f}"
    assert record(10, rate == 1.0, msg)
